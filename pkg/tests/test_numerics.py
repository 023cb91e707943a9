"""Gradient-engine contract tests: finite-difference oracles, Adam reference
trajectory, double-backward consistency, checkpoint round trips."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from radrestore import numerics


def small_mlp(sizes, seed, activation=nn.Softplus):
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(sizes) - 1):
        lin = nn.Linear(sizes[i], sizes[i + 1]).double()
        with torch.no_grad():
            lin.weight.copy_(torch.from_numpy(rng.standard_normal(tuple(lin.weight.shape)) * 0.5))
            lin.bias.copy_(torch.from_numpy(rng.standard_normal(tuple(lin.bias.shape)) * 0.1))
        layers.append(lin)
        if i < len(sizes) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


class TestBackward:
    def test_quadratic(self):
        x = numerics.difftensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = (x * x).sum()
        numerics.backward(loss)
        assert torch.equal(x.grad, torch.tensor([2.0, 4.0, 6.0], dtype=torch.float64))

    def test_constant_loss_zero_grads(self):
        x = numerics.difftensor([1.0, -2.0], requires_grad=True)
        loss = (x * 0.0).sum() + 3.0
        numerics.backward(loss)
        assert torch.equal(x.grad, torch.zeros(2, dtype=torch.float64))

    def test_repeated_backward_accumulates(self):
        x = numerics.difftensor([2.0], requires_grad=True)
        loss = (x * x).sum()
        numerics.backward(loss, retain_graph=True)
        numerics.backward(loss)
        assert float(x.grad) == pytest.approx(8.0)

    def test_non_scalar_loss_rejected(self):
        x = numerics.difftensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            numerics.backward(x * x)

    def test_detached_loss_rejected(self):
        with pytest.raises(ValueError):
            numerics.backward(torch.tensor(1.0, dtype=torch.float64))

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError):
            numerics.difftensor([1.0, float("nan")])

    def test_mlp_matches_finite_differences(self):
        net = small_mlp([4, 8, 8, 3], seed=7)
        rng = np.random.default_rng(11)
        x = torch.from_numpy(rng.standard_normal((5, 4)))
        err = numerics.finite_diff_check(lambda: (net(x) ** 2).mean(),
                                         list(net.parameters()))
        assert err < 1e-4

    def test_gradient_linearity(self):
        x = numerics.difftensor([0.3, -1.2, 0.7], requires_grad=True)

        def grads(fn):
            numerics.zero_grad([x])
            numerics.backward(fn())
            return x.grad.clone()

        g1 = grads(lambda: (x ** 2).sum())
        g2 = grads(lambda: (x ** 3).sum())
        g12 = grads(lambda: 2.0 * (x ** 2).sum() + 0.5 * (x ** 3).sum())
        assert torch.allclose(g12, 2.0 * g1 + 0.5 * g2, atol=1e-14)

    def test_deterministic_replay(self):
        def run():
            net = small_mlp([3, 6, 1], seed=3)
            x = torch.from_numpy(np.random.default_rng(5).standard_normal((4, 3)))
            loss = (net(x) ** 2).sum()
            loss.backward()
            return [p.grad.clone() for p in net.parameters()]

        for a, b in zip(run(), run()):
            assert torch.equal(a, b)


class TestGradNormSq:
    def test_linear_closed_form(self):
        w = numerics.difftensor([0.5, -1.5, 2.0], requires_grad=True)
        x = numerics.difftensor([1.0, 2.0, 3.0], requires_grad=True)
        pen = numerics.grad_norm_sq_wrt_input(lambda v: (w * v).sum(), x)
        assert float(pen) == pytest.approx(float((w ** 2).sum()))
        pen.backward()
        assert torch.allclose(w.grad, 2.0 * w.detach())

    def test_constant_net(self):
        w = numerics.difftensor([1.0], requires_grad=True)
        x = numerics.difftensor([1.0, 2.0], requires_grad=True)
        pen = numerics.grad_norm_sq_wrt_input(lambda v: (v * 0.0).sum() + w * 0.0, x)
        assert float(pen) == 0.0

    def test_detached_input_rejected(self):
        x = torch.tensor([1.0], dtype=torch.float64)
        with pytest.raises(ValueError):
            numerics.grad_norm_sq_wrt_input(lambda v: v.sum(), x)

    def test_mlp_nested_finite_differences(self):
        net = small_mlp([3, 6, 1], seed=13)
        x = torch.from_numpy(np.random.default_rng(17).standard_normal((1, 3)))
        x = x.requires_grad_(True)
        err = numerics.finite_diff_check(
            lambda: numerics.grad_norm_sq_wrt_input(net, x),
            list(net.parameters()), h=1e-5)
        assert err < 1e-3


class TestAdam:
    def test_defaults(self):
        state = numerics.AdamState.for_params([torch.zeros(1, dtype=torch.float64)])
        assert state.beta1 == 0.0 and state.beta2 == 0.99 and state.lr == 2e-3

    def test_zero_gradient_leaves_params(self):
        p = torch.tensor([1.0, 2.0], dtype=torch.float64)
        state = numerics.AdamState.for_params([p])
        numerics.adam_step([p], [torch.zeros_like(p)], state)
        assert torch.equal(p, torch.tensor([1.0, 2.0], dtype=torch.float64))

    def test_matches_scalar_reference(self):
        # independent scalar Adam, written directly from the update equations
        lr, b1, b2, eps = 1e-2, 0.0, 0.99, 1e-8
        g = 0.7
        ref = 1.0
        m = v = 0.0
        p = torch.tensor([1.0], dtype=torch.float64)
        state = numerics.AdamState.for_params([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        for t in range(1, 26):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            ref -= lr * mh / (np.sqrt(vh) + eps)
            numerics.adam_step([p], [torch.tensor([g], dtype=torch.float64)], state)
            assert float(p) == pytest.approx(ref, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        p = torch.zeros(2, dtype=torch.float64)
        state = numerics.AdamState.for_params([p])
        with pytest.raises(ValueError):
            numerics.adam_step([p], [torch.zeros(3, dtype=torch.float64)], state)

    def test_nonfinite_gradient_rejected(self):
        p = torch.zeros(1, dtype=torch.float64)
        state = numerics.AdamState.for_params([p])
        with pytest.raises(FloatingPointError):
            numerics.adam_step([p], [torch.tensor([float("inf")], dtype=torch.float64)], state)


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        x = numerics.difftensor([0.5, -0.25], requires_grad=True)
        err = numerics.finite_diff_check(lambda: (3.0 * x * x).sum(), [x])
        assert err < 1e-9

    def test_nondeterministic_f_detected(self):
        x = numerics.difftensor([1.0], requires_grad=True)
        state = {"k": 0.0}

        def f():
            state["k"] += 1.0
            return (x * state["k"]).sum()

        with pytest.raises(RuntimeError):
            numerics.finite_diff_check(f, [x])

    def test_relu_kink_unreliable(self):
        # derivative mismatch at a nondifferentiable point shows up as large error
        x = numerics.difftensor([0.0], requires_grad=True)
        err = numerics.finite_diff_check(lambda: torch.relu(x).sum(), [x])
        assert err > 1e-2


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tensors = {
            "planes/xy": torch.from_numpy(np.random.default_rng(0).standard_normal((2, 3, 4))),
            "scalar": torch.tensor(3.25, dtype=torch.float64).reshape(()),
        }
        path = tmp_path / "ckpt.rafe"
        numerics.save_checkpoint(path, tensors)
        loaded = numerics.load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k].numpy())

    def test_magic_and_truncation(self, tmp_path):
        path = tmp_path / "bad.rafe"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(ValueError):
            numerics.load_checkpoint(path)
        good = tmp_path / "good.rafe"
        numerics.save_checkpoint(good, {"a": torch.ones(4, dtype=torch.float64)})
        data = good.read_bytes()
        trunc = tmp_path / "trunc.rafe"
        trunc.write_bytes(data[:-8])
        with pytest.raises(ValueError):
            numerics.load_checkpoint(trunc)
