"""Dense float64 tensor substrate for training.

All optimized quantities live in torch float64 tensors on CPU. This module
wraps the pieces the rest of the package relies on: reverse-mode gradients
(including differentiating through a gradient, needed for the R1 penalty),
a hand-rolled Adam with explicit state, a central finite-difference checker
used as the gradient oracle in tests, and the binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

CHECKPOINT_MAGIC = b"RAFE"
CHECKPOINT_VERSION = 1


def difftensor(values, requires_grad: bool = False) -> torch.Tensor:
    """Create a float64 tensor, rejecting non-finite input."""
    t = torch.as_tensor(values, dtype=torch.float64)
    if not torch.isfinite(t).all():
        raise ValueError("non-finite values in tensor")
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, name: str = "tensor") -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {name}")


def zero_grad(params) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(param) into .grad of every reachable parameter.

    Repeated calls accumulate, matching torch semantics.
    """
    if loss.ndim != 0 and loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise ValueError("loss is detached from any differentiable graph")
    loss.backward(retain_graph=retain_graph)


def grad_norm_sq_wrt_input(net, x: torch.Tensor) -> torch.Tensor:
    """Squared norm of d(net)/dx, still differentiable w.r.t. net's parameters.

    `net(x)` must reduce to a scalar (per batch it is summed, which leaves
    per-sample input gradients untouched for batched inputs).
    """
    if not x.requires_grad:
        raise ValueError("input must require grad")
    y = net(x)
    if y.numel() != 1:
        y = y.sum()
    (g,) = torch.autograd.grad(y, x, create_graph=True)
    return (g * g).sum()


@dataclass
class AdamState:
    """Moments and step counter for one parameter list."""

    lr: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 2e-3, beta1: float = 0.0,
                   beta2: float = 0.99, eps: float = 1e-8) -> "AdamState":
        params = list(params)
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                   m=[torch.zeros_like(p) for p in params],
                   v=[torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params, grads, state: AdamState) -> None:
    """Standard Adam update with bias correction, in place.

    With beta1=0 the first moment is the raw gradient.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite gradient in adam_step")
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        m_hat = m / bc1
        v_hat = v / bc2
        p.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))


def adam_step_module(module: torch.nn.Module, state: AdamState) -> None:
    """Adam step over a module's parameters using their accumulated .grad."""
    params = list(module.parameters())
    adam_step(params, [p.grad for p in params], state)


def finite_diff_check(f, params, h: float = 1e-5, eps: float = 1e-8) -> float:
    """Max relative error between analytic gradients of f and central differences.

    `f()` must be a deterministic scalar function of the current values of
    `params` (a list of tensors with requires_grad). Non-determinism is
    detected by evaluating twice.
    """
    params = list(params)
    l0 = f()
    l1 = f()
    if l0.detach().item() != l1.detach().item():
        raise RuntimeError("f is non-deterministic; finite differences unreliable")
    zero_grad(params)
    l0.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                with torch.enable_grad():
                    fp = f().detach().item()
                flat[i] = orig - h
                with torch.enable_grad():
                    fm = f().detach().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                denom = max(abs(gflat[i].item()), eps)
                worst = max(worst, abs(gflat[i].item() - numeric) / denom)
    return worst


def save_checkpoint(path, tensors: dict) -> None:
    """Write named tensors: magic 'RAFE', version u32, count u32, then per
    tensor {name_len u32, UTF-8 name, rank u32, extents u32 each, f64 payload},
    all little-endian."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            arr = arr.astype("<f8", copy=False)
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as a dict of float64 numpy arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise ValueError("truncated checkpoint payload")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        return out
