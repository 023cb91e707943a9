"""Training loops: coarse-field pretraining and generative restoration.

The coarse stage fits tri-planes + decoder to the degraded views with an L2
patch reconstruction loss plus total-variation and distortion regularizers.
The restoration stage freezes the coarse planes and adversarially trains a
latent-conditioned residual generator (with the shared decoder) against
independently restored, mutually inconsistent high-quality views.
"""

from __future__ import annotations

import copy
import csv
import math
import time
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics, numerics, render
from .field import DEFAULT_BOUNDS, FieldDecoder, TriPlaneSet, TwoLevelField, init_triplane
from .gan import Discriminator, Generator


def tv_loss(tp: TriPlaneSet) -> torch.Tensor:
    """Mean squared difference between horizontally/vertically adjacent texels,
    over all planes and channels."""
    total = 0.0
    count = 0
    for p in tp.planes:
        dh = p[:, 1:, :] - p[:, :-1, :]
        dv = p[:, :, 1:] - p[:, :, :-1]
        total = total + (dh ** 2).sum() + (dv ** 2).sum()
        count += dh.numel() + dv.numel()
    return total / count


def distortion_loss(s_mid: torch.Tensor, s_deltas: torch.Tensor,
                    weights: torch.Tensor) -> torch.Tensor:
    """Compactness penalty on rendering weights over normalized ray coordinates:
    sum_ij w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 ds_i, averaged over rays.

    Expects s_mid ascending along the sample axis (true for render outputs),
    which lets the pairwise term collapse to cumulative sums:
    sum_ij w_i w_j |s_i - s_j| = 2 sum_i w_i (s_i W_i - S_i) with
    W_i = sum_{j<i} w_j and S_i = sum_{j<i} w_j s_j."""
    ws = weights * s_mid
    w_before = torch.cumsum(weights, dim=-1) - weights
    ws_before = torch.cumsum(ws, dim=-1) - ws
    inter = 2.0 * (weights * (s_mid * w_before - ws_before)).sum(dim=-1)
    intra = (weights ** 2 * s_deltas).sum(dim=-1) / 3.0
    return (inter + intra).mean()


def distortion_from_extras(extras: dict, weights: torch.Tensor) -> torch.Tensor:
    near, far = extras["near"], extras["far"]
    s = (extras["ts"] - near) / (far - near)
    ds = extras["deltas"] / (far - near)
    return distortion_loss(s, ds, weights)


def density_reg(sigmas: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of consecutive densities along each ray."""
    d = sigmas[..., 1:] - sigmas[..., :-1]
    return (d ** 2).mean()


def geometry_loss(rendered_patch: torch.Tensor, restored_patch) -> torch.Tensor:
    """Perceptual-proxy distance, differentiable w.r.t. the rendered patch."""
    return metrics.perceptual_proxy(rendered_patch, restored_patch)


def adversarial_losses(disc, real_patch: torch.Tensor, fake_patch: torch.Tensor,
                       lambda_r1: float):
    """Non-saturating softplus GAN losses with R1 on the real patches.

    L_D = E[softplus(D(fake))] + E[softplus(-D(real))] + lambda_r1 E[||grad D(real)||^2]
    L_G = E[softplus(-D(fake))]
    """
    if real_patch.shape != fake_patch.shape:
        raise ValueError("real/fake patch extents differ")
    d_fake = disc(fake_patch.detach())
    d_real = disc(real_patch)
    loss_d = F.softplus(d_fake).mean() + F.softplus(-d_real).mean()
    r1 = torch.zeros((), dtype=torch.float64)
    if lambda_r1 > 0:
        x = real_patch.detach().requires_grad_(True)
        r1 = numerics.grad_norm_sq_wrt_input(disc, x) / x.shape[0]
        loss_d = loss_d + lambda_r1 * r1
    loss_g = F.softplus(-disc(fake_patch)).mean()
    return loss_d, loss_g, r1


def blur_anneal(patch: torch.Tensor, t: float, sigma0: float = 2.0,
                t_cut: float = 0.5) -> torch.Tensor:
    """Gaussian blur with sigma(t) = sigma0 * max(0, 1 - t/t_cut); identity
    once the schedule reaches zero. Applied to both discriminator branches."""
    sigma = sigma0 * max(0.0, 1.0 - t / t_cut)
    if sigma <= 0.0:
        return patch
    radius = max(1, int(math.ceil(2.0 * sigma)))
    ax = torch.arange(-radius, radius + 1, dtype=torch.float64)
    g = torch.exp(-0.5 * (ax / sigma) ** 2)
    g = g / g.sum()
    kx = g.view(1, 1, 1, -1).expand(patch.shape[1], 1, 1, 2 * radius + 1)
    ky = g.view(1, 1, -1, 1).expand(patch.shape[1], 1, 2 * radius + 1, 1)
    x = F.pad(patch, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, kx, groups=patch.shape[1])
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    return F.conv2d(x, ky, groups=patch.shape[1])


@dataclass
class CoarseConfig:
    iterations: int = 1500
    patch_size: int = 32
    n_strat: int = 64
    n_imp: int = 32
    lr: float = 5e-3
    lambda_rec: float = 1.0
    lambda_tv: float = 0.01
    lambda_dis: float = 0.001
    resolution: int = 64
    channels: int = 16
    color_channels: int = 15
    init_scale: float = 0.1
    bounds: tuple = DEFAULT_BOUNDS
    background: tuple = (1.0, 1.0, 1.0)
    use_viewdir: bool = True
    use_ndc: bool = False
    jitter: bool = True
    log_every: int = 100


def _patch_from_image(img: np.ndarray, patch: render.PatchSpec) -> torch.Tensor:
    s = patch.size
    return torch.from_numpy(
        np.ascontiguousarray(img[patch.py:patch.py + s, patch.px:patch.px + s]))


def fit_coarse(views, cfg: CoarseConfig, seed: int = 0,
               log_path=None) -> TwoLevelField:
    """Adam-fit coarse tri-planes + decoder on random patches of the views.

    Returns the field with fine level unset; plane tensors come back detached
    (frozen) so downstream stages cannot perturb them accidentally.
    """
    if len(views.images) < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    planes = init_triplane(cfg.resolution, cfg.channels, cfg.init_scale,
                           seed=rng.integers(2 ** 31), bounds=cfg.bounds,
                           requires_grad=True)
    decoder = FieldDecoder(cfg.channels, cfg.color_channels,
                           seed=int(rng.integers(2 ** 31)))
    field = TwoLevelField(planes, decoder, None, use_viewdir=cfg.use_viewdir)
    params = planes.parameters() + list(decoder.parameters())
    state = numerics.AdamState.for_params(params, lr=cfg.lr)
    log_rows = []
    for it in range(cfg.iterations):
        v = int(rng.integers(len(views.images)))
        img = views.images[v]
        cam = views.cameras[v]
        patch = render.sample_patch_origin(cam.width, cam.height, cfg.patch_size,
                                           0.0, rng, mode="uniform", cam_index=v)
        rendered, extras = render.render_patch(field, cam, patch, cfg.n_strat,
                                               cfg.n_imp, rng, cfg.background,
                                               jitter=cfg.jitter, use_ndc=cfg.use_ndc)
        target = _patch_from_image(img, patch)
        loss_rec = ((rendered - target) ** 2).mean()
        loss = (cfg.lambda_rec * loss_rec
                + cfg.lambda_tv * tv_loss(planes)
                + cfg.lambda_dis * distortion_from_extras(extras, extras["weights"]))
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"coarse fit diverged at iteration {it}: loss={float(loss)}")
        numerics.zero_grad(params)
        loss.backward()
        numerics.adam_step(params, [p.grad for p in params], state)
        if log_path and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            log_rows.append((it, float(loss_rec.detach()), float(loss.detach())))
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss_rec", "loss_total"])
            w.writerows(log_rows)
    frozen = TriPlaneSet([p.detach().clone() for p in planes.planes], cfg.bounds)
    return TwoLevelField(frozen, decoder, None, use_viewdir=cfg.use_viewdir)


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 8
    patch_size: int = 16
    n_strat: int = 48
    n_imp: int = 24
    lr_generator: float = 2.5e-3
    lr_discriminator: float = 2e-3
    lr_decoder: float = 1e-3
    lambda_geometry: float = 0.5
    lambda_adv: float = 1.0
    lambda_rec: float = 1.0
    lambda_r1: float = 0.5
    lambda_dreg: float = 1e-4
    minibatch_group: int = 4
    z_dim: int = 64
    blur_sigma0: float = 2.0
    blur_t_cut: float = 0.3
    beta_final: float = 0.3
    background: tuple = (1.0, 1.0, 1.0)
    use_ndc: bool = False
    jitter: bool = True
    # ablation switches
    use_residual_coarse: bool = True
    use_viewdir: bool = True
    beta_sampling: bool = True
    # EMA of generator weights: accepted in configs but not implemented
    ema: bool = False
    log_every: int = 50
    collapse_check_every: int = 200
    collapse_threshold: float = 1e-8

    def __post_init__(self):
        if self.batch_size % self.minibatch_group != 0:
            raise ValueError("batch size must be divisible by the minibatch-std group")
        for name in ("lambda_geometry", "lambda_adv", "lambda_rec", "lambda_r1",
                     "lambda_dreg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class RestorationResult:
    generator: Generator
    coarse: TwoLevelField          # frozen coarse planes + trained decoder
    config: TrainConfig

    def sample_field(self, z) -> TwoLevelField:
        """Instantiate the restored field for one latent code."""
        z = torch.as_tensor(np.asarray(z, dtype=np.float64))
        with torch.no_grad():
            fine = self.generator.fine_planes(z, self.coarse.bounds)
        fine = fine.detach_copy()
        if not self.config.use_residual_coarse:
            base = init_triplane(self.coarse.coarse.resolution,
                                 self.coarse.coarse.channels, 0.1, seed=0,
                                 bounds=self.coarse.bounds)
            return TwoLevelField(base, self.coarse.decoder, fine,
                                 use_viewdir=self.config.use_viewdir)
        return self.coarse.with_fine(fine)

    def sample_field_seeded(self, seed: int) -> TwoLevelField:
        rng = np.random.default_rng(seed)
        return self.sample_field(rng.standard_normal(self.generator.z_dim))


def train_restoration(coarse_field: TwoLevelField, restored, degraded,
                      cfg: TrainConfig, seed: int = 0,
                      log_path=None) -> RestorationResult:
    """Alternating G/D Adam steps of the residual-tri-plane GAN.

    Each iteration draws a batch of (view, z, patch) triples, renders fake
    patches through coarse+generated-fine planes, updates the discriminator
    (softplus losses + R1 on real patches), then updates generator + decoder
    on adversarial, perceptual-geometry, coarse-branch reconstruction, and
    density-regularization terms. Coarse planes stay bit-frozen throughout.
    """
    rng = np.random.default_rng(seed)
    res = coarse_field.coarse.resolution
    chans = coarse_field.coarse.channels
    # own copy of the shared decoder so the caller's field is left untouched
    decoder = copy.deepcopy(coarse_field.decoder)
    coarse_field = TwoLevelField(coarse_field.coarse, decoder, None,
                                 use_viewdir=coarse_field.use_viewdir)
    if not cfg.use_residual_coarse:
        # ablation: random frozen base instead of the pretrained coarse planes
        base = init_triplane(res, chans, 0.1, seed=0, bounds=coarse_field.bounds)
        coarse_field = TwoLevelField(base, coarse_field.decoder, None,
                                     use_viewdir=cfg.use_viewdir)
    coarse_field = TwoLevelField(coarse_field.coarse, coarse_field.decoder, None,
                                 use_viewdir=cfg.use_viewdir)
    generator = Generator(resolution=res, channels=chans, z_dim=cfg.z_dim,
                          seed=int(rng.integers(2 ** 31)))
    disc = Discriminator(patch_size=cfg.patch_size, group_size=cfg.minibatch_group,
                         seed=int(rng.integers(2 ** 31)))
    gen_params = list(generator.parameters())
    dec_params = list(coarse_field.decoder.parameters())
    g_params = gen_params + dec_params
    g_state = numerics.AdamState.for_params(gen_params, lr=cfg.lr_generator)
    dec_state = numerics.AdamState.for_params(dec_params, lr=cfg.lr_decoder)
    d_params = list(disc.parameters())
    d_state = numerics.AdamState.for_params(d_params, lr=cfg.lr_discriminator)
    coarse_snapshot = [p.clone() for p in coarse_field.coarse.planes]
    log_rows = []
    t_start = time.monotonic()
    for it in range(cfg.iterations):
        t = it / max(cfg.iterations - 1, 1)
        mode = "beta" if cfg.beta_sampling else "uniform"
        fakes, reals, dreg_terms = [], [], []
        z_batch = torch.from_numpy(rng.standard_normal((cfg.batch_size, cfg.z_dim)))
        fine_stacks = generator(z_batch)
        for b in range(cfg.batch_size):
            v = int(rng.integers(len(restored.images)))
            cam = restored.cameras[v]
            patch = render.sample_patch_origin(cam.width, cam.height,
                                               cfg.patch_size, t, rng,
                                               beta_final=cfg.beta_final,
                                               mode=mode, cam_index=v)
            fine = TriPlaneSet([fine_stacks[b, i] for i in range(3)],
                               coarse_field.bounds)
            fld = coarse_field.with_fine(fine)
            rendered, extras = render.render_patch(fld, cam, patch, cfg.n_strat,
                                                   cfg.n_imp, rng, cfg.background,
                                                   jitter=cfg.jitter,
                                                   use_ndc=cfg.use_ndc)
            fakes.append(rendered.permute(2, 0, 1))
            reals.append(_patch_from_image(restored.images[v], patch).permute(2, 0, 1))
            dreg_terms.append(density_reg(extras["sigmas"]))
        fake = torch.stack(fakes)
        real = torch.stack(reals)
        fake_b = blur_anneal(fake, t, cfg.blur_sigma0, cfg.blur_t_cut)
        real_b = blur_anneal(real, t, cfg.blur_sigma0, cfg.blur_t_cut)

        # discriminator step
        loss_d, _, r1 = adversarial_losses(disc, real_b, fake_b, cfg.lambda_r1)
        if not torch.isfinite(loss_d):
            raise FloatingPointError(f"discriminator loss diverged at iteration {it}")
        numerics.zero_grad(d_params)
        loss_d.backward(retain_graph=True)
        numerics.adam_step(d_params, [p.grad for p in d_params], d_state)

        # generator + decoder step
        loss_g_adv = F.softplus(-disc(fake_b)).mean()
        loss_geom = geometry_loss(fake.permute(0, 2, 3, 1), real.permute(0, 2, 3, 1))
        loss_rec = _coarse_branch_rec(coarse_field, degraded, cfg, rng)
        loss_dreg = torch.stack(dreg_terms).mean()
        loss_g = (cfg.lambda_adv * loss_g_adv + cfg.lambda_geometry * loss_geom
                  + cfg.lambda_rec * loss_rec + cfg.lambda_dreg * loss_dreg)
        if not torch.isfinite(loss_g):
            raise FloatingPointError(f"generator loss diverged at iteration {it}")
        numerics.zero_grad(g_params)
        loss_g.backward()
        numerics.adam_step(gen_params, [p.grad for p in gen_params], g_state)
        numerics.adam_step(dec_params, [p.grad for p in dec_params], dec_state)

        if cfg.collapse_check_every and it and it % cfg.collapse_check_every == 0:
            with torch.no_grad():
                probe = generator(torch.from_numpy(rng.standard_normal((4, cfg.z_dim))))
                if float(probe.var(dim=0).mean()) < cfg.collapse_threshold:
                    warnings.warn(f"possible mode collapse at iteration {it}: "
                                  "fine planes barely vary across latents")
        if log_path and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
            log_rows.append((it, float(loss_d.detach()), float(loss_g_adv.detach()),
                             float(loss_geom.detach()), float(loss_rec.detach()),
                             float(r1.detach()), time.monotonic() - t_start))
    for p, snap in zip(coarse_field.coarse.planes, coarse_snapshot):
        assert torch.equal(p, snap), "coarse planes were modified during training"
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss_d", "loss_g", "loss_geometry",
                        "loss_rec", "r1", "wall_time_s"])
            w.writerows(log_rows)
    return RestorationResult(generator, coarse_field, cfg)


def _coarse_branch_rec(coarse_field: TwoLevelField, degraded, cfg: TrainConfig,
                       rng: np.random.Generator) -> torch.Tensor:
    """L2 between a coarse-branch render and the matching degraded patch.

    Keeps the shared decoder anchored to the degraded inputs; gradients reach
    the decoder only (coarse planes carry no grad)."""
    v = int(rng.integers(len(degraded.images)))
    cam = degraded.cameras[v]
    size = min(cfg.patch_size, cam.width, cam.height)
    patch = render.sample_patch_origin(cam.width, cam.height, size, 0.0, rng,
                                       mode="uniform", cam_index=v)
    rendered, _ = render.render_patch(coarse_field, cam, patch, cfg.n_strat,
                                      cfg.n_imp, rng, cfg.background,
                                      jitter=cfg.jitter, use_ndc=cfg.use_ndc)
    target = _patch_from_image(degraded.images[v], patch)
    return ((rendered - target) ** 2).mean()
