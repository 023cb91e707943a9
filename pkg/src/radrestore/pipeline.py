"""End-to-end experiment pipeline with cached stages.

Stage order: synth -> degrade -> restore-2d -> fit-coarse -> train ->
render -> eval -> report. Every stage writes its artifacts under the output
directory and records a content key (config-section hash chained with the
upstream key) in .stamps/, so reruns skip stages whose inputs are unchanged
and a changed downstream parameter never re-executes upstream stages.

Timing-bearing logs live under logs/ and are the only artifacts that are not
a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import os
import sys

import numpy as np
import torch

from . import degrade, imgio, metrics, numerics, render
from .config import ExperimentConfig
from .field import TwoLevelField, load_field, save_field
from .gan import Generator
from .scenes import (MultiViewSet, forward_rig, hemisphere_rig, synth_scene,
                     two_primitive_scene)
from .training import (CoarseConfig, RestorationResult, fit_coarse,
                       train_restoration)

STAGES = ("synth", "degrade", "restore-2d", "fit-coarse", "train", "render",
          "eval", "report")


class StageError(RuntimeError):
    """Carries the failing stage's name for CLI error reporting."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stamp_path(out_dir, stage):
    return os.path.join(out_dir, ".stamps", stage.replace("-", "_"))


def _is_cached(out_dir, stage, key) -> bool:
    path = _stamp_path(out_dir, stage)
    return os.path.exists(path) and open(path).read() == key


def _mark(out_dir, stage, key) -> None:
    os.makedirs(os.path.join(out_dir, ".stamps"), exist_ok=True)
    with open(_stamp_path(out_dir, stage), "w") as fh:
        fh.write(key)


def _rig_cameras(cfg: ExperimentConfig):
    r = cfg.rig
    if cfg.scene.type == "object":
        train = hemisphere_rig(r.train_views, resolution=r.resolution)
        test = hemisphere_rig(r.test_views, resolution=r.resolution, phase=0.37)
    else:
        train = forward_rig(r.train_views, resolution=r.resolution)
        test = forward_rig(r.test_views, resolution=r.resolution, phase=0.29)
    return train, test


def degradation_for(cfg: ExperimentConfig, seed: int) -> degrade.DegradationConfig:
    d = cfg.degrade
    if d.stages:
        return degrade.DegradationConfig.from_dicts(d.stages, d.per_view_kernel)
    if d.task == "sr":
        return degrade.DegradationConfig([degrade.Downsample(d.sr_factor)])
    if d.task == "deblur":
        return degrade.DegradationConfig(
            [degrade.MotionBlur(d.motion_kernel_size, path_seed=seed)],
            d.per_view_kernel)
    if d.task == "denoise":
        read, shot = degrade.GAIN_PRESETS[d.noise_preset]
        return degrade.DegradationConfig(
            [degrade.ShotReadNoise(read=read, shot=shot, seed=seed)],
            d.per_view_kernel)
    if d.task == "mixed":
        return degrade.mixed_pipeline_config(cfg.scene.type, seed=seed)
    raise ValueError(f"task {d.task!r} has no stage-based degradation")


def upsample_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def render_views(field: TwoLevelField, cams, background, n_strat, n_imp,
                 use_ndc=False):
    """Deterministic (unjittered) full-frame renders."""
    imgs = []
    for cam in cams:
        rng = np.random.default_rng(0)   # unused when jitter is off
        with torch.no_grad():
            img, _ = render.render_patch(field, cam, render.full_image_patch(cam),
                                         n_strat, n_imp, rng, background,
                                         jitter=False, use_ndc=use_ndc)
        imgs.append(np.clip(img.numpy(), 0.0, 1.0))
    return imgs


def save_generator(path, gen: Generator) -> None:
    tensors = {f"param/{k}": v for k, v in gen.state_dict().items()}
    tensors["meta/resolution"] = torch.tensor(float(gen.resolution))
    tensors["meta/channels"] = torch.tensor(float(gen.channels))
    tensors["meta/z_dim"] = torch.tensor(float(gen.z_dim))
    numerics.save_checkpoint(path, tensors)


def load_generator(path) -> Generator:
    data = numerics.load_checkpoint(path)
    gen = Generator(resolution=int(data["meta/resolution"]),
                    channels=int(data["meta/channels"]),
                    z_dim=int(data["meta/z_dim"]))
    state = {k[len("param/"):]: torch.from_numpy(v)
             for k, v in data.items() if k.startswith("param/")}
    gen.load_state_dict(state)
    return gen


# --- stages ----------------------------------------------------------------

def stage_synth(cfg, seed, out_dir):
    scene = two_primitive_scene(seed=cfg.scene.seed)
    train_cams, test_cams = _rig_cameras(cfg)
    train = synth_scene(scene, train_cams, seed=cfg.scene.seed,
                        use_specular=cfg.scene.use_specular)
    test = synth_scene(scene, test_cams, seed=cfg.scene.seed,
                       use_specular=cfg.scene.use_specular)
    train.save(os.path.join(out_dir, "clean_train"))
    test.save(os.path.join(out_dir, "clean_test"))


def stage_degrade(cfg, seed, out_dir):
    clean = MultiViewSet.load(os.path.join(out_dir, "clean_train"))
    if cfg.degrade.task == "nerf_like":
        # fit a field on the clean views, then use its renders as the input
        ccfg = CoarseConfig(**{**_coarse_kwargs(cfg),
                               "iterations": cfg.degrade.nerf_like_iterations})
        field = fit_coarse(clean, ccfg, seed=seed * 31 + 5)
        imgs = render_views(field, clean.cameras, ccfg.background,
                            ccfg.n_strat, ccfg.n_imp, use_ndc=ccfg.use_ndc)
        degraded = MultiViewSet(imgs, clean.cameras)
    else:
        dcfg = degradation_for(cfg, seed)
        imgs, cams = [], []
        for i, (img, cam) in enumerate(zip(clean.images, clean.cameras)):
            out = dcfg.apply(img, view_index=i)
            imgs.append(out)
            cams.append(render.Camera(cam.c2w, cam.fov_x, out.shape[1],
                                      out.shape[0], cam.near, cam.far))
        degraded = MultiViewSet(imgs, cams)
    degraded.save(os.path.join(out_dir, "degraded"))


def stage_restore_2d(cfg, seed, out_dir):
    clean = MultiViewSet.load(os.path.join(out_dir, "clean_train"))
    degraded = MultiViewSet.load(os.path.join(out_dir, "degraded"))
    imgs, cams = [], []
    per_view = cfg.restore.per_view
    for i, (cl, dg) in enumerate(zip(clean.images, degraded.images)):
        if dg.shape != cl.shape:   # super-resolution task
            dg = upsample_nearest(dg, cfg.degrade.sr_factor)
        for j in range(per_view):
            sub_seed = seed * 100003 + i * per_view + j
            imgs.append(degrade.oracle_restore(cl, dg, cfg.restore.inconsistency,
                                               sub_seed))
            cams.append(clean.cameras[i])
    MultiViewSet(imgs, cams).save(os.path.join(out_dir, "restored"))


def _coarse_kwargs(cfg) -> dict:
    import dataclasses
    return dataclasses.asdict(cfg.coarse)


def stage_fit_coarse(cfg, seed, out_dir):
    degraded = MultiViewSet.load(os.path.join(out_dir, "degraded"))
    os.makedirs(os.path.join(out_dir, "coarse"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    field = fit_coarse(degraded, cfg.coarse, seed=seed * 31 + 1,
                       log_path=os.path.join(out_dir, "logs", "coarse.csv"))
    save_field(os.path.join(out_dir, "coarse", "field.rafe"), field)


def stage_train(cfg, seed, out_dir):
    coarse = load_field(os.path.join(out_dir, "coarse", "field.rafe"))
    restored = MultiViewSet.load(os.path.join(out_dir, "restored"))
    degraded = MultiViewSet.load(os.path.join(out_dir, "degraded"))
    os.makedirs(os.path.join(out_dir, "model"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "perframe"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    result = train_restoration(coarse, restored, degraded, cfg.train,
                               seed=seed * 31 + 2,
                               log_path=os.path.join(out_dir, "logs", "train.csv"))
    save_generator(os.path.join(out_dir, "model", "generator.rafe"),
                   result.generator)
    save_field(os.path.join(out_dir, "model", "coarse_trained.rafe"),
               result.coarse)
    # per-frame baseline: fit a plain field directly on the restored views
    baseline = fit_coarse(restored, cfg.coarse, seed=seed * 31 + 3,
                          log_path=os.path.join(out_dir, "logs", "perframe.csv"))
    save_field(os.path.join(out_dir, "perframe", "field.rafe"), baseline)


def _restoration_result(cfg, out_dir) -> RestorationResult:
    gen = load_generator(os.path.join(out_dir, "model", "generator.rafe"))
    coarse = load_field(os.path.join(out_dir, "model", "coarse_trained.rafe"))
    return RestorationResult(gen, coarse, cfg.train)


def stage_render(cfg, seed, out_dir):
    test = MultiViewSet.load(os.path.join(out_dir, "clean_test"))
    cc = cfg.coarse
    result = _restoration_result(cfg, out_dir)
    for s in range(cfg.eval.latent_samples):
        fld = result.sample_field_seeded(seed * 97 + s)
        imgs = render_views(fld, test.cameras, cc.background, cc.n_strat,
                            cc.n_imp, use_ndc=cc.use_ndc)
        MultiViewSet(imgs, test.cameras).save(
            os.path.join(out_dir, "renders", f"sample_{s:02d}"))
    perframe = load_field(os.path.join(out_dir, "perframe", "field.rafe"))
    imgs = render_views(perframe, test.cameras, cc.background, cc.n_strat,
                        cc.n_imp, use_ndc=cc.use_ndc)
    MultiViewSet(imgs, test.cameras).save(os.path.join(out_dir, "renders",
                                                       "perframe"))


def stage_eval(cfg, seed, out_dir):
    test = MultiViewSet.load(os.path.join(out_dir, "clean_test"))
    perframe = MultiViewSet.load(os.path.join(out_dir, "renders", "perframe"))
    samples = [MultiViewSet.load(os.path.join(out_dir, "renders", f"sample_{s:02d}"))
               for s in range(cfg.eval.latent_samples)]
    scene_name = cfg.scene.name
    task = cfg.degrade.task
    rows = []

    def add(metric, value):
        rows.append((scene_name, task, metric, f"{value:.10g}"))

    for v, clean in enumerate(test.images):
        add(f"psnr_perframe_view{v:02d}", metrics.psnr(perframe.images[v], clean))
        add(f"hf_perframe_view{v:02d}", metrics.hf_energy(perframe.images[v]))
        for s, smp in enumerate(samples):
            add(f"psnr_sample{s}_view{v:02d}", metrics.psnr(smp.images[v], clean))
            add(f"hf_sample{s}_view{v:02d}", metrics.hf_energy(smp.images[v]))
    n_views = len(test.images)
    add("psnr_perframe", np.mean([metrics.psnr(perframe.images[v], test.images[v])
                                  for v in range(n_views)]))
    add("ssim_perframe", np.mean([metrics.ssim(perframe.images[v], test.images[v])
                                  for v in range(n_views)]))
    add("proxy_perframe", np.mean([metrics.perceptual_proxy(perframe.images[v],
                                                            test.images[v])
                                   for v in range(n_views)]))
    add("hf_perframe", np.mean([metrics.hf_energy(im) for im in perframe.images]))
    all_samples = [im for smp in samples for im in smp.images]
    add("psnr_restored", np.mean([metrics.psnr(smp.images[v], test.images[v])
                                  for smp in samples for v in range(n_views)]))
    add("ssim_restored", np.mean([metrics.ssim(smp.images[v], test.images[v])
                                  for smp in samples for v in range(n_views)]))
    add("proxy_restored", np.mean([metrics.perceptual_proxy(smp.images[v],
                                                            test.images[v])
                                   for smp in samples for v in range(n_views)]))
    add("hf_restored", np.mean([metrics.hf_energy(im) for im in all_samples]))
    add("hf_clean", np.mean([metrics.hf_energy(im) for im in test.images]))
    if len(samples) >= 2:
        add("diversity", np.mean([
            metrics.diversity_score([smp.images[v] for smp in samples])
            for v in range(n_views)]))
    os.makedirs(os.path.join(out_dir, "metrics"), exist_ok=True)
    with open(os.path.join(out_dir, "metrics", "metrics.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "task", "metric", "value"])
        w.writerows(rows)


def stage_report(cfg, seed, out_dir):
    metrics_path = os.path.join(out_dir, "metrics", "metrics.csv")
    lines = ["# Restoration report", ""]
    if os.path.exists(metrics_path):
        with open(metrics_path) as fh:
            rdr = csv.reader(fh)
            next(rdr)
            rows = [r for r in rdr if "_view" not in r[2]]
        lines += ["| scene | task | metric | value |",
                  "| --- | --- | --- | --- |"]
        lines += [f"| {s} | {t} | {m} | {v} |" for s, t, m, v in rows]
    else:
        lines += ["| scene | task | metric | value |",
                  "| --- | --- | --- | --- |",
                  "| - | - | no data | - |"]
    lines.append("")

    # side-by-side strips: clean | degraded | restored-2d | perframe | samples
    missing = []
    try:
        test = MultiViewSet.load(os.path.join(out_dir, "clean_test"))
        degraded = MultiViewSet.load(os.path.join(out_dir, "degraded"))
        restored = MultiViewSet.load(os.path.join(out_dir, "restored"))
        perframe = MultiViewSet.load(os.path.join(out_dir, "renders", "perframe"))
        samples = [MultiViewSet.load(os.path.join(out_dir, "renders",
                                                  f"sample_{s:02d}"))
                   for s in range(cfg.eval.latent_samples)]
        os.makedirs(os.path.join(out_dir, "strips"), exist_ok=True)
        h, w = test.images[0].shape[:2]

        def fit(img):
            if img.shape[:2] != (h, w):
                f = h // img.shape[0]
                img = upsample_nearest(img, f)
            return img[:h, :w]

        for v in range(len(test.images)):
            cols = [test.images[v], fit(degraded.images[v % len(degraded.images)]),
                    restored.images[v % len(restored.images)],
                    perframe.images[v]] + [smp.images[v] for smp in samples]
            strip = np.concatenate([np.clip(c, 0, 1) for c in cols], axis=1)
            name = f"view_{v:02d}.png"
            imgio.save_png(os.path.join(out_dir, "strips", name), strip)
            lines.append(f"![view {v}](strips/{name})")
    except FileNotFoundError as exc:
        missing.append(str(exc))
    if missing:
        lines += ["", "Missing inputs:"] + [f"- {m}" for m in missing]
    lines.append("")
    with open(os.path.join(out_dir, "report.md"), "w") as fh:
        fh.write("\n".join(lines))


_STAGE_FUNCS = {
    "synth": (stage_synth, ("scene", "rig")),
    "degrade": (stage_degrade, ("degrade", "coarse")),
    "restore-2d": (stage_restore_2d, ("restore",)),
    "fit-coarse": (stage_fit_coarse, ("coarse",)),
    "train": (stage_train, ("train", "coarse")),
    "render": (stage_render, ("eval", "coarse")),
    "eval": (stage_eval, ("eval",)),
    "report": (stage_report, ("eval",)),
}


def run_pipeline(cfg: ExperimentConfig, seed: int, out_dir,
                 upto: str = "report", verbose: bool = False) -> None:
    """Run all stages through `upto` inclusive, reusing cached results."""
    if upto not in STAGES:
        raise ValueError(f"unknown stage {upto!r}")
    os.makedirs(out_dir, exist_ok=True)
    key = f"seed={seed}"
    for stage in STAGES:
        func, sections = _STAGE_FUNCS[stage]
        key = f"{key}|{stage}:{cfg.section_hash(*sections)}"
        if _is_cached(out_dir, stage, key):
            if verbose:
                print(f"[{stage}] cached", file=sys.stderr)
        else:
            if verbose:
                print(f"[{stage}] running", file=sys.stderr)
            try:
                func(cfg, seed, out_dir)
            except Exception as exc:
                raise StageError(stage, exc) from exc
            _mark(out_dir, stage, key)
        if stage == upto:
            break
