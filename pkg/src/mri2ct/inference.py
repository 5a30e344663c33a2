"""Full-volume synthesis by sliding-window patching with overlap averaging.

Window origins step by the stride; the trailing window per axis is clamped
to the volume boundary so every voxel is covered.  Contributions accumulate
into a float64 buffer in plan order and each voxel is divided by its
coverage count at the end (uniform weights), so the result is independent
of evaluation order and, on constant inputs, exactly independent of the
stride choice.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, DataError
from .generator import GeneratorConfig, generator_forward, init_generator
from .tensor import Tensor
from .volume import Volume, denormalize_hu, normalize_hu, read_rvol, write_rvol


@dataclass
class SlidingWindowPlan:
    patch: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: list[tuple[int, int, int]]
    coverage: np.ndarray                 # [D,H,W] int64, >= 1 everywhere

    def describe(self):
        p, s = self.patch, self.stride
        return f"patch={p[0]}x{p[1]}x{p[2]} stride={s[0]}x{s[1]}x{s[2]}"


def _axis_origins(ext, patch, stride):
    if patch > ext:
        raise ConfigError(f"patch extent {patch} exceeds volume extent {ext}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    last = ext - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)         # clamp the trailing window to the edge
    return origins


def plan_windows(vol_extents, patch_extents, stride):
    """Precompute window origins and exact per-voxel coverage counts."""
    patch = tuple(int(p) for p in patch_extents)
    stride = tuple(int(s) for s in stride)
    per_axis = [_axis_origins(e, p, s)
                for e, p, s in zip(vol_extents, patch, stride)]
    origins = list(itertools.product(*per_axis))
    coverage = np.zeros(vol_extents, dtype=np.int64)
    for o in origins:
        sl = tuple(slice(a, a + p) for a, p in zip(o, patch))
        coverage[sl] += 1
    if coverage.min() < 1:
        raise AssertionError("window plan left voxels uncovered")
    return SlidingWindowPlan(patch=patch, stride=stride, origins=origins,
                             coverage=coverage)


def synthesize_volume(mri, forward_fn, plan):
    """Normalized MRI volume -> normalized synthetic CT volume.

    ``forward_fn`` maps a [D,H,W] float32 patch to a like-shaped prediction.
    """
    if mri.unit != "normalized":
        raise DataError("synthesize_volume expects a normalized MRI volume")
    accum = np.zeros(mri.extents, dtype=np.float64)
    for o in plan.origins:
        sl = tuple(slice(a, a + p) for a, p in zip(o, plan.patch))
        pred = forward_fn(mri.data[sl])
        accum[sl] += pred.astype(np.float64)
    out = (accum / plan.coverage).astype(np.float32)
    return Volume(out, mri.spacing, modality="SCT", unit="normalized")


def generator_patch_fn(params, cfg):
    """Wrap generator params into the [D,H,W] -> [D,H,W] patch callable."""
    def forward(patch):
        x = Tensor(patch[None, None])
        with T.no_grad():
            y = generator_forward(x, params, cfg)
        return y.data[0, 0]
    return forward


def load_generator(ckpt_path):
    """Rebuild a generator (config + params) from a checkpoint file.

    Accepts both generator-only checkpoints and full training checkpoints
    whose arrays carry the ``generator.`` prefix.
    """
    cfg, params, _ = _load_generator_full(ckpt_path)
    return cfg, params


def _load_generator_full(ckpt_path):
    config, arrays = checkpoint.load(ckpt_path)
    if "generator" not in config:
        raise DataError(f"{ckpt_path}: checkpoint carries no generator config")
    cfg = GeneratorConfig.from_dict(config["generator"])
    params = init_generator(cfg, np.random.default_rng(0))
    prefix = "generator." if any(k.startswith("generator.") for k in arrays) else ""
    for name, t in params.named():
        key = prefix + name
        if key not in arrays:
            raise DataError(f"{ckpt_path}: missing parameter {key}")
        if arrays[key].shape != t.shape:
            raise DataError(f"{ckpt_path}: parameter {key} has shape "
                            f"{arrays[key].shape}, expected {t.shape}")
        t.data = np.ascontiguousarray(arrays[key])
    return cfg, params, config


def _default_patch(extents, div):
    """Nominal 16-voxel patch, shrunk to the largest divisor multiple that fits."""
    target = max(div, (16 // div) * div)
    patch = []
    for e in extents:
        m = (e // div) * div
        if m < div:
            raise DataError(f"volume extent {e} smaller than the generator "
                            f"divisor {div}; no valid patch exists")
        patch.append(min(m, target))
    return tuple(patch)


def synthesize_to_hu(mri_path, ckpt_path, out_path, stride=None, patch=None):
    """File-in/file-out synthesis: read MRI, synthesize, write HU RVOL.

    Provenance (checkpoint hash and window plan) is recorded in the output
    header comment.
    """
    mri = read_rvol(mri_path)
    if mri.unit == "HU":
        mri = normalize_hu(mri)
    elif mri.unit != "normalized":
        raise DataError(f"{mri_path}: MRI volume must be HU or normalized")

    cfg, params, config = _load_generator_full(ckpt_path)
    div = cfg.spatial_divisor
    if patch is None:
        train_patch = (config.get("train") or {}).get("patch")
        if train_patch and all(p <= e for p, e in zip(train_patch, mri.extents)):
            patch = tuple(train_patch)
        else:
            patch = _default_patch(mri.extents, div)
    if any(p % div for p in patch):
        raise ConfigError(f"patch {patch} must be divisible by {div}")
    if stride is None:
        stride = tuple(max(1, p // 2) for p in patch)

    plan = plan_windows(mri.extents, patch, stride)
    sct = synthesize_volume(mri, generator_patch_fn(params, cfg), plan)
    sct_hu = denormalize_hu(sct)

    with open(ckpt_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()[:16]
    sct_hu = replace(sct_hu, modality="SCT",
                     comment=f"ckpt=sha256:{digest} {plan.describe()}")
    write_rvol(out_path, sct_hu)
    return sct_hu
