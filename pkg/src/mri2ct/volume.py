"""Volumes, RVOL file IO, preprocessing, body masks and synthetic phantoms.

A :class:`Volume` is a 3-D scalar field [D,H,W] with voxel spacing in mm, a
modality tag and an intensity unit.  CT intensities live on the Hounsfield
scale; training normalizes them to [-1, 1] over the fixed clip window
[-1024, 3000] HU (air through dense bone, a 4024 HU span).

RVOL container: a 256-byte ASCII header followed by the raw little-endian
float32 voxels, W fastest:

    RVOL1 extents=D,H,W spacing=SD,SH,SW unit=U modality=M comment=...

padded with NUL bytes to exactly 256.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

HU_MIN = -1024.0
HU_MAX = 3000.0
HU_SPAN = HU_MAX - HU_MIN            # 4024, also the default PSNR data range
HU_MID = (HU_MIN + HU_MAX) / 2.0     # 988

MODALITIES = ("MRI", "CT", "SCT", "MASK")
UNITS = ("HU", "normalized", "arbitrary")

_HEADER_BYTES = 256
_MAGIC = "RVOL1"


@dataclass
class Volume:
    data: np.ndarray                  # [D,H,W] float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: str = "CT"
    unit: str = "HU"
    comment: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise DataError(f"modality must be one of {MODALITIES}")
        if self.unit not in UNITS:
            raise DataError(f"unit must be one of {UNITS}")
        if self.unit == "normalized":
            lo, hi = float(self.data.min(initial=0)), float(self.data.max(initial=0))
            if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
                raise DataError(f"normalized volume outside [-1,1]: [{lo}, {hi}]")
        if self.modality == "MASK":
            vals = np.unique(self.data)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise DataError("mask volumes must contain only {0, 1}")

    @property
    def extents(self):
        return self.data.shape

    def voxel_count(self):
        return int(self.data.size)


def write_rvol(path, vol):
    header = (f"{_MAGIC} extents={vol.extents[0]},{vol.extents[1]},{vol.extents[2]}"
              f" spacing={vol.spacing[0]!r},{vol.spacing[1]!r},{vol.spacing[2]!r}"
              f" unit={vol.unit} modality={vol.modality}"
              f" comment={_clean_comment(vol.comment)}")
    raw = header.encode("ascii", errors="replace")
    if len(raw) > _HEADER_BYTES:
        raw = raw[:_HEADER_BYTES]
    raw = raw + b"\x00" * (_HEADER_BYTES - len(raw))
    with open(path, "wb") as fh:
        fh.write(raw)
        fh.write(vol.data.astype("<f4").tobytes())


def _clean_comment(comment):
    return comment.replace("\x00", " ").replace("\n", " ")


def read_rvol(path):
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER_BYTES)
        if len(raw) < _HEADER_BYTES or not raw.startswith(_MAGIC.encode()):
            raise DataError(f"{path}: not an {_MAGIC} volume file")
        header = raw.rstrip(b"\x00").decode("ascii")
        fields = {}
        for token in header.split(" ")[1:]:
            if "=" in token:
                key, val = token.split("=", 1)
                if key == "comment":
                    # comment runs to end of header
                    idx = header.index("comment=")
                    fields["comment"] = header[idx + len("comment="):]
                    break
                fields[key] = val
        try:
            extents = tuple(int(v) for v in fields["extents"].split(","))
            spacing = tuple(float(v) for v in fields["spacing"].split(","))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: malformed RVOL header") from exc
        n = int(np.prod(extents))
        data = np.frombuffer(fh.read(4 * n), dtype="<f4")
        if data.size != n:
            raise DataError(f"{path}: truncated voxel data")
        return Volume(data.reshape(extents).copy(), spacing,
                      modality=fields.get("modality", "CT"),
                      unit=fields.get("unit", "arbitrary"),
                      comment=fields.get("comment", ""))


# --- intensity normalization -------------------------------------------------


def normalize_hu(vol):
    """Clip to [-1024, 3000] HU, then map affinely onto [-1, 1].

    Evaluated as (hu - 988) / 2012 so the window endpoints and midpoint map
    to exactly -1, +1 and 0."""
    if vol.unit != "HU":
        raise DataError(f"normalize_hu expects an HU volume, got unit {vol.unit!r}")
    clipped = np.clip(vol.data.astype(np.float64), HU_MIN, HU_MAX)
    norm = (clipped - HU_MID) / (HU_SPAN / 2.0)
    return replace(vol, data=np.clip(norm, -1.0, 1.0).astype(np.float32),
                   unit="normalized")


def denormalize_hu(vol):
    """Inverse of :func:`normalize_hu`; exact on the clipped range."""
    if vol.unit != "normalized":
        raise DataError(f"denormalize_hu expects a normalized volume, got {vol.unit!r}")
    hu = vol.data.astype(np.float64) * (HU_SPAN / 2.0) + HU_MID
    return replace(vol, data=hu.astype(np.float32), unit="HU")


# --- resampling ---------------------------------------------------------------


def resample_isotropic(vol, target_mm=1.0):
    """Trilinear resample to uniform spacing.

    Output extent per axis is round(extent * spacing / target); output voxel
    o samples input index o * target / spacing (clamped), so an
    already-isotropic volume at the target spacing passes through untouched.
    """
    if target_mm <= 0:
        raise DataError("target spacing must be positive")
    if all(abs(s - target_mm) < 1e-12 for s in vol.spacing):
        return replace(vol, data=vol.data.copy())
    data = vol.data.astype(np.float64)
    for ax, sp in enumerate(vol.spacing):
        ext = data.shape[ax]
        new_ext = max(1, int(round(ext * sp / target_mm)))
        pos = np.arange(new_ext) * (target_mm / sp)
        pos = np.clip(pos, 0.0, ext - 1.0)
        i0 = np.minimum(np.floor(pos).astype(np.int64), ext - 1)
        i1 = np.minimum(i0 + 1, ext - 1)
        t = pos - i0
        a = np.take(data, i0, axis=ax)
        b = np.take(data, i1, axis=ax)
        shape = [1] * data.ndim
        shape[ax] = new_ext
        data = a + t.reshape(shape) * (b - a)
    return replace(vol, data=data.astype(np.float32),
                   spacing=(target_mm,) * 3)


# --- body mask ----------------------------------------------------------------


def body_mask(ct):
    """Patient-anatomy mask from a CT in HU.

    Recipe (frozen): threshold HU > -500, keep the largest 6-connected
    component, then fill internal holes independently on every axial slice.
    """
    if ct.unit != "HU":
        raise DataError("body_mask expects an HU volume")
    fg = ct.data > -500.0
    if not fg.any():
        return Volume(np.zeros_like(ct.data), ct.spacing, modality="MASK",
                      unit="arbitrary")
    structure = ndimage.generate_binary_structure(3, 1)   # 6-connectivity
    labels, count = ndimage.label(fg, structure=structure)
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, count + 1))
    keep = labels == (1 + int(np.argmax(sizes)))
    filled = np.empty_like(keep)
    for d in range(keep.shape[0]):
        filled[d] = ndimage.binary_fill_holes(keep[d])
    return Volume(filled.astype(np.float32), ct.spacing, modality="MASK",
                  unit="arbitrary")


# --- synthetic paired phantoms -------------------------------------------------

# Disjoint nonlinear MRI->CT lookup per tissue class: the map is learnable
# but deliberately far from affine (e.g. bone is MRI-dark yet CT-bright).
TISSUES = (
    ("soft", 0.55, 40.0),
    ("fat", 0.80, -100.0),
    ("bone", 0.25, 1400.0),
    ("fluid", 0.95, 15.0),
    ("muscle", 0.45, 55.0),
)

AIR_MRI = 0.0
AIR_HU = -1024.0


@dataclass(frozen=True)
class PhantomComponent:
    center: tuple[float, float, float]   # voxel coordinates
    radii: tuple[float, float, float]
    mri: float                           # raw MRI intensity in [0, 1]
    hu: float

    def __post_init__(self):
        if not (HU_MIN <= self.hu <= HU_MAX):
            raise ConfigError(f"component HU {self.hu} outside [{HU_MIN}, {HU_MAX}]")
        if min(self.radii) <= 0:
            raise ConfigError("component radii must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int]
    seed: int = 0
    n_components: int = 4
    noise: float = 0.02
    components: tuple[PhantomComponent, ...] | None = None

    def __post_init__(self):
        if len(self.extents) != 3 or min(self.extents) < 4:
            raise ConfigError("phantom extents must be 3 values >= 4")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if self.components is None and self.n_components < 0:
            raise ConfigError("n_components must be >= 0")


def phantom_spec_from_dict(raw, seed_override=None):
    """Build a PhantomSpec from parsed JSON, rejecting unknown keys."""
    allowed = ("extents", "seed", "n_components", "noise", "components")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in phantom spec")
    if "extents" not in raw:
        raise ConfigError("phantom spec misses required key 'extents'")
    comps = None
    if raw.get("components") is not None:
        comps = []
        for i, c in enumerate(raw["components"]):
            extra = sorted(set(c) - {"center", "radii", "mri", "hu"})
            if extra:
                raise ConfigError(f"unknown key {extra[0]!r} in components[{i}]")
            try:
                comps.append(PhantomComponent(
                    center=tuple(float(v) for v in c["center"]),
                    radii=tuple(float(v) for v in c["radii"]),
                    mri=float(c["mri"]), hu=float(c["hu"])))
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"components[{i}]: malformed entry ({exc})") from exc
    try:
        return PhantomSpec(
            extents=tuple(int(v) for v in raw["extents"]),
            seed=int(raw.get("seed", 0)) if seed_override is None else int(seed_override),
            n_components=int(raw.get("n_components", 4)),
            noise=float(raw.get("noise", 0.02)),
            components=tuple(comps) if comps is not None else None,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom spec: {exc}") from exc


def phantom_spec_to_dict(spec):
    return {
        "extents": list(spec.extents), "seed": spec.seed,
        "n_components": spec.n_components, "noise": spec.noise,
        "components": None if spec.components is None else [
            {"center": list(c.center), "radii": list(c.radii),
             "mri": c.mri, "hu": c.hu} for c in spec.components],
    }


def _auto_components(spec, rng):
    d, h, w = spec.extents
    comps = []
    for i in range(spec.n_components):
        name, mri, hu = TISSUES[i % len(TISSUES)]
        if i == 0:
            # large central body so later components sit inside anatomy
            center = (d / 2.0, h / 2.0, w / 2.0)
            radii = (0.40 * d, 0.42 * h, 0.42 * w)
        else:
            radii = tuple(float(rng.uniform(0.08, 0.18) * e) for e in (d, h, w))
            center = tuple(float(rng.uniform(r + 1, e - r - 2))
                           for r, e in zip(radii, (d, h, w)))
        comps.append(PhantomComponent(center=center, radii=radii, mri=mri, hu=hu))
    return comps


def _validate_inside(comp, extents):
    for c, r, e in zip(comp.center, comp.radii, extents):
        if c - r < -0.5 or c + r > e - 0.5:
            raise ConfigError(
                f"component at {comp.center} radius {comp.radii} exceeds extents {extents}")


def make_phantom_pair(spec):
    """Deterministic paired (MRI, CT) phantom from the seed.

    Shared ellipsoid geometry, per-component intensities from the disjoint
    tissue lookup, additive Gaussian noise on the MRI only.  The MRI is
    returned already normalized to [-1, 1]; the CT is in HU.
    """
    rng = np.random.default_rng(spec.seed)
    comps = list(spec.components) if spec.components is not None \
        else _auto_components(spec, rng)
    for comp in comps:
        _validate_inside(comp, spec.extents)

    d, h, w = spec.extents
    mri_raw = np.full((d, h, w), AIR_MRI, dtype=np.float64)
    ct = np.full((d, h, w), AIR_HU, dtype=np.float32)
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    for comp in comps:    # later components paint over earlier ones
        dist = sum(((g - c) / r) ** 2
                   for g, c, r in zip(grid, comp.center, comp.radii))
        inside = dist <= 1.0
        mri_raw[inside] = comp.mri
        ct[inside] = comp.hu

    if spec.noise > 0:
        mri_raw = mri_raw + rng.normal(0.0, spec.noise, size=mri_raw.shape)
    mri_norm = np.clip(2.0 * mri_raw - 1.0, -1.0, 1.0).astype(np.float32)

    mri = Volume(mri_norm, modality="MRI", unit="normalized")
    ct_vol = Volume(ct, modality="CT", unit="HU")
    return mri, ct_vol


def component_mask(spec, index):
    """Binary membership mask of one component (oracle helper for tests)."""
    comps = list(spec.components) if spec.components is not None \
        else _auto_components(spec, np.random.default_rng(spec.seed))
    comp = comps[index]
    d, h, w = spec.extents
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, comp.center, comp.radii))
    return Volume((dist <= 1.0).astype(np.float32), modality="MASK",
                  unit="arbitrary")


# --- patch sampling -------------------------------------------------------------


def valid_patch_centers(mask, patch_extents):
    """Mask voxels that can serve as patch centers with the patch fully
    inside the volume: center = origin + patch//2, origin in [0, ext-patch]."""
    m = mask.data > 0.5
    ext = mask.extents
    for ax, (e, p) in enumerate(zip(ext, patch_extents)):
        if p > e:
            raise DataError(f"patch extent {p} exceeds volume extent {e} on axis {ax}")
        lo = p // 2
        hi = e - p + p // 2
        idx = [slice(None)] * 3
        idx[ax] = slice(0, lo)
        m[tuple(idx)] = False
        idx[ax] = slice(hi + 1, e)
        m[tuple(idx)] = False
    return np.argwhere(m)


def sample_patch(mri, ct, mask, patch_extents, rng):
    """Paired crop whose center voxel lies inside the mask.

    Returns (mri_patch, ct_patch, origin); both patches are crops of the
    same recorded origin.
    """
    centers = valid_patch_centers(mask, patch_extents)
    if len(centers) == 0:
        raise DataError("no valid patch center inside the mask")
    c = centers[int(rng.integers(len(centers)))]
    origin = tuple(int(ci - p // 2) for ci, p in zip(c, patch_extents))
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_extents))
    return mri.data[sl].copy(), ct.data[sl].copy(), origin
