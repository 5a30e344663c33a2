"""Masked image-quality metrics: MAE, PSNR, 3-D windowed SSIM and Dice.

Conventions, frozen here and echoed into every report so numbers stay
comparable across runs:

* metrics run inside a binary body mask;
* PSNR data range defaults to the 4024 HU normalization span, identical
  volumes report the documented 100 dB cap;
* SSIM uses a uniform 7x7x7 window, k1=0.01, k2=0.03, population variance,
  averaged over windows whose center voxel is inside the mask and whose
  window lies fully inside the volume;
* Dice of two empty masks is defined as 1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume import HU_SPAN, Volume

PSNR_CAP_DB = 100.0

SSIM_DEFAULTS = {"window": 7, "k1": 0.01, "k2": 0.03}


def _as_bool_mask(mask):
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    return data > 0.5


def _check_same_extents(*vols):
    extents = {v.extents if isinstance(v, Volume) else np.asarray(v).shape
               for v in vols}
    if len(extents) != 1:
        raise DataError(f"volume extents differ: {sorted(extents)}")


def mae(pred, ref, mask):
    """Mean absolute error (HU) over mask voxels only."""
    _check_same_extents(pred, ref, mask)
    m = _as_bool_mask(mask)
    if not m.any():
        raise DataError("empty mask: MAE undefined")
    diff = np.abs(pred.data.astype(np.float64) - ref.data.astype(np.float64))
    return float(diff[m].mean())


def psnr(pred, ref, mask, data_range=HU_SPAN):
    """10*log10(data_range^2 / masked MSE), capped at 100 dB for identity."""
    _check_same_extents(pred, ref, mask)
    m = _as_bool_mask(mask)
    if not m.any():
        raise DataError("empty mask: PSNR undefined")
    diff = pred.data.astype(np.float64) - ref.data.astype(np.float64)
    mse = float((diff[m] ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP_DB))


def _uniform_window_means(data, window):
    """Local window means via a uniform filter; only valid-centered entries
    (full window support) are consumed by the caller."""
    return ndimage.uniform_filter(data, size=window, mode="constant")


def ssim(pred, ref, mask, window=7, k1=0.01, k2=0.03, data_range=HU_SPAN):
    """Mean local SSIM over in-mask, fully supported window centers."""
    _check_same_extents(pred, ref, mask)
    if window % 2 == 0 or window < 3:
        raise DataError("SSIM window must be odd and >= 3")
    m = _as_bool_mask(mask)
    x = pred.data.astype(np.float64)
    y = ref.data.astype(np.float64)
    r = window // 2
    valid = np.zeros_like(m)
    inner = tuple(slice(r, e - r) for e in m.shape)
    if any(s.start >= s.stop for s in inner):
        raise DataError(f"volume too small for a {window}^3 SSIM window")
    valid[inner] = m[inner]
    if not valid.any():
        raise DataError("no in-mask voxel supports a full SSIM window")

    mu_x = _uniform_window_means(x, window)
    mu_y = _uniform_window_means(y, window)
    mu_xx = _uniform_window_means(x * x, window)
    mu_yy = _uniform_window_means(y * y, window)
    mu_xy = _uniform_window_means(x * y, window)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    smap = num / den
    return float(smap[valid].mean())


def dice(a, b):
    """Overlap 2|A∩B| / (|A|+|B|); two empty masks score 1.0 by convention."""
    _check_same_extents(a, b)
    ma = _as_bool_mask(a)
    mb = _as_bool_mask(b)
    sa, sb = int(ma.sum()), int(mb.sum())
    if sa + sb == 0:
        return 1.0
    inter = int(np.logical_and(ma, mb).sum())
    return 2.0 * inter / (sa + sb)


def threshold_mask(vol, hu_threshold):
    """Binary mask of voxels above an HU threshold (e.g. bone analog)."""
    return Volume((vol.data > hu_threshold).astype(np.float32), vol.spacing,
                  modality="MASK", unit="arbitrary")


@dataclass
class MetricsReport:
    mae_hu: float
    ssim: float
    psnr_db: float
    dice: dict = field(default_factory=dict)
    mask_voxels: int = 0
    total_voxels: int = 0
    mask_id: str = "body"
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mae_hu": self.mae_hu,
            "ssim": self.ssim,
            "psnr_db": self.psnr_db,
            "dice": dict(sorted(self.dice.items())),
            "mask_voxels": self.mask_voxels,
            "total_voxels": self.total_voxels,
            "mask_id": self.mask_id,
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(pred_ct, ref_ct, body, structure_masks=None, data_range=HU_SPAN,
             mask_id="body"):
    """Full metric protocol on HU volumes.

    ``structure_masks`` maps a structure name to a (mask from prediction,
    mask from reference) pair; segmentation itself is out of scope here, the
    masks are supplied externally (thresholds, tools, hand contours).
    """
    report = MetricsReport(
        mae_hu=mae(pred_ct, ref_ct, body),
        ssim=ssim(pred_ct, ref_ct, body, data_range=data_range,
                  **{k: SSIM_DEFAULTS[k] for k in ("window", "k1", "k2")}),
        psnr_db=psnr(pred_ct, ref_ct, body, data_range=data_range),
        mask_voxels=int(_as_bool_mask(body).sum()),
        total_voxels=body.voxel_count(),
        mask_id=mask_id,
        config={"ssim": dict(SSIM_DEFAULTS, variance="population",
                             support="full-window centers"),
                "data_range": data_range,
                "psnr_cap_db": PSNR_CAP_DB,
                "empty_dice": 1.0},
    )
    for name, (mp, mr) in (structure_masks or {}).items():
        report.dice[name] = dice(mp, mr)
    return report
