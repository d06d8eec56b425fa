"""Reconstruction quality metrics and downstream diffusion-tensor fitting.

PSNR, windowed SSIM, Pearson correlation, per-voxel log-linear tensor
fits and the derived FA/MD/AD scalar maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .phantom import GradientTable


class MetricError(ValueError):
    pass


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical inputs."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.size == 0:
        raise MetricError("empty input")
    if peak <= 0:
        raise MetricError("peak must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity over 7x7 uniform windows of a 2D slice.

    Biased (population) covariance normalization; the border where windows
    leave the image is cropped before averaging.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise MetricError(f"ssim expects 2D slices, got {x.ndim}D")
    if min(x.shape) < SSIM_WINDOW:
        raise MetricError(f"image smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_x = uniform_filter(x, SSIM_WINDOW)
    mu_y = uniform_filter(y, SSIM_WINDOW)
    xx = uniform_filter(x * x, SSIM_WINDOW) - mu_x**2
    yy = uniform_filter(y * y, SSIM_WINDOW) - mu_y**2
    xy = uniform_filter(x * y, SSIM_WINDOW) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    smap = num / den
    pad = SSIM_WINDOW // 2
    return float(smap[pad:-pad, pad:-pad].mean())


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Sample correlation of the flattened inputs."""
    x = np.asarray(x, float).ravel()
    y = np.asarray(y, float).ravel()
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise MetricError("need at least two samples")
    xc = x - x.mean()
    yc = y - y.mean()
    vx, vy = float(xc @ xc), float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise MetricError("zero variance input")
    return float((xc @ yc) / math.sqrt(vx * vy))


# ---------------------------------------------------------------------------
# Diffusion tensor fitting
# ---------------------------------------------------------------------------

SIGNAL_FLOOR = 1e-6

# unique-component order of the symmetric tensor
TENSOR_COMPONENTS = ("dxx", "dyy", "dzz", "dxy", "dxz", "dyz")


@dataclass(frozen=True)
class DiffusionTensorField:
    """Per-voxel symmetric tensors, unique components (..., 6) in mm^2/s."""

    components: np.ndarray

    def __post_init__(self):
        if self.components.shape[-1] != 6:
            raise MetricError("tensor field needs 6 trailing components")

    def matrices(self) -> np.ndarray:
        c = self.components
        out = np.empty(c.shape[:-1] + (3, 3))
        out[..., 0, 0] = c[..., 0]
        out[..., 1, 1] = c[..., 1]
        out[..., 2, 2] = c[..., 2]
        out[..., 0, 1] = out[..., 1, 0] = c[..., 3]
        out[..., 0, 2] = out[..., 2, 0] = c[..., 4]
        out[..., 1, 2] = out[..., 2, 1] = c[..., 5]
        return out


def dti_design_matrix(table: GradientTable) -> np.ndarray:
    """Rows -b * (gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz) for b > 0 entries."""
    g = table.bvecs
    cols = np.stack(
        [g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
         2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2], 2 * g[:, 1] * g[:, 2]],
        axis=1,
    )
    return -table.bvals[:, None] * cols


def fit_dti(data: np.ndarray, table: GradientTable) -> DiffusionTensorField:
    """Per-voxel linear least squares on the log signal.

    data: (..., N) b0-normalized signal (the b0 reference is the implicit
    constant 1). Needs >= 6 non-collinear b > 0 directions; values are
    floored at 1e-6 before the log.
    """
    data = np.asarray(data, float)
    if data.shape[-1] != len(table):
        raise MetricError(
            f"data has {data.shape[-1]} directions, table {len(table)}"
        )
    dw = table.bvals > 0
    if dw.sum() < 6:
        raise MetricError("need at least 6 diffusion-weighted directions")
    design = dti_design_matrix(table)[dw]
    if np.linalg.matrix_rank(design) < 6:
        raise MetricError("rank-deficient direction scheme (collinear directions)")
    logs = np.log(np.maximum(data[..., dw], SIGNAL_FLOOR))
    pinv = np.linalg.pinv(design)
    comps = logs @ pinv.T
    return DiffusionTensorField(components=comps)


def dti_scalars(field: DiffusionTensorField) -> dict[str, np.ndarray]:
    """FA, MD, AD maps plus a negative-eigenvalue flag.

    Eigenvalues sorted descending; MD is their mean, AD the largest;
    FA = sqrt(3/2) |lambda - MD| / |lambda|, clamped to [0, 1].
    """
    mats = field.matrices()
    eigs = np.linalg.eigvalsh(mats)[..., ::-1]
    if not np.all(np.isfinite(eigs)):
        raise MetricError("non-finite eigenvalues in tensor field")
    md = eigs.mean(axis=-1)
    ad_ = eigs[..., 0]
    dev = eigs - md[..., None]
    num = np.linalg.norm(dev, axis=-1)
    den = np.linalg.norm(eigs, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(1.5) * num / den
    fa = np.clip(np.nan_to_num(fa, nan=0.0), 0.0, 1.0)
    return {"fa": fa, "md": md, "ad": ad_, "negative_eigenvalues": eigs[..., -1] < 0}


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Affine rescale to [0, 1] for report-level map comparisons."""
    values = np.asarray(values, float)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)
