"""Transport costs c(x, y), their x-gradients, and diameter normalisation.

Points are flat vectors. The image costs (``ssim_cost``, ``psnr_cost``)
reshape them to ``image_shape`` with pixel values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

KINDS = ("euclidean", "squared_euclidean", "ssim_cost", "psnr_cost")
IMAGE_KINDS = ("ssim_cost", "psnr_cost")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# pairwise psnr matrices clamp MSE here so coincident points keep a finite,
# smallest-possible cost
PSNR_MSE_FLOOR = 1e-12

# above this dimension pairwise squared distances use the |x|^2+|y|^2-2xy expansion
_DIRECT_MAX_DIM = 32
_PAIR_CHUNK_ELEMS = 1 << 22


class SingularCostError(ArithmeticError):
    """The cost (or its gradient) is undefined at the given pair."""


@dataclass(frozen=True)
class CostSpec:
    kind: str = "squared_euclidean"
    scale: float = 1.0
    image_shape: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}; expected one of {KINDS}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"cost scale must be positive and finite, got {self.scale}")
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.kind in IMAGE_KINDS and self.image_shape is None:
            raise ValueError(f"{self.kind} needs image_shape")

    def with_scale(self, scale):
        return CostSpec(self.kind, float(scale), self.image_shape)


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def _check_image(spec, d):
    h, w = spec.image_shape
    if h * w != d:
        raise ValueError(f"points of dimension {d} do not match image_shape {spec.image_shape}")


# ---------------------------------------------------------------- SSIM core

@lru_cache(maxsize=None)
def _window_matrix(n, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Banded ``(n - size + 1, n)`` matrix applying the 1-D Gaussian window ('valid')."""
    size = min(size, n)
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    out = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        out[i, i:i + size] = g
    out.setflags(write=False)
    return out


def _filt(img, rows, cols):
    # img: (..., H, W); separable Gaussian window over all valid positions
    return rows @ img @ cols.T


def _filt_adjoint(m, rows, cols):
    return rows.T @ m @ cols


def _ssim_terms(x, y, shape):
    h, w = shape
    rows, cols = _window_matrix(h), _window_matrix(w)
    x = x.reshape(x.shape[:-1] + (h, w))
    y = y.reshape(y.shape[:-1] + (h, w))
    mx, my = _filt(x, rows, cols), _filt(y, rows, cols)
    sxx = _filt(x * x, rows, cols) - mx * mx
    syy = _filt(y * y, rows, cols) - my * my
    sxy = _filt(x * y, rows, cols) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return x, y, mx, my, a1, a2, b1, b2, rows, cols


def ssim(x, y, image_shape):
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, data range 1).

    Accepts single flat images or broadcastable stacks ``(..., H*W)``.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if image_shape[0] * image_shape[1] != x.shape[-1]:
        raise ValueError(f"points of dimension {x.shape[-1]} do not match image_shape {image_shape}")
    *_, a1, a2, b1, b2, _, _ = _ssim_terms(x, y, image_shape)
    smap = (a1 * a2) / (b1 * b2)
    return smap.mean(axis=(-2, -1))


def ssim_grad_x(x, y, image_shape):
    """Gradient of :func:`ssim` with respect to ``x`` (same broadcasting rules)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    xi, yi, mx, my, a1, a2, b1, b2, rows, cols = _ssim_terms(x, y, image_shape)
    s = (a1 * a2) / (b1 * b2)
    n_win = s.shape[-1] * s.shape[-2]
    # partials w.r.t. the filtered moments F(x), F(x^2), F(xy)
    d_m1 = (2 * my * a2 - 2 * my * a1) / (b1 * b2) - s * (2 * mx / b1 - 2 * mx / b2)
    d_m2 = -s / b2
    d_m3 = 2 * a1 / (b1 * b2)
    g = (_filt_adjoint(d_m1, rows, cols)
         + 2 * xi * _filt_adjoint(d_m2, rows, cols)
         + yi * _filt_adjoint(d_m3, rows, cols)) / n_win
    return g.reshape(g.shape[:-2] + (-1,))


# ---------------------------------------------------------------- scalar API

def _mse(x, y):
    return np.mean((x - y) ** 2, axis=-1)


def psnr_cost(x, y):
    """Negative PSNR for unit-range data: ``10*log10(MSE)``. Undefined when x == y."""
    x, y = _pair(x, y)
    mse = _mse(x, y)
    if np.any(mse == 0):
        raise SingularCostError("PSNR is infinite for identical images")
    return 10.0 * np.log10(mse)


def cost(spec, x, y):
    """c(x, y) for single points (or row-aligned stacks of points)."""
    x, y = _pair(x, y)
    if spec.kind in IMAGE_KINDS:
        _check_image(spec, x.shape[-1])
    if spec.kind == "squared_euclidean":
        base = np.sum((x - y) ** 2, axis=-1)
    elif spec.kind == "euclidean":
        base = np.sqrt(np.sum((x - y) ** 2, axis=-1))
    elif spec.kind == "ssim_cost":
        base = 1.0 - ssim(x, y, spec.image_shape)
    else:
        base = psnr_cost(x, y)
    out = spec.scale * base
    return float(out) if np.ndim(out) == 0 else out


def pair_costs(spec, x, y):
    """Row-aligned costs ``c(x_i, y_i)``; psnr uses the same MSE floor as :func:`cost_matrix`."""
    if spec.kind != "psnr_cost":
        return np.asarray(cost(spec, x, y), dtype=np.float64)
    x, y = _pair(x, y)
    _check_image(spec, x.shape[-1])
    return spec.scale * 10.0 * np.log10(np.maximum(_mse(x, y), PSNR_MSE_FLOOR))


def _grad_rows(spec, x, y):
    """Row-aligned gradients plus a mask of rows where the gradient is undefined."""
    x, y = _pair(x, y)
    if spec.kind in IMAGE_KINDS:
        _check_image(spec, x.shape[-1])
    diff = x - y
    if spec.kind == "squared_euclidean":
        return 2.0 * spec.scale * diff, np.zeros(x.shape[:-1], dtype=bool)
    if spec.kind == "ssim_cost":
        return -spec.scale * ssim_grad_x(x, y, spec.image_shape), np.zeros(x.shape[:-1], dtype=bool)
    sq = np.sum(diff ** 2, axis=-1)
    singular = sq == 0
    safe = np.where(singular, 1.0, sq)[..., None]
    if spec.kind == "euclidean":
        g = spec.scale * diff / np.sqrt(safe)
    else:
        # d/dx 10*log10(sq/d) = (10/ln10) * 2*diff/sq
        g = spec.scale * (10.0 / math.log(10.0)) * 2.0 * diff / safe
    g = np.where(singular[..., None], 0.0, g)
    return g, singular


def cost_grad_x(spec, x, y):
    """Gradient of c(., y) at x. Raises :class:`SingularCostError` where undefined."""
    g, singular = _grad_rows(spec, x, y)
    if np.any(singular):
        raise SingularCostError(f"{spec.kind} gradient is undefined at x == y")
    return g


def cost_grad_rows(spec, x, y):
    """Like :func:`cost_grad_x` but zeroes singular rows and returns their mask."""
    return _grad_rows(spec, x, y)


# ---------------------------------------------------------------- pairwise

def _sq_dist_matrix(x, y):
    n, d = x.shape
    m = y.shape[0]
    if d <= _DIRECT_MAX_DIM:
        out = np.empty((n, m))
        step = max(1, _PAIR_CHUNK_ELEMS // max(1, m * d))
        for s in range(0, n, step):
            diff = x[s:s + step, None, :] - y[None, :, :]
            out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
        return out
    out = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * (x @ y.T)
    np.maximum(out, 0.0, out=out)
    return out


def cost_matrix(spec, x, y):
    """Pairwise costs, shape ``(len(x), len(y))``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if spec.kind in IMAGE_KINDS:
        _check_image(spec, x.shape[1])
    if spec.kind == "squared_euclidean":
        return spec.scale * _sq_dist_matrix(x, y)
    if spec.kind == "euclidean":
        return spec.scale * np.sqrt(_sq_dist_matrix(x, y))
    if spec.kind == "psnr_cost":
        mse = _sq_dist_matrix(x, y) / x.shape[1]
        return spec.scale * 10.0 * np.log10(np.maximum(mse, PSNR_MSE_FLOOR))
    out = np.empty((x.shape[0], y.shape[0]))
    step = max(1, (1 << 16) // max(1, y.shape[0]))
    for s in range(0, x.shape[0], step):
        out[s:s + step] = 1.0 - ssim(x[s:s + step, None, :], y[None, :, :], spec.image_shape)
    return spec.scale * out


# ---------------------------------------------------------------- scaling

def unit_diameter_scale(spec, lower, upper, dim=None):
    """Scale making the largest cost over the box ``[lower, upper]`` equal to one.

    ``lower``/``upper`` are per-coordinate bounds; scalars are broadcast to
    ``dim`` coordinates (or to the image size when the spec has one). For
    ``ssim_cost`` the bound 1 - SSIM <= 2 is used; ``psnr_cost`` has no
    finite diameter in this sense and keeps scale 1.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
    upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("domain must be bounded")
    if np.any(upper < lower):
        raise ValueError("upper bound below lower bound")
    if spec.kind == "psnr_cost":
        return 1.0
    if spec.kind == "ssim_cost":
        return 0.5
    if dim is None and spec.image_shape is not None:
        dim = spec.image_shape[0] * spec.image_shape[1]
    if dim is not None:
        lower = np.broadcast_to(lower, (dim,))
        upper = np.broadcast_to(upper, (dim,))
    lower, upper = np.broadcast_arrays(lower, upper)
    diam_sq = float(np.sum((upper - lower) ** 2))
    if diam_sq == 0:
        raise ValueError("degenerate domain has zero diameter")
    return 1.0 / diam_sq if spec.kind == "squared_euclidean" else 1.0 / math.sqrt(diam_sq)
