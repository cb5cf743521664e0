"""c-transform assignment of generated points to real points.

For generated points ``x_i`` and real points ``y_j`` with potential values
``psi_j`` the assignment is ``argmin_j c(x_i, y_j) + psi_j`` and the attained
minimum is the c-transform of psi restricted to the real support. The
counts of that assignment drive the assigner update.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .costs import cost, cost_matrix
from .net import DenseNet, DimensionError

DEFAULT_CHUNK = 256


class StaleCacheError(RuntimeError):
    """The psi cache does not match the current assigner weights."""


@dataclass
class RealSet:
    points: np.ndarray
    psi_cache: np.ndarray = None
    # assigner version the cache reflects; -1 means "never refreshed"
    cache_version: int = -1

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[0] < 1:
            raise ValueError("a RealSet needs at least one point")
        if self.psi_cache is None:
            self.psi_cache = np.zeros(len(self.points))
        else:
            self.psi_cache = np.asarray(self.psi_cache, dtype=np.float64)
        if self.psi_cache.shape != (len(self.points),):
            raise DimensionError("psi_cache length must equal the number of points")

    @property
    def m(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @classmethod
    def with_potential(cls, points, psi):
        """RealSet with fixed potential values (no assigner attached)."""
        return cls(points, np.array(psi, dtype=np.float64, copy=True))


@dataclass
class AssignmentBatch:
    indices: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    cache_version: int = -1

    @property
    def n(self):
        return int(self.indices.shape[0])

    @property
    def m(self):
        return int(self.counts.shape[0])


@dataclass
class DualEstimate:
    value: float
    n_samples: int


def psi_values(assigner, points):
    """Potential at ``points``: a DenseNet is evaluated, an array is taken as given."""
    if isinstance(assigner, DenseNet):
        if assigner.input_dim != points.shape[1]:
            raise DimensionError(
                f"assigner expects dimension {assigner.input_dim}, points have {points.shape[1]}"
            )
        return assigner.forward(points)[:, 0]
    psi = np.asarray(assigner, dtype=np.float64)
    if psi.shape != (points.shape[0],):
        raise DimensionError(f"expected {points.shape[0]} potential values, got {psi.shape}")
    return psi


def refresh_psi_cache(assigner, reals, trace=None):
    """New RealSet whose cache holds the assigner's values at every real point.

    Pass a ``trace`` from ``assigner.trace(reals.points)`` to reuse a forward
    pass that is needed for the gradient anyway.
    """
    if assigner.output_dim != 1:
        raise DimensionError("the assigner must have a scalar output")
    if trace is not None:
        psi = np.array(trace[2][-1][:, 0], dtype=np.float64)
    else:
        psi = psi_values(assigner, reals.points)
    return RealSet(reals.points, psi, cache_version=assigner.version)


def c_transform_assign(x, reals, spec):
    """Best real for one point: ``(index, min_j c(x, y_j) + psi_j)``; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    batch = batch_assign(x, reals, spec)
    return int(batch.indices[0]), float(batch.values[0])


def _assign_chunk(xs, reals, spec):
    scores = cost_matrix(spec, xs, reals.points)
    scores += reals.psi_cache[None, :]
    idx = np.argmin(scores, axis=1)
    # recompute the winning cost directly so coincident points give exact zeros
    if spec.kind == "psnr_cost":
        # psnr is singular at coincident points; keep the floored matrix value
        vals = scores[np.arange(len(idx)), idx] - reals.psi_cache[idx]
    else:
        vals = np.asarray(cost(spec, xs, reals.points[idx]), dtype=np.float64)
    return idx, vals + reals.psi_cache[idx]


def batch_assign(xs, reals, spec, chunk_size=DEFAULT_CHUNK, workers=1):
    """Assign every row of ``xs``; chunks may run on a thread pool without changing the result."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs.reshape(0 if xs.size == 0 else 1, -1)
    if reals.m == 0:
        raise ValueError("empty RealSet")
    n = xs.shape[0]
    if n == 0:
        return AssignmentBatch(np.zeros(0, dtype=np.int64), np.zeros(0),
                               np.zeros(reals.m, dtype=np.int64), reals.cache_version)
    if xs.shape[1] != reals.dim:
        raise DimensionError(f"generated points have dimension {xs.shape[1]}, reals {reals.dim}")
    starts = list(range(0, n, chunk_size))
    chunks = [xs[s:s + chunk_size] for s in starts]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _assign_chunk(c, reals, spec), chunks))
    else:
        parts = [_assign_chunk(c, reals, spec) for c in chunks]
    indices = np.concatenate([p[0] for p in parts]).astype(np.int64)
    values = np.concatenate([p[1] for p in parts])
    counts = np.bincount(indices, minlength=reals.m).astype(np.int64)
    return AssignmentBatch(indices, values, counts, reals.cache_version)


def _coefficients(counts, n):
    m = counts.shape[0]
    return counts / n - 1.0 / m


def assigner_loss(batch, psi_at_reals):
    """Negated assignment cost; minimising it ascends the empirical dual."""
    if batch.n == 0:
        raise ValueError("assigner loss needs at least one generated point")
    psi = np.asarray(psi_at_reals, dtype=np.float64)
    if psi.shape != batch.counts.shape:
        raise DimensionError("psi values and counts cover different real sets")
    return -float(np.dot(_coefficients(batch.counts, batch.n), psi))


def assigner_gradient(batch, assigner, reals, trace=None):
    """Parameter gradient of :func:`assigner_loss` with the assignment held fixed.

    Equals ``sum_j (1/M - counts_j/N) * d psi(y_j)/dw``. When every real has
    the same count the coefficients vanish and the result is exactly zero.
    """
    if reals.cache_version != assigner.version or batch.cache_version != assigner.version:
        raise StaleCacheError(
            f"cache version {reals.cache_version}/batch {batch.cache_version} "
            f"but assigner is at {assigner.version}"
        )
    if batch.n == 0:
        raise ValueError("assigner gradient needs at least one generated point")
    m = reals.m
    balanced = batch.counts * m == batch.n
    if np.all(balanced):
        return [np.zeros_like(p) for p in assigner.parameters()]
    upstream = -_coefficients(batch.counts, batch.n)
    upstream[balanced] = 0.0
    return assigner.backward_params(reals.points, upstream[:, None].astype(assigner.dtype),
                                    trace=trace)


def dual_estimate(xs, reals, spec, assigner):
    """Monte-Carlo value of ``mean_i psi^c(x_i) - mean_j psi(y_j)``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[0] == 0:
        raise ValueError("dual estimate needs generated points")
    psi = psi_values(assigner, reals.points)
    local = RealSet(reals.points, psi)
    batch = batch_assign(xs, local, spec)
    return DualEstimate(float(batch.values.mean() - psi.mean()), xs.shape[0])


def _score_matrix(xs, reals, spec, psi):
    return cost_matrix(spec, xs, reals.points) + psi[None, :]


@dataclass
class OptimalityReport:
    optimal: bool
    unique: bool
    balanced: bool
    min_gap: float
    max_count_deviation: float
    indices: np.ndarray
    counts: np.ndarray
    # induced map (generated index -> real index) when optimal, otherwise a failing generated index
    witness: object = field(default=None)


def optimality_check(xs, reals, spec, assigner, tol=1e-9, count_tol=None):
    """Check uniqueness of every minimiser and uniformity of the pushforward.

    ``count_tol`` defaults to ``floor(0.05 * N / M)``, i.e. exact balance
    whenever fewer than twenty points per real are available.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n, m = xs.shape[0], reals.m
    psi = psi_values(assigner, reals.points)
    scores = _score_matrix(xs, reals, spec, psi)
    idx = np.argmin(scores, axis=1)
    if m > 1:
        part = np.partition(scores, 1, axis=1)
        gaps = part[:, 1] - part[:, 0]
    else:
        gaps = np.full(n, np.inf)
    counts = np.bincount(idx, minlength=m)
    if count_tol is None:
        count_tol = math.floor(0.05 * n / m)
    deviation = np.abs(counts - n / m)
    unique = bool(np.all(gaps > tol))
    balanced = bool(np.all(deviation <= count_tol))
    optimal = unique and balanced
    if optimal:
        witness = idx.copy()
    elif not unique:
        witness = int(np.argmin(gaps))
    else:
        witness = int(np.argmax(deviation))
    return OptimalityReport(optimal, unique, balanced, float(gaps.min()), float(deviation.max()),
                            idx, counts, witness)


def assignment_margins(xs, reals, spec, assigner):
    """Per-point gap between the best and second-best value of ``c + psi``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    psi = psi_values(assigner, reals.points)
    scores = _score_matrix(xs, reals, spec, psi)
    if reals.m == 1:
        return np.full(xs.shape[0], np.inf)
    part = np.partition(scores, 1, axis=1)
    return part[:, 1] - part[:, 0]


def perturbed(net, delta, rng):
    out = net.copy()
    for p in out.parameters():
        p += rng.uniform(-delta, delta, size=p.shape)
    return out


def stability_check(xs, reals, spec, assigner, delta, rng=None):
    """True when a uniform [-delta, delta] jitter of every weight leaves all assignments unchanged."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    rng = np.random.default_rng(rng)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    base = batch_assign(xs, RealSet(reals.points, psi_values(assigner, reals.points)), spec)
    if delta == 0:
        return True
    moved = perturbed(assigner, delta, rng)
    other = batch_assign(xs, RealSet(reals.points, psi_values(moved, reals.points)), spec)
    return bool(np.array_equal(base.indices, other.indices))


def write_assignment_csv(path, batch, psi_at_reals):
    """One row per generated point: id, real index, cost value, psi value."""
    psi = np.asarray(psi_at_reals, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["generated_id", "real_index", "cost", "psi"])
        for i, (j, v) in enumerate(zip(batch.indices, batch.values)):
            writer.writerow([i, int(j), repr(float(v - psi[j])), repr(float(psi[j]))])
