"""Exact discrete optimal transport and the assignment-variance metric."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .assignment import RealSet, batch_assign
from .costs import CostSpec, cost_matrix

# POT probes every installed array backend on import; only numpy is used here
for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

DEFAULT_MAX_ENTRIES = 50_000_000  # cost-matrix entries; 5000 x 5000 needs 25e6
WEIGHT_TOL = 1e-12
CERT_TOL = 1e-9


class SolverError(RuntimeError):
    pass


@dataclass
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.points.shape[0],):
            raise ValueError("one weight per point is required")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")

    @classmethod
    def uniform(cls, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost_value: float
    # dual potentials certifying optimality: u_i + v_j <= C_ij
    u: np.ndarray = None
    v: np.ndarray = None


def certify(plan, cost_mat, a, b, tol=CERT_TOL):
    """Check marginals, dual feasibility, complementary slackness and a zero duality gap."""
    g, u, v = plan.coupling, plan.u, plan.v
    scale = max(1.0, float(np.abs(cost_mat).max()))
    if np.any(g < -tol):
        raise SolverError("negative mass in coupling")
    if np.abs(g.sum(1) - a).max() > tol or np.abs(g.sum(0) - b).max() > tol:
        raise SolverError("coupling marginals do not match the measures")
    slack = cost_mat - u[:, None] - v[None, :]
    if slack.min() < -tol * scale:
        raise SolverError(f"dual infeasible by {-slack.min():.3e}")
    support = g > tol
    if np.any(np.abs(slack[support]) > tol * scale):
        raise SolverError("complementary slackness violated")
    gap = plan.cost_value - (a @ u + b @ v)
    if abs(gap) > tol * scale:
        raise SolverError(f"duality gap {gap:.3e}")


def emd(mu, nu, spec=None, max_entries=DEFAULT_MAX_ENTRIES, check=True):
    """Exact optimal plan between two discrete measures (network simplex).

    The solve is certified by :func:`certify`; any failure raises
    :class:`SolverError`.
    """
    import ot

    spec = spec or CostSpec("euclidean")
    if mu.points.shape[1] != nu.points.shape[1]:
        raise ValueError("measures live in different dimensions")
    n, m = mu.points.shape[0], nu.points.shape[0]
    if n * m > max_entries:
        raise SolverError(f"problem {n}x{m} exceeds the solver budget of {max_entries} entries")
    c = cost_matrix(spec, mu.points, nu.points)
    a, b = mu.weights, nu.weights
    # renormalise against rounding so the network simplex sees balanced supplies
    g, log = ot.emd(a / a.sum(), b / b.sum(), c, numItermax=max(100_000, 50 * (n + m) ** 2),
                    log=True)
    if log.get("warning"):
        raise SolverError(f"network simplex did not finish: {log['warning']}")
    u = np.asarray(log["u"], dtype=np.float64)
    v = np.asarray(log["v"], dtype=np.float64)
    # POT's potentials satisfy u_i + v_j <= C_ij
    plan = TransportPlan(g, float(np.sum(g * c)), u, v)
    if check:
        certify(plan, c, a, b)
    return plan


def w1_eval(generated_sampler, dataset_points, oversample_k=10, spec=None):
    """Exact W1 between ``oversample_k * M`` generated samples and the M reals, uniform weights."""
    if oversample_k < 1:
        raise ValueError("oversample_k must be at least 1")
    reals = np.atleast_2d(np.asarray(dataset_points, dtype=np.float64))
    gen = np.atleast_2d(np.asarray(generated_sampler(oversample_k * reals.shape[0]), dtype=np.float64))
    spec = spec or CostSpec("euclidean")
    return emd(DiscreteMeasure.uniform(gen), DiscreteMeasure.uniform(reals), spec).cost_value


def assignment_variance(counts, k):
    """Mean absolute deviation of per-real counts from the ideal ``k``."""
    counts = np.asarray(counts)
    m = counts.shape[0]
    if m == 0 or counts.sum() != k * m:
        raise ValueError(f"counts sum to {counts.sum()}, expected k*M = {k * m}")
    return float(np.mean(np.sqrt((counts - k) ** 2)))


def nearest_counts(xs, dataset_points, spec):
    """Counts per real when each generated point goes to its closest real (zero potential)."""
    return batch_assign(xs, RealSet(dataset_points), spec).counts


def evaluate_assignment_variance(generated_sampler, dataset_points, spec, k=10):
    reals = np.atleast_2d(np.asarray(dataset_points, dtype=np.float64))
    xs = generated_sampler(k * reals.shape[0])
    return assignment_variance(nearest_counts(xs, reals, spec), k)
