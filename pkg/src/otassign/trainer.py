"""Alternating assigner / generator training.

Each outer iteration runs ``n_critic`` assigner updates, each on a fresh
batch of ``m`` generated points, then one generator update that pulls the
points of the last batch towards the reals they were assigned to.
"""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .assignment import (RealSet, assigner_gradient, assigner_loss, batch_assign,
                         dual_estimate, refresh_psi_cache)
from .costs import CostSpec, cost_grad_rows, pair_costs, unit_diameter_scale
from .evaluation import assignment_variance, nearest_counts, w1_eval
from .net import DenseNet, RMSProp, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "dual_estimate", "assigner_loss", "generator_loss",
                  "assignment_variance", "wall_ms"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    lr: float = 5e-5
    m: int = 64
    n_critic: int = 5
    latent_dim: int = 100
    latent_components: int = 10
    latent_sigma: float = 0.1
    max_steps: int = 1000
    eval_every: int = 100
    # model cost: used for the generator's cost-tilde and for evaluation
    cost: CostSpec = field(default_factory=lambda: CostSpec("squared_euclidean"))
    # cheaper stand-in for the assigner; defaults to ``cost``
    assigner_cost: CostSpec | None = None
    auto_scale: bool = False
    hidden: tuple = (512, 512)
    generator_head: str = "identity"
    seed: int = 0
    fresh_reassign: bool = False
    eval_k: int = 10
    eval_samples: int = 0  # 0 -> m
    w1_every: int = 0  # 0 disables exact W1 in the metric log
    w1_k: int = 10
    patience: int = 50
    min_improvement: float = 1e-6
    chunk_size: int = 256
    workers: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.m < 1 or self.n_critic < 1 or self.latent_dim < 1:
            raise ValueError("m, n_critic and latent_dim must be at least 1")
        if self.latent_components < 1 or not self.latent_sigma >= 0:
            raise ValueError("latent mixture needs >= 1 component and sigma >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")

    @property
    def assigner_spec(self):
        return self.assigner_cost or self.cost


class LatentSampler:
    """Uniform mixture of isotropic Gaussians with a shared (small) sigma."""

    def __init__(self, means, sigma, seed=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = float(sigma)
        self.rng = np.random.default_rng(seed)

    @classmethod
    def random(cls, latent_dim, k, sigma, rng):
        rng = np.random.default_rng(rng)
        means = rng.uniform(-1.0, 1.0, size=(k, latent_dim))
        return cls(means, sigma, seed=rng.integers(2 ** 63))

    @property
    def latent_dim(self):
        return self.means.shape[1]

    def sample(self, n, rng=None):
        rng = self.rng if rng is None else rng
        comp = rng.integers(self.means.shape[0], size=n)
        return self.means[comp] + self.sigma * rng.standard_normal((n, self.latent_dim))


def sample_latent(sampler, n):
    if n < 1:
        raise ValueError("n must be at least 1")
    return sampler.sample(n)


@dataclass
class TrainState:
    config: TrainConfig
    reals: RealSet
    generator: DenseNet
    assigner: DenseNet
    gen_opt: RMSProp
    asg_opt: RMSProp
    sampler: LatentSampler
    eval_rng: np.random.Generator
    cost: CostSpec
    assigner_cost: CostSpec
    step: int = 0
    assigner_steps: int = 0
    last_z: np.ndarray = None
    last_x: np.ndarray = None
    last_batch: object = None
    assigner_loss: float = float("nan")
    generator_loss: float = float("nan")
    singular_terms: int = 0

    def generate(self, n, rng=None):
        return self.generator.forward(self.sampler.sample(n, rng=rng))


def resolve_costs(config, dataset):
    cost, asg = config.cost, config.assigner_spec
    if config.auto_scale:
        lo, hi = dataset.bounds()
        cost = cost.with_scale(unit_diameter_scale(cost, lo, hi))
        asg = asg.with_scale(unit_diameter_scale(asg, lo, hi))
    return cost, asg


def init_state(config, dataset):
    seq = np.random.SeedSequence(config.seed)
    g_seed, a_seed, latent_seed, eval_seed = seq.spawn(4)
    d = dataset.d
    sizes_g = [config.latent_dim, *config.hidden, d]
    sizes_a = [d, *config.hidden, 1]
    generator = DenseNet.create(sizes_g, output_activation=config.generator_head,
                                rng=np.random.default_rng(g_seed))
    assigner = DenseNet.create(sizes_a, output_activation="identity",
                               rng=np.random.default_rng(a_seed))
    sampler = LatentSampler.random(config.latent_dim, config.latent_components,
                                   config.latent_sigma, np.random.default_rng(latent_seed))
    cost, asg = resolve_costs(config, dataset)
    return TrainState(
        config=config,
        reals=RealSet(dataset.points),
        generator=generator,
        assigner=assigner,
        gen_opt=RMSProp(generator.parameters(), lr=config.lr),
        asg_opt=RMSProp(assigner.parameters(), lr=config.lr),
        sampler=sampler,
        eval_rng=np.random.default_rng(eval_seed),
        cost=cost,
        assigner_cost=asg,
    )


def _check_finite(value, what):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")


def assigner_step(state):
    cfg = state.config
    z = sample_latent(state.sampler, cfg.m)
    x = state.generator.forward(z)
    trace = state.assigner.trace(state.reals.points)
    state.reals = refresh_psi_cache(state.assigner, state.reals, trace=trace)
    batch = batch_assign(x, state.reals, state.assigner_cost, chunk_size=cfg.chunk_size,
                         workers=cfg.workers)
    loss = assigner_loss(batch, state.reals.psi_cache)
    _check_finite(loss, "assigner loss")
    grads = assigner_gradient(batch, state.assigner, state.reals, trace=trace)
    state.asg_opt.update(state.assigner, grads)
    state.last_z, state.last_x, state.last_batch = z, x, batch
    state.assigner_loss = loss
    state.assigner_steps += 1
    return state


def generator_loss_and_grad(generator, z, targets, spec):
    """Mean cost-tilde between G(z) and fixed targets, its theta-gradient, and the singular-row count."""
    x = generator.forward(z)
    n = x.shape[0]
    loss = float(np.mean(pair_costs(spec, x, targets)))
    gx, singular = cost_grad_rows(spec, x, targets)
    grads = generator.backward_params(z, gx / n)
    return loss, grads, int(singular.sum())


def generator_step(state):
    cfg = state.config
    if state.last_batch is None:
        raise RuntimeError("generator step needs a prior assigner step")
    batch = state.last_batch
    if cfg.fresh_reassign:
        state.reals = refresh_psi_cache(state.assigner, state.reals)
        batch = batch_assign(state.last_x, state.reals, state.assigner_cost,
                             chunk_size=cfg.chunk_size, workers=cfg.workers)
    targets = state.reals.points[batch.indices]
    loss, grads, singular = generator_loss_and_grad(state.generator, state.last_z, targets, state.cost)
    _check_finite(loss, "generator loss")
    if singular:
        log.debug("generator step %d: %d singular cost terms zeroed", state.step, singular)
    state.singular_terms += singular
    state.gen_opt.update(state.generator, grads)
    state.generator_loss = loss
    state.step += 1
    return state


def evaluate(state, dataset):
    """Metric record for the current networks; uses its own RNG stream."""
    cfg = state.config
    n_eval = cfg.eval_samples or cfg.m
    xs = state.generate(n_eval, rng=state.eval_rng)
    dual = dual_estimate(xs, state.reals, state.assigner_cost, state.assigner).value
    gen = state.generate(cfg.eval_k * dataset.m, rng=state.eval_rng)
    counts = nearest_counts(gen, dataset.points, state.cost)
    record = {
        "step": state.step,
        "dual_estimate": dual,
        "assigner_loss": state.assigner_loss,
        "generator_loss": state.generator_loss,
        "assignment_variance": assignment_variance(counts, cfg.eval_k),
    }
    if cfg.w1_every and state.step % cfg.w1_every == 0:
        record["w1"] = w1_eval(lambda n: state.generate(n, rng=state.eval_rng), dataset.points,
                               cfg.w1_k)
    return record


def checkpoint(state, path):
    extra = {
        "step": state.step,
        "assigner_steps": state.assigner_steps,
        "latent_sigma": state.sampler.sigma,
        "cost": {"kind": state.cost.kind, "scale": state.cost.scale,
                 "image_shape": state.cost.image_shape},
        "assigner_cost": {"kind": state.assigner_cost.kind, "scale": state.assigner_cost.scale,
                          "image_shape": state.assigner_cost.image_shape},
        "extra_arrays": {"latent_means": state.sampler.means},
    }
    save_checkpoint(path, {"generator": state.generator, "assigner": state.assigner},
                    {"generator": state.gen_opt, "assigner": state.asg_opt}, extra)


@dataclass
class TrainResult:
    generator: DenseNet
    assigner: DenseNet
    log: list
    state: TrainState
    stopped: str = "max_steps"
    checkpoints: list = field(default_factory=list)


def train(config, dataset, out_dir=None, callback=None):
    """Run the alternating loop for ``config.max_steps`` generator steps.

    Every ``eval_every`` steps a metric record is appended to the log and,
    when ``out_dir`` is given, a checkpoint is written. A non-finite loss
    restores the last good networks and raises :class:`TrainingDiverged`.
    """
    if dataset.m < 1:
        raise ValueError("empty dataset")
    state = init_state(config, dataset)
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    records, ckpts = [], []
    good = (state.generator.copy(), state.assigner.copy())
    last_ckpt = None
    t0 = time.perf_counter()
    stopped = "max_steps"
    while state.step < config.max_steps:
        try:
            for _ in range(config.n_critic):
                assigner_step(state)
            generator_step(state)
        except FloatingPointError as exc:
            state.generator, state.assigner = good[0].copy(), good[1].copy()
            raise TrainingDiverged(f"step {state.step}: {exc}", last_ckpt) from exc
        if state.step % config.eval_every == 0:
            rec = evaluate(state, dataset)
            rec["wall_ms"] = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else ""
            records.append(rec)
            good = (state.generator.copy(), state.assigner.copy())
            if ckpt_dir is not None:
                last_ckpt = ckpt_dir / f"step_{state.step:06d}.npz"
                checkpoint(state, last_ckpt)
                ckpts.append(last_ckpt)
            if callback is not None:
                callback(state, rec)
            if _converged(records, config):
                stopped = "converged"
                break
    return TrainResult(state.generator, state.assigner, records, state, stopped, ckpts)


def _converged(records, config):
    p = config.patience
    if p <= 0 or len(records) <= p:
        return False
    return records[-1]["dual_estimate"] - records[-1 - p]["dual_estimate"] < config.min_improvement


def _fmt(v):
    if v == "" or v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, records):
    columns = list(METRIC_COLUMNS)
    if any("w1" in r for r in records):
        columns.append("w1")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            writer.writerow([_fmt(r.get(c, "")) for c in columns])


def with_overrides(config, **kwargs):
    return replace(copy.deepcopy(config), **kwargs)
