"""Command-line driver: ``otassign {train,eval,snapshot,emd}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .assignment import RealSet, batch_assign, write_assignment_csv
from .config import ConfigError, build_dataset, build_train_config, load_config, set_value
from .costs import KINDS, CostSpec
from .evaluation import DiscreteMeasure, assignment_variance, emd, nearest_counts, w1_eval
from .net import DimensionError, load_checkpoint
from .trainer import LatentSampler, TrainingDiverged, train, write_metrics_csv

log = logging.getLogger("otassign")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _load_run_config(args):
    if not args.config:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = load_config(path)
    if getattr(args, "seed", None) is not None:
        set_value(cfg, "train.seed", args.seed)
    if getattr(args, "cost", None):
        set_value(cfg, "cost.kind", args.cost)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value.strip())
    return cfg


def _spec_from_meta(meta):
    return CostSpec(meta["kind"], meta["scale"], meta["image_shape"])


def _load_generator(path, dataset):
    nets, _, extra = load_checkpoint(path)
    gen = nets["generator"]
    if gen.output_dim != dataset.d:
        raise DimensionError(
            f"checkpoint generator emits dimension {gen.output_dim}, dataset has {dataset.d}"
        )
    means = extra["extra_arrays"]["latent_means"]
    return gen, nets.get("assigner"), means, extra


def _sampler_fn(gen, means, sigma, seed):
    sampler = LatentSampler(means, sigma, seed=seed)
    return lambda n: gen.forward(sampler.sample(n))


# ---------------------------------------------------------------- commands

def cmd_train(args):
    cfg = _load_run_config(args)
    dataset = build_dataset(cfg)
    config = build_train_config(cfg, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshots = out / "snapshots"

    def on_eval(state, record):
        log.info("step %d dual %.6g variance %.4g", record["step"], record["dual_estimate"],
                 record["assignment_variance"])
        if dataset.d == 2:
            snapshots.mkdir(exist_ok=True)
            xs = state.generate(64, rng=np.random.default_rng(config.seed))
            reals = RealSet(dataset.points, state.assigner.forward(dataset.points)[:, 0])
            batch = batch_assign(xs, reals, state.assigner_cost)
            write_scatter_svg(snapshots / f"step_{record['step']:06d}.svg", dataset.points, xs,
                              batch.indices)

    try:
        result = train(config, dataset, out_dir=out, callback=on_eval)
    except TrainingDiverged as exc:
        log.error("%s (last good checkpoint: %s)", exc, exc.last_checkpoint)
        return 1
    write_metrics_csv(out / "metrics.csv", result.log)
    print(f"trained {result.state.step} generator steps ({result.stopped}); "
          f"{len(result.checkpoints)} checkpoints in {out / 'checkpoints'}")
    return 0


def eval_report(checkpoint, dataset, k=10, seed=0):
    t0 = time.perf_counter()
    gen, _, means, extra = _load_generator(checkpoint, dataset)
    spec = _spec_from_meta(extra["cost"])
    sample = _sampler_fn(gen, means, extra["latent_sigma"], seed)
    w1 = w1_eval(sample, dataset.points, k)
    counts = nearest_counts(sample(k * dataset.m), dataset.points, spec)
    return {
        "checkpoint": str(checkpoint),
        "w1": w1,
        "assignment_variance": assignment_variance(counts, k),
        "k": k,
        "n_real": dataset.m,
        "n_generated": k * dataset.m,
        "cost": spec.kind,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def cmd_eval(args):
    cfg = _load_run_config(args)
    dataset = build_dataset(cfg)
    report = eval_report(args.checkpoint, dataset, k=args.k, seed=args.seed or 0)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n")
    return 0


def write_scatter_svg(path, reals, generated, indices, size=600):
    """Reals (grey), generated points (red) and one segment per assignment."""
    allpts = np.vstack([reals, generated])
    lo, hi = allpts.min(0), allpts.max(0)
    span = float(max(hi - lo)) or 1.0
    pad = 20

    def tx(p):
        q = (p - lo) / span * (size - 2 * pad) + pad
        return q[..., 0], size - q[..., 1]

    rx, ry = tx(reals)
    gx, gy = tx(generated)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             '<g stroke="#4a90d9" stroke-width="0.6" stroke-opacity="0.7">']
    for i, j in enumerate(indices):
        parts.append(f'<line x1="{gx[i]:.2f}" y1="{gy[i]:.2f}" x2="{rx[j]:.2f}" y2="{ry[j]:.2f}"/>')
    parts.append('</g><g fill="#999999">')
    parts.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.2"/>' for x, y in zip(rx, ry))
    parts.append('</g><g fill="#d62728">')
    parts.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.2"/>' for x, y in zip(gx, gy))
    parts.append("</g></svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def write_pgm(path, image):
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / float(maxval)


def tile_grid(images, shape, grid, gap=2):
    h, w = shape
    out = np.ones((grid * (h + gap) - gap, grid * (w + gap) - gap))
    for t, img in enumerate(images[: grid * grid]):
        r, c = divmod(t, grid)
        out[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = img.reshape(h, w)
    return out


def image_snapshot(out, samples, dataset, spec, grid=8):
    """Side-by-side grid: samples on the left, their closest reals under ``spec`` on the right."""
    n = grid * grid
    samples = samples[:n]
    closest = batch_assign(samples, RealSet(dataset.points), spec).indices
    left = tile_grid(samples, dataset.image_shape, grid)
    right = tile_grid(dataset.points[closest], dataset.image_shape, grid)
    sep = np.ones((left.shape[0], 3 * (dataset.image_shape[1] // 4 or 1)))
    write_pgm(out / "samples_closest_real.pgm", np.hstack([left, sep, right]))
    write_pgm(out / "samples.pgm", left)
    write_pgm(out / "closest_real.pgm", right)
    with open(out / "closest_real.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["tile", "real_index"])
        writer.writerows([t, int(j)] for t, j in enumerate(closest))
    return closest


def cmd_snapshot(args):
    cfg = _load_run_config(args)
    dataset = build_dataset(cfg)
    gen, assigner, means, extra = _load_generator(args.checkpoint, dataset)
    spec = _spec_from_meta(extra["cost"])
    asg_spec = _spec_from_meta(extra["assigner_cost"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sample = _sampler_fn(gen, means, extra["latent_sigma"], args.seed or 0)
    if dataset.d == 2:
        xs = sample(args.n)
        psi = assigner.forward(dataset.points)[:, 0]
        batch = batch_assign(xs, RealSet(dataset.points, psi), asg_spec)
        write_scatter_svg(out / "assignments.svg", dataset.points, xs, batch.indices)
        write_assignment_csv(out / "assignments.csv", batch, psi)
        print(f"wrote {out / 'assignments.svg'} with {len(xs)} assignment segments")
    elif dataset.image_shape is not None:
        image_snapshot(out, sample(args.grid * args.grid), dataset, spec, grid=args.grid)
        print(f"wrote {args.grid}x{args.grid} sample grid to {out}")
    else:
        raise UsageError(f"snapshots support 2-D points or images, not dimension {dataset.d}")
    return 0


def read_points_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise
                continue  # header line
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def cmd_emd(args):
    a = read_points_csv(args.file_a)
    b = read_points_csv(args.file_b)
    spec = CostSpec(args.cost)
    plan = emd(DiscreteMeasure.uniform(a), DiscreteMeasure.uniform(b), spec)
    print(repr(plan.cost_value))
    if args.plan:
        with open(args.plan, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["i", "j", "mass"])
            for i, j in zip(*np.nonzero(plan.coupling > 0)):
                writer.writerow([int(i), int(j), repr(float(plan.coupling[i, j]))])
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="otassign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="run")
        sp.add_argument("--cost", choices=KINDS, default=None, help="override cost.kind")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any dotted config key")

    t = sub.add_parser("train", help="train assigner and generator")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="exact W1 and assignment variance of a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=int, default=10, help="oversampling factor")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("snapshot", help="scatter plot (2-D) or sample grid (images)")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=64, help="generated points for 2-D snapshots")
    s.add_argument("--grid", type=int, default=8, help="grid side for image snapshots")
    s.set_defaults(func=cmd_snapshot)

    m = sub.add_parser("emd", help="exact transport cost between two CSV point sets")
    m.add_argument("file_a")
    m.add_argument("file_b")
    m.add_argument("--cost", choices=("euclidean", "squared_euclidean"), default="euclidean")
    m.add_argument("--plan", help="write the optimal plan as CSV")
    m.set_defaults(func=cmd_emd)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"otassign {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"otassign {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
