"""Small shared instances for the unit and acceptance tests."""
import numpy as np

from otassign.assignment import RealSet, batch_assign, dual_estimate, psi_values
from otassign.data import Dataset
from otassign.net import DenseNet, Layer
from otassign.trainer import LatentSampler, TrainConfig, assigner_step, init_state


def frozen_line_toy(steps, hidden=(64, 64), m=64, seed=0, n_eval=20000):
    """Assigner-only run with reals {0, 1} and the generator frozen at N(0.3, 0.2^2).

    Returns the fixed evaluation sample, the dual estimate before each step
    and after the last one, and the standard error of each estimate.
    """
    ds = Dataset(np.array([[0.0], [1.0]]))
    st = init_state(TrainConfig(latent_dim=1, latent_components=1, m=m, hidden=hidden, seed=seed), ds)
    st.generator = DenseNet([Layer(np.eye(1), np.zeros(1))])
    st.sampler = LatentSampler([[0.3]], 0.2, seed=seed + 1)
    xs = st.sampler.sample(n_eval, rng=np.random.default_rng(seed + 5))
    vals, errs = [], []
    for t in range(steps + 1):
        psi = psi_values(st.assigner, ds.points)
        batch = batch_assign(xs, RealSet(ds.points, psi), st.cost)
        vals.append(dual_estimate(xs, st.reals, st.cost, st.assigner).value)
        errs.append(batch.values.std() / np.sqrt(len(xs)))
        if t < steps:
            assigner_step(st)
    return xs, np.array(vals), np.array(errs)
