"""Dense array view of a dataset under a fixed feature map.

Every estimator in this package reduces to sums over transitions of
phi(s_t, a_t), rewards, and the candidate next-state features
phi(s_{t+1}, a') over the feasible a'.  Precomputing those once per
(dataset, feature map) pair makes the per-sweep work a handful of small
matrix products.

Candidate slots are ordered by ascending action code so that a first-match
argmax reproduces the deterministic lowest-code tie break.  Absorbing next
states get a single zero-feature slot, which makes their max term exactly
zero and their greedy feature vector the zero vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import ConfigurationError, Dataset


@dataclass(frozen=True)
class CompiledDataset:
    """Transition-level arrays plus trajectory boundaries."""

    n: int                     # number of trajectories
    dim: int                   # feature dimension
    phi: np.ndarray            # (N, p) features of (s_t, a_t); zero when absorbing
    rewards: np.ndarray        # (N,)
    next_phi: np.ndarray       # (N, A, p) candidate features of s_{t+1}
    next_mask: np.ndarray      # (N, A) feasibility of each candidate slot
    next_actions: np.ndarray   # (N, A) action codes per slot (-1 when unused)
    traj_start: np.ndarray     # (n,) first row of each trajectory
    traj_stop: np.ndarray      # (n,) one past the last row

    @property
    def rows(self) -> int:
        return self.phi.shape[0]

    def slice(self, i: int) -> slice:
        return slice(int(self.traj_start[i]), int(self.traj_stop[i]))


def compile_dataset(data: Dataset, fmap) -> CompiledDataset:
    """Evaluate the feature map over every transition of a dataset."""
    rows = []
    starts, stops = [], []
    count = 0
    for traj in data:
        starts.append(count)
        for tr in traj:
            rows.append(tr)
            count += 1
        stops.append(count)
    n = len(starts)
    if n == 0:
        raise ConfigurationError("dataset has no trajectories")
    p = fmap.dim

    cands = []
    max_a = 1
    for tr in rows:
        if tr.next_state.is_absorbing:
            cands.append(())
        else:
            acts = tuple(sorted(fmap.feasible_actions(tr.next_state)))
            cands.append(acts)
            max_a = max(max_a, len(acts))

    N = len(rows)
    phi = np.zeros((N, p))
    rewards = np.zeros(N)
    next_phi = np.zeros((N, max_a, p))
    next_mask = np.zeros((N, max_a), dtype=bool)
    next_actions = np.full((N, max_a), -1, dtype=int)

    batch = getattr(fmap, "features_batch", None)
    if batch is not None:
        _fill_batched(rows, cands, fmap, phi, rewards, next_phi, next_mask, next_actions)
    else:
        for i, tr in enumerate(rows):
            rewards[i] = tr.reward
            if not tr.state.is_absorbing:
                phi[i] = fmap.features(tr.state, tr.action)
            if cands[i]:
                for j, a in enumerate(cands[i]):
                    next_phi[i, j] = fmap.features(tr.next_state, a)
                    next_mask[i, j] = True
                    next_actions[i, j] = a
            else:
                next_mask[i, 0] = True  # zero-feature absorbing slot

    return CompiledDataset(
        n=n, dim=p, phi=phi, rewards=rewards,
        next_phi=next_phi, next_mask=next_mask, next_actions=next_actions,
        traj_start=np.asarray(starts), traj_stop=np.asarray(stops),
    )


def _fill_batched(rows, cands, fmap, phi, rewards, next_phi, next_mask, next_actions):
    """Vectorized fill for feature maps exposing features_batch
    (diabetes component order nat, d, a1c, bp, weight)."""
    N = len(rows)
    comp = np.zeros((N, 5))
    absorbing = np.zeros(N, dtype=bool)
    action = np.zeros(N, dtype=int)
    for i, tr in enumerate(rows):
        rewards[i] = tr.reward
        if tr.state.is_absorbing:
            absorbing[i] = True
        else:
            comp[i] = tr.state.components
            action[i] = tr.action
    phi[:] = fmap.features_batch(comp[:, 0], comp[:, 1], comp[:, 2], comp[:, 3],
                                 comp[:, 4], action, absorbing)

    flat_rows, flat_slot, flat_act = [], [], []
    ncomp = np.zeros((N, 5))
    for i, tr in enumerate(rows):
        if cands[i]:
            ncomp[i] = tr.next_state.components
            for j, a in enumerate(cands[i]):
                flat_rows.append(i)
                flat_slot.append(j)
                flat_act.append(a)
                next_mask[i, j] = True
                next_actions[i, j] = a
        else:
            next_mask[i, 0] = True
    if flat_rows:
        fr = np.asarray(flat_rows)
        feats = fmap.features_batch(
            ncomp[fr, 0], ncomp[fr, 1], ncomp[fr, 2], ncomp[fr, 3], ncomp[fr, 4],
            np.asarray(flat_act), np.zeros(len(fr), dtype=bool),
        )
        next_phi[fr, np.asarray(flat_slot)] = feats


def as_compiled(data, fmap) -> CompiledDataset:
    if isinstance(data, CompiledDataset):
        if data.dim != fmap.dim:
            raise ConfigurationError(
                f"compiled dimension {data.dim} != feature map dimension {fmap.dim}"
            )
        return data
    return compile_dataset(data, fmap)


def greedy_next(cd: CompiledDataset, theta: np.ndarray):
    """Per-transition max and argmax features of the next state under theta.

    Returns (qmax (N,), phi_star (N, p)); absorbing rows give 0 and zeros.
    """
    q = cd.next_phi @ theta                    # (N, A)
    q = np.where(cd.next_mask, q, -np.inf)
    best = np.argmax(q, axis=1)                # first max = lowest action code
    qmax = q[np.arange(cd.rows), best]
    phi_star = cd.next_phi[np.arange(cd.rows), best]
    return qmax, phi_star


def td_residuals(cd: CompiledDataset, theta: np.ndarray, gamma: float) -> np.ndarray:
    qmax, _ = greedy_next(cd, theta)
    return cd.rewards + gamma * qmax - cd.phi @ theta


def per_trajectory_moments(cd: CompiledDataset, values: np.ndarray) -> np.ndarray:
    """Sum values[t] * phi[t] within each trajectory -> (n, p)."""
    weighted = values[:, None] * cd.phi
    out = np.add.reduceat(weighted, cd.traj_start, axis=0)
    # reduceat needs strictly increasing indices; guard empty trajectories
    lengths = cd.traj_stop - cd.traj_start
    if np.any(lengths == 0):
        raise ConfigurationError("empty trajectory in compiled dataset")
    return out
