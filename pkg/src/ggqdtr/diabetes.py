"""Type-2-diabetes cohort simulator and policy rollout engine.

One subject evolves over quarterly decision points.  The state is
(NAT, D, A1c, BP, Weight): number of augmented treatments, discontinuation
flag, and three continuous labs.  Actions: 0 = continue, k in 1..4 = augment
treatment k (metformin, sulfonylurea, glitazone, insulin); treatment k is
feasible exactly when NAT = k-1, and nothing can be augmented past NAT = 4.

Dynamics per decision (s_t, a_t) -> s_{t+1}:

* death first: Bernoulli with logit c0 + c1 I(A1c_t > 7) A1c_t^2 + c2 NAT_t;
  a death transition earns the death reward and absorbs the trajectory;
* discontinuation next: D_{t+1} ~ Bernoulli(rate(a_t)) when a_t augments,
  else 0 -- a discontinued augmentation never delivers its effect;
* the latent A1c mean drops by factor (1 - tau(a_t)) when A1c_t > 7,
  NAT_t < 4, a_t augments and the treatment sticks;
* labs follow the variance-stabilized autoregression
  x_{t+1} = (x_t - mean_t + eps) / sqrt(1 + sigma^2) + mean_{t+1}
  (BP and Weight use a zero latent mean, i.e. pure noise channels);
* reward: main rule +1 if A1c_{t+1} < 7, -2 if A1c_{t+1} > 7 with
  D_{t+1} = 1, -10 on death, else 0; the alternative "s4" rule replaces
  -2 by -5 and pays 0 on death (it is meant for no-death runs).

The observed behavior policy continues below A1c 7, augments at or above 8
while possible, and in between continues with probability
expit(-0.2 A1c + 0.5 NAT + 0.5 D).

Each subject consumes an independent named random stream derived from
(seed, subject index), so enlarging a cohort never perturbs existing
subjects' draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .mdp import (
    ABSORBING,
    ACTION_NONE,
    ConfigurationError,
    Dataset,
    DIABETES_SCHEMA,
    DomainError,
    State,
    Trajectory,
    Transition,
)

__all__ = ["SimParams", "simulate_cohort", "simulate_cohort_arrays",
           "rollout_policy", "default_rollout_horizon"]

REWARD_RULES = ("main", "s4")


@dataclass(frozen=True)
class SimParams:
    """Constants of the generative law; defaults reproduce the reference
    cohort (20 quarterly decisions, first 4 dropped as burn-in)."""

    n: int = 2000
    horizon: int = 20
    burn_in: int = 4
    seed: int = 0
    baseline_mean: tuple[float, float, float] = (13.0, 160.0, 9.4)  # BP, Weight, A1c
    treatment_effects: tuple[float, float, float, float] = (0.14, 0.20, 0.02, 0.14)
    discontinuation: tuple[float, float, float, float] = (0.20, 0.20, 0.20, 0.35)
    sigma_eps: float = 0.5
    assign_coefs: tuple[float, float, float] = (-0.2, 0.5, 0.5)  # on A1c, NAT, D
    death_coefs: tuple[float, float, float] = (-10.0, 0.08, 0.5)  # const, A1c^2 gate, NAT
    reward_rule: str = "main"

    def __post_init__(self):
        if self.n < 0:
            raise ConfigurationError("n must be nonnegative")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if not 0 <= self.burn_in < self.horizon:
            raise ConfigurationError("burn_in must lie in [0, horizon)")
        if self.sigma_eps <= 0:
            raise ConfigurationError("sigma_eps must be positive")
        for name, vals in (("treatment_effects", self.treatment_effects),
                           ("discontinuation", self.discontinuation)):
            if len(vals) != 4:
                raise ConfigurationError(f"{name} needs one entry per treatment")
        if any(not 0 <= p <= 1 for p in self.discontinuation):
            raise ConfigurationError("discontinuation rates must lie in [0, 1]")
        if any(not 0 <= t < 1 for t in self.treatment_effects):
            raise ConfigurationError("treatment effects must lie in [0, 1)")
        if self.reward_rule not in REWARD_RULES:
            raise ConfigurationError(
                f"unknown reward rule {self.reward_rule!r}; choose from {REWARD_RULES}"
            )


def _rewards(rule: str, a1c_next, d_next, dies):
    """Vectorized reward; death is evaluated first."""
    r = np.zeros(a1c_next.shape)
    if rule == "main":
        r = np.where(a1c_next < 7.0, 1.0, r)
        r = np.where((a1c_next > 7.0) & d_next, -2.0, r)
        r = np.where(dies, -10.0, r)
    else:  # "s4": no death penalty, steeper discontinuation penalty
        r = np.where(a1c_next < 7.0, 1.0, r)
        r = np.where((a1c_next > 7.0) & d_next, -5.0, r)
        r = np.where(dies, 0.0, r)
    return r


def _advance(params: SimParams, nat, d, a1c, bp, weight, mu, action, u_disc, u_death, eps):
    """One dynamics step for arrays of live subjects.

    Returns (nat', d', a1c', bp', weight', mu', dies, reward).  Rows with
    dies=True keep placeholder components; callers must absorb them.
    """
    c0, c1, c2 = params.death_coefs
    p_death = expit(c0 + c1 * (a1c > 7.0) * a1c ** 2 + c2 * nat)
    dies = u_death < p_death

    rates = np.concatenate(([0.0], params.discontinuation))
    taus = np.concatenate(([0.0], params.treatment_effects))
    augmenting = action > 0
    d_next = augmenting & (u_disc < rates[action])

    effective = (a1c > 7.0) & (nat < 4) & augmenting & ~d_next
    mu_next = np.where(effective, mu * (1.0 - taus[action]), mu)

    shrink = math.sqrt(1.0 + params.sigma_eps ** 2)
    a1c_next = (a1c - mu + eps[:, 0]) / shrink + mu_next
    bp_next = (bp + eps[:, 1]) / shrink
    weight_next = (weight + eps[:, 2]) / shrink
    nat_next = nat + augmenting.astype(int)

    reward = _rewards(params.reward_rule, a1c_next, d_next.astype(bool), dies)
    return nat_next, d_next.astype(int), a1c_next, bp_next, weight_next, mu_next, dies, reward


def _behavior_actions(params: SimParams, nat, d, a1c, u_z):
    """The observed assignment rule, vectorized; also returns the indicator
    of the probabilistic middle branch and of 'continue' within it."""
    b_a1c, b_nat, b_d = params.assign_coefs
    can = nat < 4
    a = np.zeros(nat.shape, dtype=int)
    hi = can & (a1c >= 8.0)
    mid = can & (a1c > 7.0) & (a1c < 8.0)
    p_continue = expit(b_a1c * a1c + b_nat * nat + b_d * d)
    z_continue = u_z < p_continue
    a[hi] = nat[hi] + 1
    take = mid & ~z_continue
    a[take] = nat[take] + 1
    return a, mid, mid & z_continue


def simulate_cohort_arrays(params: SimParams) -> dict:
    """Simulate the full cohort and return raw arrays (before burn-in).

    Keys: states (n, T+1, 5), mu (n, T+1), actions (n, T), rewards (n, T),
    alive (n, T+1), z_branch (n, T), z_continue (n, T).  actions hold the
    no-action sentinel on absorbed rows.
    """
    n, T = params.n, params.horizon
    bp0_mean, w0_mean, a1c0_mean = params.baseline_mean

    base = np.empty((n, 3))
    u = np.empty((n, T, 3))
    eps = np.empty((n, T, 3))
    for i in range(n):
        rng = np.random.default_rng((params.seed, i))
        base[i] = rng.normal(size=3)
        u[i] = rng.uniform(size=(T, 3))
        eps[i] = rng.normal(scale=params.sigma_eps, size=(T, 3))

    states = np.zeros((n, T + 1, 5))
    mu = np.zeros((n, T + 1))
    actions = np.full((n, T), ACTION_NONE, dtype=int)
    rewards = np.zeros((n, T))
    alive = np.zeros((n, T + 1), dtype=bool)
    z_branch = np.zeros((n, T), dtype=bool)
    z_continue = np.zeros((n, T), dtype=bool)

    states[:, 0, 2] = a1c0_mean + base[:, 2]
    states[:, 0, 3] = bp0_mean + base[:, 0]
    states[:, 0, 4] = w0_mean + base[:, 1]
    mu[:, 0] = a1c0_mean
    alive[:, 0] = True

    for t in range(T):
        live = alive[:, t]
        if not live.any():
            break
        nat = states[live, t, 0].astype(int)
        d = states[live, t, 1].astype(int)
        a1c = states[live, t, 2]
        bp = states[live, t, 3]
        w = states[live, t, 4]

        a, mid, cont = _behavior_actions(params, nat, d, a1c, u[live, t, 0])
        actions[live, t] = a
        z_branch[live, t] = mid
        z_continue[live, t] = cont

        out = _advance(params, nat, d, a1c, bp, w, mu[live, t], a,
                       u[live, t, 1], u[live, t, 2], eps[live, t])
        nat2, d2, a1c2, bp2, w2, mu2, dies, r = out
        rewards[live, t] = r
        mu[live, t + 1] = mu2
        survives = live.copy()
        survives[live] = ~dies
        alive[:, t + 1] = survives
        idx = np.flatnonzero(live)[~dies]
        states[idx, t + 1, 0] = nat2[~dies]
        states[idx, t + 1, 1] = d2[~dies]
        states[idx, t + 1, 2] = a1c2[~dies]
        states[idx, t + 1, 3] = bp2[~dies]
        states[idx, t + 1, 4] = w2[~dies]

    return {
        "states": states, "mu": mu, "actions": actions, "rewards": rewards,
        "alive": alive, "z_branch": z_branch, "z_continue": z_continue,
    }


def simulate_cohort(params: SimParams) -> Dataset:
    """Simulate, drop the burn-in prefix, and package trajectories.

    Trajectories truncate at the death transition; a subject absorbed before
    the end of burn-in is kept as a single degenerate absorbing transition.
    """
    raw = simulate_cohort_arrays(params)
    return _package(params, raw)


def _package(params: SimParams, raw: dict) -> Dataset:
    T, burn = params.horizon, params.burn_in
    states, actions, rewards, alive = (
        raw["states"], raw["actions"], raw["rewards"], raw["alive"],
    )
    trajectories = []
    for i in range(params.n):
        sid = f"s{i:06d}"
        stop = T
        if not alive[i, T]:
            stop = int(np.argmin(alive[i]))  # first absorbed index
        if stop <= burn:
            transitions = (
                Transition(state=ABSORBING, action=ACTION_NONE, reward=0.0,
                           next_state=ABSORBING, t=0),
            )
        else:
            transitions = []
            for t in range(burn, stop):
                s = State(tuple(states[i, t]))
                nxt = State(tuple(states[i, t + 1])) if alive[i, t + 1] else ABSORBING
                transitions.append(Transition(
                    state=s, action=int(actions[i, t]),
                    reward=float(rewards[i, t]), next_state=nxt, t=t - burn,
                ))
            transitions = tuple(transitions)
        trajectories.append(Trajectory(subject_id=sid, transitions=transitions))
    return Dataset(trajectories=tuple(trajectories), schema=DIABETES_SCHEMA,
                   horizon=T - burn)


def default_rollout_horizon(gamma: float, tail: float = 1e-6) -> int:
    """Smallest H with gamma^H below the tail mass (20 when gamma = 0)."""
    if gamma <= 0.0:
        return 20
    return max(1, int(math.ceil(math.log(tail) / math.log(gamma))))


def rollout_policy(params: SimParams, policy, s0: State, gamma: float,
                   reps: int, seed: int, horizon: int | None = None,
                   mu0: float | None = None) -> np.ndarray:
    """Monte Carlo discounted returns of a policy started at one state.

    The assignment rule is replaced by the policy; discontinuation, lab and
    death laws are unchanged.  All reps share one random stream (common
    random numbers across policies evaluated with the same seed), and each
    step consumes a fixed block of draws so streams stay aligned whatever
    the actions are.

    Args:
        params: generative constants (reward rule included).
        policy: object with select_batch(nat, d, a1c, bp, weight) -> actions.
        s0: start state; an absorbing start returns all-zero returns.
        gamma: discount in [0, 1).
        reps: number of rollouts.
        seed: stream seed for this evaluation.
        horizon: steps to roll; default cuts the discount tail below 1e-6.
        mu0: latent A1c mean at the start; defaults to the start state's A1c
            (the stationary-deviation convention).
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
    if reps < 1:
        raise ConfigurationError("reps must be positive")
    if horizon is None:
        horizon = default_rollout_horizon(gamma)
    returns = np.zeros(reps)
    if s0.is_absorbing:
        return returns

    nat0, d0, a1c0, bp0, w0 = s0.components
    nat = np.full(reps, int(nat0))
    d = np.full(reps, int(d0))
    a1c = np.full(reps, float(a1c0))
    bp = np.full(reps, float(bp0))
    w = np.full(reps, float(w0))
    mu = np.full(reps, float(a1c0) if mu0 is None else float(mu0))
    live = np.ones(reps, dtype=bool)

    rng = np.random.default_rng((seed,))
    disc = 1.0
    for _ in range(horizon):
        u = rng.uniform(size=(reps, 2))
        eps = rng.normal(scale=params.sigma_eps, size=(reps, 3))
        if not live.any():
            break
        a = np.asarray(policy.select_batch(nat[live], d[live], a1c[live],
                                           bp[live], w[live]), dtype=int)
        feasible = (a == 0) | ((a == nat[live] + 1) & (nat[live] < 4))
        if not feasible.all():
            j = int(np.flatnonzero(~feasible)[0])
            rows = np.flatnonzero(live)
            raise DomainError(
                f"policy chose action {int(a[j])} at state "
                f"(nat={int(nat[rows[j]])}, d={int(d[rows[j]])}, "
                f"a1c={a1c[rows[j]]:.3f})"
            )
        out = _advance(params, nat[live], d[live], a1c[live], bp[live], w[live],
                       mu[live], a, u[live, 0], u[live, 1], eps[live])
        nat2, d2, a1c2, bp2, w2, mu2, dies, r = out
        returns[live] += disc * r
        rows = np.flatnonzero(live)
        dead_rows = rows[dies]
        keep = rows[~dies]
        live[dead_rows] = False
        nat[keep] = nat2[~dies]
        d[keep] = d2[~dies]
        a1c[keep] = a1c2[~dies]
        bp[keep] = bp2[~dies]
        w[keep] = w2[~dies]
        mu[keep] = mu2[~dies]
        disc *= gamma
    return returns
