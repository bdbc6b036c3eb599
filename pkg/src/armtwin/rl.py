"""Constrained PPO for joint packet scheduling and prediction horizons.

A two-branch categorical policy (per-joint schedule bit, per-joint
forecast index) is trained with clipped-surrogate updates switched by a
CVaR constraint on the discounted tracking cost: while the batch CVaR
sits under the configured bound the update ascends the reward surrogate,
otherwise it descends the cost surrogate. The CVaR threshold is tracked
by sub-gradient iterations on the batch's discounted cost-to-go samples.

Networks are the hand-rolled float64 MLPs from `nn`; rollouts are
single-instance and bit-deterministic for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, Dense, Sequential, Tanh, log_softmax, mlp, softmax

BRANCH_REWARD = "reward"
BRANCH_COST = "cost"


# --- configuration ------------------------------------------------------------


@dataclass
class TrainerConfig:
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    policy_lr: float = 3e-4
    value_lr: float = 3e-4
    cost_value_lr: float = 3e-4
    minibatch_size: int = 256
    epochs: int = 10
    reward_epochs: int | None = None     # epochs for reward-branch updates (None: same)
    cost_limit: float = 0.006            # bound is cost_limit / (1 - discount)
    total_steps: int = 300_000
    hidden: tuple[int, ...] = (128, 128)
    worst_fraction: float = 0.05         # CVaR tail mass (1 - confidence)
    cvar_step_size: float = 2e-3
    cvar_iterations: int = 500
    entropy_coef: float = 0.0
    schedule_bias_init: float = 2.0      # initial send-logit offset
    rollout_episodes: int = 1            # episodes collected per update batch
    stop_packet_ratio: float | None = 0.55
    stop_cvar_margin: float = 0.95
    stop_patience: int = 10
    min_episodes: int = 20

    def validate(self) -> None:
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0,1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0,1]")
        if self.clip_ratio <= 0.0:
            raise ValueError("clip_ratio must be > 0")
        if self.cost_limit <= 0.0:
            raise ValueError("cost_limit must be > 0")
        if not 0.0 < self.worst_fraction < 1.0:
            raise ValueError("worst_fraction must lie in (0,1)")
        if self.cvar_step_size <= 0.0 or self.cvar_iterations < 1:
            raise ValueError("cvar tracker needs step_size > 0 and iterations >= 1")
        if self.minibatch_size < 1 or self.epochs < 1:
            raise ValueError("minibatch_size and epochs must be >= 1")
        if self.reward_epochs is not None and self.reward_epochs < 1:
            raise ValueError("reward_epochs must be >= 1 when set")
        if self.rollout_episodes < 1:
            raise ValueError("rollout_episodes must be >= 1")


# --- policy -------------------------------------------------------------------


class TwoBranchPolicy:
    """Shared tanh trunk with a schedule head (2 logits per joint) and a
    horizon head (H logits per joint)."""

    def __init__(
        self,
        obs_dim: int,
        joint_count: int,
        horizon: int,
        hidden: tuple[int, ...] = (128, 128),
        rng: np.random.Generator | None = None,
        schedule_bias_init: float = 0.0,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.joint_count = joint_count
        self.horizon = horizon
        self.hidden = tuple(hidden)
        layers: list = []
        prev = obs_dim
        for width in hidden:
            layers.append(Dense(prev, width, rng))
            layers.append(Tanh())
            prev = width
        self.trunk = Sequential(layers)
        self.head_schedule = Dense(prev, 2 * joint_count, rng, scale=0.01)
        self.head_horizon = Dense(prev, horizon * joint_count, rng, scale=0.01)
        bias = self.head_schedule.bias.reshape(joint_count, 2)
        bias[:, 0] = schedule_bias_init
        bias[:, 1] = -schedule_bias_init

    # -- forward ---------------------------------------------------------------

    def forward(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched logits: (B, I, 2) schedule and (B, I, H) horizon."""
        obs = np.asarray(obs, dtype=float)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise ValueError(f"expected observations of width {self.obs_dim}")
        h = self.trunk.forward(obs)
        b = obs.shape[0]
        logits_s = self.head_schedule.forward(h).reshape(b, self.joint_count, 2)
        logits_z = self.head_horizon.forward(h).reshape(b, self.joint_count, self.horizon)
        return logits_s, logits_z

    def backward(self, grad_s: np.ndarray, grad_z: np.ndarray) -> None:
        b = grad_s.shape[0]
        gh = self.head_schedule.backward(grad_s.reshape(b, -1))
        gh = gh + self.head_horizon.backward(grad_z.reshape(b, -1))
        self.trunk.backward(gh)

    def distributions(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Column-stochastic action distributions for one observation.

        Returns (2, I) with row 0 = Pr{x_i=1}, and (H, I) with row h-1 =
        Pr{z_i=h}.
        """
        logits_s, logits_z = self.forward(np.asarray(obs, dtype=float)[None, :])
        rho1 = softmax(logits_s[0], axis=1).T
        rho2 = softmax(logits_z[0], axis=1).T
        return rho1, rho2

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        rho1, rho2 = self.distributions(obs)
        return sample_action(rho1, rho2, rng)

    def greedy(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mode of both distributions (ties break toward the lower index)."""
        rho1, rho2 = self.distributions(obs)
        x = (rho1[0] >= rho1[1]).astype(int)
        z = rho2.argmax(axis=0) + 1
        return x, z

    # -- parameters --------------------------------------------------------------

    def params(self) -> list[np.ndarray]:
        return self.trunk.params() + self.head_schedule.params() + self.head_horizon.params()

    def grads(self) -> list[np.ndarray]:
        return self.trunk.grads() + self.head_schedule.grads() + self.head_horizon.grads()

    def zero_grads(self) -> None:
        self.trunk.zero_grads()
        self.head_schedule.zero_grads()
        self.head_horizon.zero_grads()


def sample_action(rho1: np.ndarray, rho2: np.ndarray, rng: np.random.Generator):
    """Independent per-joint categorical draws from column-stochastic inputs.

    Returns (x bits, horizons 1..H, joint log-probability).
    """
    rho1 = np.asarray(rho1, dtype=float)
    rho2 = np.asarray(rho2, dtype=float)
    for rho in (rho1, rho2):
        sums = rho.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(rho < -1e-12):
            raise ValueError("action distributions must be column-stochastic")
    joints = rho1.shape[1]
    x = np.empty(joints, dtype=int)
    z = np.empty(joints, dtype=int)
    logp = 0.0
    u_sched = rng.random(joints)
    u_hor = rng.random(joints)
    horizon = rho2.shape[0]
    for i in range(joints):
        send = u_sched[i] < rho1[0, i]
        x[i] = 1 if send else 0
        logp += np.log(rho1[0, i] if send else rho1[1, i])
        cum = np.cumsum(rho2[:, i])
        idx = int(np.searchsorted(cum, u_hor[i], side="right"))
        idx = min(idx, horizon - 1)
        z[i] = idx + 1
        logp += np.log(rho2[idx, i])
    return x, z, float(logp)


# --- value heads ---------------------------------------------------------------


def value_head(obs_dim: int, hidden: tuple[int, ...], rng: np.random.Generator) -> Sequential:
    """Scalar feedforward estimator of a discounted return."""
    return mlp((obs_dim, *hidden, 1), rng, head_scale=0.01)


# --- rollout storage -----------------------------------------------------------


class RolloutBuffer:
    """Per-step records of one on-policy batch."""

    def __init__(self):
        self.obs: list[np.ndarray] = []
        self.x: list[np.ndarray] = []
        self.z: list[np.ndarray] = []
        self.logp: list[float] = []
        self.reward: list[float] = []
        self.cost: list[float] = []
        self.value_r: list[float] = []
        self.value_c: list[float] = []
        self.done: list[bool] = []

    def add(self, obs, x, z, logp, reward, cost, value_r, value_c, done) -> None:
        if logp > 1e-9:
            raise ValueError("log-probabilities must be <= 0")
        self.obs.append(np.asarray(obs, dtype=float))
        self.x.append(np.asarray(x, dtype=int))
        self.z.append(np.asarray(z, dtype=int))
        self.logp.append(float(logp))
        self.reward.append(float(reward))
        self.cost.append(float(cost))
        self.value_r.append(float(value_r))
        self.value_c.append(float(value_c))
        self.done.append(bool(done))

    def __len__(self) -> int:
        return len(self.obs)

    def arrays(self) -> dict[str, np.ndarray]:
        if not self.obs:
            raise ValueError("empty rollout buffer")
        return {
            "obs": np.stack(self.obs),
            "x": np.stack(self.x),
            "z": np.stack(self.z),
            "logp": np.array(self.logp),
            "reward": np.array(self.reward),
            "cost": np.array(self.cost),
            "value_r": np.array(self.value_r),
            "value_c": np.array(self.value_c),
            "done": np.array(self.done, dtype=bool),
        }


def gae_advantages(rewards, values, dones, bootstrap: float, gamma: float, lam: float):
    """Generalized advantage estimates and value targets (advantage + V)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = rewards.shape[0]
    if n == 0:
        raise ValueError("empty input")
    adv = np.empty(n)
    next_value = float(bootstrap)
    next_adv = 0.0
    for t in range(n - 1, -1, -1):
        keep = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * keep - values[t]
        next_adv = delta + gamma * lam * keep * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def gae(buffer: RolloutBuffer, gamma: float, lam: float, signal: str = "reward", bootstrap: float = 0.0):
    """GAE over a rollout buffer for the reward or the cost signal."""
    batch = buffer.arrays()
    if signal == "reward":
        return gae_advantages(batch["reward"], batch["value_r"], batch["done"], bootstrap, gamma, lam)
    if signal == "cost":
        return gae_advantages(batch["cost"], batch["value_c"], batch["done"], bootstrap, gamma, lam)
    raise ValueError(f"unknown signal {signal!r}")


def discounted_returns(signal, dones, gamma: float) -> np.ndarray:
    """Discounted to-go sums of a per-step signal, reset at episode ends."""
    signal = np.asarray(signal, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    out = np.empty_like(signal)
    running = 0.0
    for t in range(signal.shape[0] - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = signal[t] + gamma * running
        out[t] = running
    return out


# --- PPO objective -------------------------------------------------------------


def ppo_clip_objective(ratio, advantage, epsilon: float):
    """min(ratio*A, clip(ratio, 1-eps, 1+eps)*A); works element-wise."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    if np.any(ratio <= 0.0):
        raise ValueError("probability ratios must be positive")
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    out = np.minimum(ratio * advantage, clipped * advantage)
    return float(out) if out.ndim == 0 else out


# --- CVaR ----------------------------------------------------------------------


@dataclass
class CVaRTracker:
    """Threshold state for the tail-mean estimate of discounted costs."""

    threshold: float = 0.0
    worst_fraction: float = 0.05
    step_size: float = 2e-3
    iterations: int = 500

    def __post_init__(self) -> None:
        if not 0.0 < self.worst_fraction < 1.0:
            raise ValueError("worst_fraction must lie in (0,1)")
        if self.step_size <= 0.0 or self.iterations < 1:
            raise ValueError("step_size must be > 0 and iterations >= 1")


def cvar_estimate(samples, v: float, worst_fraction: float) -> float:
    """v + mean((samples - v)+) / worst_fraction.

    At the minimizing v this is the mean of the worst `worst_fraction`
    of the samples; at any other v it upper-bounds that tail mean.
    """
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample set")
    if not 0.0 < worst_fraction < 1.0:
        raise ValueError("worst_fraction must lie in (0,1)")
    excess = np.maximum(s - v, 0.0)
    return float(v + excess.mean() / worst_fraction)


def cvar_update(tracker: CVaRTracker, samples) -> float:
    """Sub-gradient descent of the threshold objective in v.

    Runs `tracker.iterations` steps of v <- v - beta * (1 - P(sample > v)
    / worst_fraction) and stores the result on the tracker.
    """
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("empty sample set")
    v = tracker.threshold
    wf = tracker.worst_fraction
    beta = tracker.step_size
    inv_n = 1.0 / s.size
    for _ in range(tracker.iterations):
        frac_above = np.count_nonzero(s > v) * inv_n
        v -= beta * (1.0 - frac_above / wf)
    tracker.threshold = float(v)
    return tracker.threshold


def crpo_select(cvar_value: float, cost_limit: float, gamma: float) -> str:
    """Reward branch while the CVaR sits at or under cost_limit/(1-gamma)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0,1)")
    return BRANCH_REWARD if cvar_value <= cost_limit / (1.0 - gamma) else BRANCH_COST


# --- updates -------------------------------------------------------------------


def _value_minibatch(net: Sequential, opt: Adam, obs: np.ndarray, targets: np.ndarray) -> float:
    net.zero_grads()
    v = net.forward(obs).ravel()
    err = v - targets
    loss = float(err @ err) / err.shape[0]
    net.backward((2.0 / err.shape[0]) * err[:, None])
    opt.step(net.grads())
    return loss


def update_policy(
    policy: TwoBranchPolicy,
    value_r: Sequential,
    value_c: Sequential,
    optimizers: dict[str, Adam],
    batch: dict[str, np.ndarray],
    advantages: np.ndarray,
    targets_r: np.ndarray,
    targets_c: np.ndarray,
    branch: str,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One update phase: epochs of minibatch clipped-surrogate steps on the
    selected branch plus value regression for both heads.

    Advantages arrive raw and are normalized here per batch. The reward
    branch ascends the clipped surrogate of the reward advantage; the
    cost branch ascends the clipped surrogate of the negated cost
    advantage, i.e. a trust-regioned descent of the cost surrogate (at
    ratio 1 the gradient equals plain gradient descent on the cost
    advantage, and the clip bounds the per-update policy change the same
    way it does for the reward branch).
    """
    n = advantages.shape[0]
    adv = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    if branch == BRANCH_COST:
        adv = -adv
    sign = -1.0                                       # loss = -surrogate (ascent)
    eps = cfg.clip_ratio
    rows = None
    cols = None
    diag = {
        "branch": branch,
        "first_surrogate": None,
        "mean_advantage": float(adv.mean()),
        "clip_fraction": 0.0,
        "value_loss": 0.0,
        "cost_value_loss": 0.0,
        "minibatches": 0,
    }
    epochs = cfg.epochs
    if branch == BRANCH_REWARD and cfg.reward_epochs is not None:
        epochs = cfg.reward_epochs
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = perm[start : start + cfg.minibatch_size]
            obs = batch["obs"][mb]
            b = mb.shape[0]
            if rows is None or rows.shape[0] != b:
                rows = np.arange(b)[:, None]
                cols = np.arange(policy.joint_count)[None, :]

            policy.zero_grads()
            logits_s, logits_z = policy.forward(obs)
            ls = log_softmax(logits_s, axis=2)
            lz = log_softmax(logits_z, axis=2)
            ps = np.exp(ls)
            pz = np.exp(lz)
            idx_s = 1 - batch["x"][mb]        # schedule head: index 0 means send
            idx_z = batch["z"][mb] - 1
            logp = ls[rows, cols, idx_s].sum(axis=1) + lz[rows, cols, idx_z].sum(axis=1)
            ratio = np.exp(logp - batch["logp"][mb])
            a = adv[mb]
            clipped = ((a > 0) & (ratio > 1.0 + eps)) | ((a < 0) & (ratio < 1.0 - eps))
            surrogate = ppo_clip_objective(ratio, a, eps)
            if diag["first_surrogate"] is None:
                diag["first_surrogate"] = float(surrogate.mean())
            diag["clip_fraction"] += float(clipped.mean())
            diag["minibatches"] += 1

            dloss_dlogp = sign * np.where(clipped, 0.0, ratio * a) / b
            grad_s = dloss_dlogp[:, None, None] * (-ps)
            grad_s[rows, cols, idx_s] += dloss_dlogp[:, None]
            grad_z = dloss_dlogp[:, None, None] * (-pz)
            grad_z[rows, cols, idx_z] += dloss_dlogp[:, None]
            if cfg.entropy_coef > 0.0:
                ent_s = -(ps * ls).sum(axis=2, keepdims=True)
                ent_z = -(pz * lz).sum(axis=2, keepdims=True)
                coef = cfg.entropy_coef / b
                grad_s += coef * ps * (ls + ent_s)
                grad_z += coef * pz * (lz + ent_z)
            policy.backward(grad_s, grad_z)
            optimizers["policy"].step(policy.grads())

            diag["value_loss"] += _value_minibatch(value_r, optimizers["value_r"], obs, targets_r[mb])
            diag["cost_value_loss"] += _value_minibatch(value_c, optimizers["value_c"], obs, targets_c[mb])

    for key in ("clip_fraction", "value_loss", "cost_value_loss"):
        diag[key] /= max(diag["minibatches"], 1)
    return diag


def _warm_start_values(
    value_r: Sequential,
    value_c: Sequential,
    optimizers: dict[str, Adam],
    batch: dict[str, np.ndarray],
    targets_r: np.ndarray,
    targets_c: np.ndarray,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> None:
    """First-batch critic fit: set the output bias to the mean return, then
    regress. Returns at the Table-scale discount are far from a zero init,
    which Adam at 3e-4 would otherwise need ~1e5 steps to cover."""
    value_r.layers[-1].bias[:] = targets_r.mean()
    value_c.layers[-1].bias[:] = targets_c.mean()
    n = targets_r.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = perm[start : start + cfg.minibatch_size]
            obs = batch["obs"][mb]
            _value_minibatch(value_r, optimizers["value_r"], obs, targets_r[mb])
            _value_minibatch(value_c, optimizers["value_c"], obs, targets_c[mb])


# --- training loop --------------------------------------------------------------


@dataclass
class EpisodeRow:
    episode: int
    avg_packet_rate: float      # packets per second over policy slots
    avg_error: float
    cvar: float
    branch: str


@dataclass
class TrainResult:
    policy: TwoBranchPolicy
    value_r: Sequential
    value_c: Sequential
    tracker: CVaRTracker
    rows: list[EpisodeRow]
    steps: int
    stopped_early: bool
    baseline_packet_rate: float


def _env_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0] % (2**32))


def train(env_factory, cfg: TrainerConfig, seed: int, log_fn=None) -> TrainResult:
    """Batch loop: collect one episode, refresh the CVaR threshold, pick the
    branch, update. Episode 0 only warm-starts the critics.

    `env_factory(seed)` must build an independent environment instance.
    Stops early once the trailing-window packet ratio and the batch CVaR
    clear the configured margins.
    """
    cfg.validate()
    root = np.random.SeedSequence(seed)
    s_init, s_act, s_shuffle, s_env = root.spawn(4)
    env = env_factory(_env_seed(s_env))
    init_rng = np.random.default_rng(s_init)
    act_rng = np.random.default_rng(s_act)
    shuffle_rng = np.random.default_rng(s_shuffle)

    sim = env.config
    policy = TwoBranchPolicy(
        env.observation_size,
        sim.joint_count,
        sim.max_horizon,
        hidden=cfg.hidden,
        rng=init_rng,
        schedule_bias_init=cfg.schedule_bias_init,
    )
    value_r = value_head(env.observation_size, cfg.hidden, init_rng)
    value_c = value_head(env.observation_size, cfg.hidden, init_rng)
    optimizers = {
        "policy": Adam(policy.params(), cfg.policy_lr),
        "value_r": Adam(value_r.params(), cfg.value_lr),
        "value_c": Adam(value_c.params(), cfg.cost_value_lr),
    }
    tracker = CVaRTracker(
        threshold=0.0,
        worst_fraction=cfg.worst_fraction,
        step_size=cfg.cvar_step_size,
        iterations=cfg.cvar_iterations,
    )
    bound = cfg.cost_limit / (1.0 - cfg.discount)
    steps_per_ep = env.steps_per_episode
    max_episodes = cfg.total_steps // steps_per_ep
    slot_seconds = sim.slot_duration_ms / 1000.0
    baseline_rate = sim.joint_count / slot_seconds

    rows: list[EpisodeRow] = []
    steps = 0
    stopped = False
    first_batch = True
    while len(rows) < max_episodes and not stopped:
        n_episodes = min(cfg.rollout_episodes, max_episodes - len(rows))
        buffer = RolloutBuffer()
        episode_stats = []
        for _ in range(n_episodes):
            obs = env.reset()
            packets = 0
            err_sum = 0.0
            for _ in range(steps_per_ep):
                x, z, logp = policy.act(obs, act_rng)
                vr = float(value_r.forward(obs[None, :])[0, 0])
                vc = float(value_c.forward(obs[None, :])[0, 0])
                out = env.step(x, z)
                buffer.add(obs, x, z, logp, out.reward, out.cost, vr, vc, out.done)
                packets += out.info["packets"]
                err_sum += out.cost
                obs = out.observation
            steps += steps_per_ep
            episode_stats.append((packets, err_sum))

        batch = buffer.arrays()
        cost_togo = discounted_returns(batch["cost"], batch["done"], cfg.discount)
        cvar_update(tracker, cost_togo)
        cvar = cvar_estimate(cost_togo, tracker.threshold, cfg.worst_fraction)
        branch = crpo_select(cvar, cfg.cost_limit, cfg.discount)

        if first_batch:
            # critics only on the first batch; see _warm_start_values
            reward_togo = discounted_returns(batch["reward"], batch["done"], cfg.discount)
            _warm_start_values(
                value_r, value_c, optimizers, batch, reward_togo, cost_togo, cfg, shuffle_rng
            )
            first_batch = False
        else:
            adv_r, tgt_r = gae_advantages(
                batch["reward"], batch["value_r"], batch["done"], 0.0, cfg.discount, cfg.gae_lambda
            )
            adv_c, tgt_c = gae_advantages(
                batch["cost"], batch["value_c"], batch["done"], 0.0, cfg.discount, cfg.gae_lambda
            )
            advantages = adv_r if branch == BRANCH_REWARD else adv_c
            update_policy(
                policy, value_r, value_c, optimizers, batch,
                advantages, tgt_r, tgt_c, branch, cfg, shuffle_rng,
            )

        for packets, err_sum in episode_stats:
            row = EpisodeRow(
                episode=len(rows),
                avg_packet_rate=packets / (steps_per_ep * slot_seconds),
                avg_error=err_sum / steps_per_ep,
                cvar=cvar,
                branch=branch,
            )
            rows.append(row)
            if log_fn is not None:
                log_fn(row)

        window = max(cfg.stop_patience, 1)
        if (
            cfg.stop_packet_ratio is not None
            and len(rows) >= max(cfg.min_episodes, window)
            and cvar <= bound * cfg.stop_cvar_margin
        ):
            recent = rows[-window:]
            ratio = sum(r.avg_packet_rate for r in recent) / (window * baseline_rate)
            if ratio <= cfg.stop_packet_ratio:
                stopped = True

    return TrainResult(
        policy=policy,
        value_r=value_r,
        value_c=value_c,
        tracker=tracker,
        rows=rows,
        steps=steps,
        stopped_early=stopped,
        baseline_packet_rate=baseline_rate,
    )


# --- evaluation ------------------------------------------------------------------


@dataclass
class EvalResult:
    episode_rows: list[tuple]       # (episode, packet_rate, mean_error, discounted_cost)
    ccdf: list[tuple]               # (cost, fraction of episodes strictly above)
    satisfied_fraction: float
    mean_packet_rate: float
    mean_error: float
    bound: float


def evaluate(policy: TwoBranchPolicy, env_factory, episodes: int, seed: int,
             cost_limit: float, gamma: float) -> EvalResult:
    """Greedy (mode-of-distribution) rollouts with per-episode discounted cost.

    The CCDF table maps each observed discounted cost to the fraction of
    episodes strictly above it.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = env_factory(seed)
    slot_seconds = env.config.slot_duration_ms / 1000.0
    bound = cost_limit / (1.0 - gamma)
    rows = []
    costs = np.empty(episodes)
    for ep in range(episodes):
        obs = env.reset()
        packets = 0
        err = 0.0
        disc = 0.0
        gamma_k = 1.0
        for _ in range(env.steps_per_episode):
            x, z = policy.greedy(obs)
            out = env.step(x, z)
            packets += out.info["packets"]
            err += out.cost
            disc += gamma_k * out.cost
            gamma_k *= gamma
            obs = out.observation
        rate = packets / (env.steps_per_episode * slot_seconds)
        rows.append((ep, rate, err / env.steps_per_episode, disc))
        costs[ep] = disc
    thresholds = np.unique(costs)
    ccdf = [(float(c), float(np.mean(costs > c))) for c in thresholds]
    return EvalResult(
        episode_rows=rows,
        ccdf=ccdf,
        satisfied_fraction=float(np.mean(costs <= bound)),
        mean_packet_rate=float(np.mean([r[1] for r in rows])),
        mean_error=float(np.mean([r[2] for r in rows])),
        bound=bound,
    )


def check_crpo_log(rows, bound: float) -> dict:
    """Inspect training rows: which branches appear, and whether any
    cost-branch step ran while the batch CVaR was at or under the bound."""
    has_reward = any(r.branch == BRANCH_REWARD for r in rows)
    has_cost = any(r.branch == BRANCH_COST for r in rows)
    violations = [r for r in rows if r.branch == BRANCH_COST and r.cvar <= bound]
    return {"has_reward": has_reward, "has_cost": has_cost, "violations": violations}


# --- checkpoints ------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, policy: TwoBranchPolicy, value_r: Sequential, value_c: Sequential,
                    config_hash: str = "") -> None:
    """Single-file dump of all parameter tensors plus layout metadata."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "obs_dim": policy.obs_dim,
        "joint_count": policy.joint_count,
        "horizon": policy.horizon,
        "hidden": list(policy.hidden),
        "config_hash": config_hash,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for tag, params in (
        ("policy", policy.params()),
        ("value_r", value_r.params()),
        ("value_c", value_c.params()),
    ):
        for i, p in enumerate(params):
            arrays[f"{tag}_{i}"] = p
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Rebuild (policy, value_r, value_c, meta) from a checkpoint file."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        rng = np.random.default_rng(0)
        policy = TwoBranchPolicy(
            meta["obs_dim"], meta["joint_count"], meta["horizon"],
            hidden=tuple(meta["hidden"]), rng=rng,
        )
        value_r = value_head(meta["obs_dim"], tuple(meta["hidden"]), rng)
        value_c = value_head(meta["obs_dim"], tuple(meta["hidden"]), rng)
        for tag, params in (
            ("policy", policy.params()),
            ("value_r", value_r.params()),
            ("value_c", value_c.params()),
        ):
            for i, p in enumerate(params):
                p[...] = data[f"{tag}_{i}"]
    return policy, value_r, value_c, meta
