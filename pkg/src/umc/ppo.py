"""PPO with GAE: rollout collection, the three-term loss and the minibatch update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import NonFiniteError, adam_step, clip_global_norm
from .policy import gaussian_entropy, gaussian_log_prob

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoHyper:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.01
    epochs: int = 4
    minibatches: int = 4
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    horizon: int = 64
    n_envs: int = 256
    # rewards are multiplied by this before GAE so returns stay O(1)
    reward_scale: float = 0.02
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if (self.horizon * self.n_envs) % self.minibatches:
            raise ValueError("horizon * n_envs must be divisible by the minibatch count")


@dataclass
class RolloutBuffer:
    obs: np.ndarray          # (T, B, N, 3) as seen by the actor
    obs_true: np.ndarray     # (T, B, N, 3) fed to the critic
    masked: np.ndarray       # (T, B, N)
    detected: np.ndarray     # (T, B)
    actions: np.ndarray      # (T, B, N)
    log_probs: np.ndarray    # (T, B)
    rewards: np.ndarray      # (T, B), already scaled
    dones: np.ndarray        # (T, B)
    values: np.ndarray       # (T, B)
    last_values: np.ndarray  # (B,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    raw_reward_mean: float = 0.0

    @classmethod
    def allocate(cls, T: int, B: int, N: int) -> "RolloutBuffer":
        return cls(
            obs=np.zeros((T, B, N, 3)),
            obs_true=np.zeros((T, B, N, 3)),
            masked=np.zeros((T, B, N), dtype=bool),
            detected=np.zeros((T, B), dtype=bool),
            actions=np.zeros((T, B, N)),
            log_probs=np.zeros((T, B)),
            rewards=np.zeros((T, B)),
            dones=np.zeros((T, B), dtype=bool),
            values=np.zeros((T, B)),
            last_values=np.zeros(B),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise RuntimeError("advantages must be computed before the buffer is consumed")
        T, B = self.shape
        out = {}
        for key in ("obs", "obs_true", "masked", "detected", "actions", "log_probs", "values",
                    "advantages", "returns"):
            arr = getattr(self, key)
            out[key] = arr.reshape(T * B, *arr.shape[2:])
        return out


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalised advantage estimates and returns over a ``(T, ...)`` rollout.

    ``dones[t]`` marks that step ``t`` ended its episode, so neither the TD
    target nor the recursion crosses it.  ``last_values`` bootstraps the step
    after the horizon.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in reversed(range(rewards.shape[0])):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# ---------------------------------------------------------------------------
# loss terms; each returns the scalar and its gradient w.r.t. the network output


def surrogate_loss(log_prob_new, log_prob_old, advantages, clip: float):
    """Clipped surrogate ``-mean(min(r A, clip(r, 1-eps, 1+eps) A))``.

    Returns ``(loss, dloss/dlog_prob_new, ratio)``.
    """
    ratio = np.exp(log_prob_new - log_prob_old)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteError("non-finite probability ratio")
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages
    n = ratio.size
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    # the clipped branch only wins when the ratio sits outside the band, where its slope is zero
    grad = np.where(unclipped <= clipped, -advantages * ratio / n, 0.0)
    return loss, grad, ratio


def value_loss(values, old_values, returns, clip: float):
    """Clipped value loss ``mean(max((V-R)^2, (clip(V, V_old-eps, V_old+eps)-R)^2))``."""
    delta = values - old_values
    v_clipped = old_values + np.clip(delta, -clip, clip)
    a = (values - returns) ** 2
    b = (v_clipped - returns) ** 2
    n = values.size
    loss = float(np.mean(np.maximum(a, b)))
    # inside the clip window both branches follow V, and roundoff may pick either
    grad_b = np.where(np.abs(delta) < clip, 2.0 * (v_clipped - returns) / n, 0.0)
    grad = np.where(a >= b, 2.0 * (values - returns) / n, grad_b)
    return loss, grad


def entropy_term(log_std):
    """Mean per-dimension Gaussian entropy and its gradient w.r.t. ``log_std``."""
    log_std = np.asarray(log_std, dtype=np.float64)
    return gaussian_entropy(log_std), np.full(log_std.shape, 1.0 / log_std.size)


def normalize(adv):
    # a floor rather than an additive epsilon keeps the output std at exactly 1
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


def ppo_loss(actor, critic, batch: dict, hyper: PpoHyper, mask_value: float = 0.0):
    """Total loss on one minibatch; fills ``actor.store.grads`` and ``critic.store.grads``.

    Gradients are accumulated, so callers zero them first.
    """
    means, a_cache = actor.forward(batch["obs"], batch["masked"], batch["detected"], mask_value, need_cache=True)
    log_std = actor.log_std
    logp = gaussian_log_prob(batch["actions"], means, log_std)
    l_surr, dlogp, ratio = surrogate_loss(logp, batch["log_probs"], batch["advantages"], hyper.clip)

    values, c_cache = critic.forward(batch["obs_true"], need_cache=True)
    l_val, dvalues = value_loss(values, batch["values"], batch["returns"], hyper.clip)
    ent, dent = entropy_term(log_std)

    total = l_surr + hyper.value_coef * l_val - hyper.entropy_coef * ent
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite PPO loss (surrogate={l_surr}, value={l_val})")

    inv_std = np.exp(-log_std)
    z = (batch["actions"] - means) * inv_std
    dmeans = dlogp[:, None] * z * inv_std
    dlog_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0) - hyper.entropy_coef * dent
    actor.backward(dmeans, a_cache)
    actor.store.grads["log_std"] += dlog_std
    if hyper.value_coef != 0.0:
        critic.backward(hyper.value_coef * dvalues, c_cache)

    stats = {
        "loss": total,
        "loss_surrogate": l_surr,
        "loss_value": l_val,
        "entropy": ent,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > hyper.clip)),
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
    }
    return total, stats


def update(buffer: RolloutBuffer, actor, critic, hyper: PpoHyper, rng: np.random.Generator,
           mask_value: float = 0.0) -> dict:
    """Epochs x minibatches of clipped PPO with global-norm clipping and Adam.

    On a non-finite loss or gradient both networks are restored to their
    pre-update parameters and :class:`NonFiniteError` is re-raised.
    """
    data = buffer.flat()
    n = data["advantages"].shape[0]
    mb = n // hyper.minibatches
    backup = (actor.store.copy(), critic.store.copy())
    sums: dict[str, float] = {}
    count = 0
    try:
        for _ in range(hyper.epochs):
            perm = rng.permutation(n)
            for k in range(hyper.minibatches):
                idx = perm[k * mb:(k + 1) * mb]
                batch = {key: arr[idx] for key, arr in data.items()}
                if hyper.normalize_advantages:
                    batch["advantages"] = normalize(batch["advantages"])
                actor.store.zero_grad()
                critic.store.zero_grad()
                _, stats = ppo_loss(actor, critic, batch, hyper, mask_value)
                stats["grad_scale"] = clip_global_norm([actor.store, critic.store], hyper.max_grad_norm)
                adam_step(actor.store, hyper.lr)
                adam_step(critic.store, hyper.lr)
                for key, val in stats.items():
                    sums[key] = sums.get(key, 0.0) + val
                count += 1
    except NonFiniteError:
        actor.store.load_state(backup[0])
        critic.store.load_state(backup[1])
        logger.error("non-finite values during PPO update; parameters rolled back")
        raise
    return {key: val / count for key, val in sums.items()}


class EpisodeTracker:
    """Running per-env return/length with a window of recently finished episodes."""

    def __init__(self, n_envs: int, window: int = 100):
        self.ret = np.zeros(n_envs)
        self.len = np.zeros(n_envs, dtype=np.int64)
        self.window = window
        self.returns: list[float] = []
        self.lengths: list[int] = []

    def push(self, rewards, dones) -> None:
        self.ret += rewards
        self.len += 1
        for i in np.flatnonzero(dones):
            self.returns.append(float(self.ret[i]))
            self.lengths.append(int(self.len[i]))
        self.ret[dones] = 0.0
        self.len[dones] = 0
        del self.returns[:-self.window]
        del self.lengths[:-self.window]

    def mean_length(self) -> float:
        return float(np.mean(self.lengths)) if self.lengths else float("nan")

    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")


def collect_rollout(actor, critic, venv, hyper: PpoHyper, rng: np.random.Generator,
                    tracker: EpisodeTracker | None = None, mask_value: float = 0.0) -> RolloutBuffer:
    """Run ``hyper.horizon`` steps of every env with actions sampled from the policy."""
    T, B, N = hyper.horizon, venv.n_envs, venv.cfg.n_joints
    buf = RolloutBuffer.allocate(T, B, N)
    log_std = actor.log_std.copy()
    std = np.exp(log_std)
    raw_sum = 0.0
    for t in range(T):
        masked, detected = venv.flags()
        obs, obs_true = venv.obs, venv.obs_true
        means = actor.forward(obs, masked, detected, mask_value)
        values = critic.forward(obs_true)
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(values))):
            bad = np.flatnonzero(~np.isfinite(means).all(axis=1) | ~np.isfinite(values))
            raise NonFiniteError(f"non-finite action mean or value at step {t} for envs {bad[:8].tolist()}")
        actions = means + std * rng.standard_normal((B, N))
        buf.obs[t] = obs
        buf.obs_true[t] = obs_true
        buf.masked[t] = masked
        buf.detected[t] = detected
        buf.actions[t] = actions
        buf.log_probs[t] = gaussian_log_prob(actions, means, log_std)
        buf.values[t] = values
        res = venv.step(actions)
        buf.rewards[t] = hyper.reward_scale * res.reward
        buf.dones[t] = res.done
        raw_sum += float(res.reward.sum())
        if tracker is not None:
            tracker.push(res.reward, res.done)
    buf.last_values = critic.forward(venv.obs_true)
    buf.raw_reward_mean = raw_sum / (T * B)
    buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.last_values,
                                              hyper.gamma, hyper.lam)
    return buf
