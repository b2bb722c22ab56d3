"""Finite-difference checks of every hand-written backward pass, in float64.

Central differences are only meaningful where the loss is smooth, so each
case is evaluated at a point whose ReLU pre-activations and clip boundaries
sit at least :data:`KINK_MARGIN` away from their kinks.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .policy import ModelConfig, gaussian_log_prob, make_actor_critic
from .ppo import PpoHyper, normalize, ppo_loss

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


def _relu_inputs(model, cache) -> list[np.ndarray]:
    if model.cfg.variant == "mlp":
        return [pre for _, pre in cache[:-1]]
    block_caches = cache[2][0]
    return [c[3][1] for c in block_caches]


def kink_distance(actor, critic, batch, clip: float = 0.2, mask_value: float = 0.0) -> float:
    """Smallest distance from any ReLU input or PPO clip switch to its kink."""
    means, a_cache = actor.forward(batch["obs"], batch["masked"], batch["detected"], mask_value, need_cache=True)
    values, c_cache = critic.forward(batch["obs_true"], need_cache=True)
    d = [np.abs(h).min() for h in _relu_inputs(actor, a_cache) + _relu_inputs(critic, c_cache)]
    ratio = np.exp(gaussian_log_prob(batch["actions"], means, actor.log_std) - batch["log_probs"])
    d.append(np.abs(np.abs(ratio - 1.0) - clip).min())
    dv = values - batch["values"]
    d.append(np.abs(np.abs(dv) - clip).min())
    # the clipped value loss also switches branch where both errors have equal size
    clipped = batch["values"] + np.clip(dv, -clip, clip)
    d.append(np.abs(np.abs(values - batch["returns"]) - np.abs(clipped - batch["returns"]))[np.abs(dv) > clip].min(initial=np.inf))
    return float(min(d))


def generic_point(store: nn.ParamStore, rng) -> None:
    """Redraw every parameter away from init structure.

    Small output heads and zero biases shrink upstream gradients towards the
    central-difference noise floor, so the check runs at a generic point.
    """
    for name, p in store.params.items():
        if name == "log_std":
            p[...] = rng.normal(-0.5, 0.2, p.shape)
        elif name.endswith(".g"):
            p[...] = rng.normal(1.0, 0.2, p.shape)
        elif p.ndim >= 2:
            p[...] = rng.normal(0.0, 1.0 / np.sqrt(p.shape[-2]), p.shape)
        else:
            p[...] = rng.normal(0.0, 0.3, p.shape)


def _block_case(rng) -> float:
    store = nn.ParamStore()
    nn.init_block(store, "b.", 8, 12, rng)
    generic_point(store, rng)
    x = rng.normal(size=(3, 5, 8))
    while np.abs(nn.block_forward(x, None, store.params, "b.", 2)[1][3][1]).min() <= KINK_MARGIN:
        x = rng.normal(size=(3, 5, 8))
    M = np.zeros((3, 5, 5))
    M[:, :, 1] = nn.MASK_NEG
    M[0, :, 3] = nn.MASK_NEG
    w = rng.normal(size=x.shape)

    def f(s):
        s.zero_grad()
        out, cache = nn.block_forward(x, M, s.params, "b.", 2)
        nn.block_backward(w, cache, s.params, s, "b.")
        return float((out * w).sum())

    return nn.grad_check(f, store)


def ppo_batch(actor, rng, B: int = 12, mask_frac: float = 0.3):
    """A random minibatch with masked joints, mixed flags and off-policy log-probs."""
    N = actor.cfg.n_joints
    obs = rng.normal(size=(B, N, 3))
    masked = rng.random((B, N)) < mask_frac
    masked[:, 0] = False
    detected = rng.random(B) < 0.5
    means = actor.forward(obs, masked, detected)
    actions = means + rng.normal(size=(B, N))
    return {
        "obs": obs,
        "obs_true": obs + 0.1 * rng.normal(size=obs.shape),
        "masked": masked,
        "detected": detected,
        "actions": actions,
        "log_probs": gaussian_log_prob(actions, means, actor.log_std) + rng.normal(0.0, 0.05, B),
        "values": rng.normal(size=B),
        "advantages": normalize(rng.normal(size=B)),
        "returns": rng.normal(size=B),
    }


def _ppo_case(variant: str, rng, mask_value: float = 0.0) -> dict[str, float]:
    cfg = ModelConfig(variant, n_joints=4, d_model=8, n_layers=2, n_heads=2, d_ff=8, mlp_hidden=(16, 16),
                      dtype="float64")
    while True:
        actor, critic = make_actor_critic(cfg, int(rng.integers(1 << 30)))
        generic_point(actor.store, rng)
        generic_point(critic.store, rng)
        batch = ppo_batch(actor, rng)
        if kink_distance(actor, critic, batch, mask_value=mask_value) > KINK_MARGIN:
            break
    hyper = PpoHyper(n_envs=12, horizon=1, minibatches=1)

    def f(_):
        actor.store.zero_grad()
        critic.store.zero_grad()
        return ppo_loss(actor, critic, batch, hyper, mask_value)[0]

    return {f"{variant}_actor": nn.grad_check(f, actor.store), f"{variant}_critic": nn.grad_check(f, critic.store)}


def run_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error per case; every value should be below :data:`TOLERANCE`."""
    rng = np.random.default_rng(seed)
    results = {"attention_block": _block_case(rng)}
    results.update(_ppo_case("transformer", rng))
    results.update(_ppo_case("mlp", rng))
    return results
