"""Masked actor/critic networks: damage detection, tokenizer, mask encoder, detokenizer.

Observations are batched ``(B, N, 3)`` arrays of per-joint (position,
velocity, previous action).  The damage detector is an oracle: it receives
boolean ``masked`` ``(B, N)`` and ``detected`` ``(B,)`` arrays from the
simulator instead of inferring them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .damage import DetectabilityFlags
from .nn import MASK_NEG, ParamStore

CHECKPOINT_VERSION = 1
HALF_LOG_2PI_E = 0.5 * np.log(2.0 * np.pi * np.e)
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "transformer"
    n_joints: int = 6
    d_model: int = 16
    n_layers: int = 1
    n_heads: int = 2
    d_ff: int = 32
    mlp_hidden: tuple = (128, 128)
    mask_mode: str = "column"
    init_log_std: float = -0.5
    # fixed per-channel input scale for (position, velocity, action)
    obs_scale: tuple = (1.0, 0.2, 0.1)
    # compute precision of parameters and activations
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in ("transformer", "mlp"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.mask_mode not in ("column", "row_column"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by a positive head count")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("mlp_hidden", "obs_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def full_transformer_config(n_joints: int = 12) -> ModelConfig:
    return ModelConfig("transformer", n_joints, d_model=120, n_layers=4, n_heads=2, d_ff=128, dtype="float64")


def full_mlp_config(n_joints: int = 12) -> ModelConfig:
    return ModelConfig("mlp", n_joints, mlp_hidden=(256, 512, 256, 256), dtype="float64")


def _as_float(x) -> np.ndarray:
    """Array view that keeps float32/float64 input and promotes anything else to float64."""
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float64)


def scale_obs(obs, cfg: ModelConfig) -> np.ndarray:
    """Fixed per-channel input scaling of raw readings; masking values are applied after it."""
    return np.asarray(obs, dtype=np.float64) * np.asarray(cfg.obs_scale)


# ---------------------------------------------------------------------------
# damage detection


def flag_token(detected) -> np.ndarray:
    """``(B, 3)`` rows of all +1 where a joint malfunction is flagged, else all -1."""
    detected = np.asarray(detected, dtype=bool)
    return np.where(detected[..., None], 1.0, -1.0) * np.ones(3)


def build_mask(masked, mode: str = "column") -> np.ndarray:
    """Additive ``(B, N+1, N+1)`` attention mask using the finite -inf sentinel."""
    masked = np.asarray(masked, dtype=bool)
    B, N = masked.shape
    M = np.zeros((B, N + 1, N + 1))
    cols = np.zeros((B, N + 1), dtype=bool)
    cols[:, :N] = masked
    M[np.broadcast_to(cols[:, None, :], M.shape)] = MASK_NEG
    if mode == "row_column":
        rows = np.zeros((B, N + 1, N + 1), dtype=bool)
        rows[:, :N, :N] = masked[:, :, None]
        M[rows] = MASK_NEG
    return M


def detect_and_mask_batch(obs, masked, detected, mask_value: float = 0.0, mode: str = "column"):
    """Batched detector: masked observation ``V``, attention mask ``M`` and flag token ``F``."""
    obs = np.asarray(obs, dtype=np.float64)
    masked = np.asarray(masked, dtype=bool)
    if obs.ndim != 3 or obs.shape[-1] != 3 or masked.shape != obs.shape[:2]:
        raise ValueError(f"observation {obs.shape} / mask {masked.shape} shape mismatch")
    if np.any(masked.all(axis=1)):
        raise ValueError("every joint is masked; the policy would have no joint signal")
    V = np.where(masked[..., None], mask_value, obs)
    return V, build_mask(masked, mode), flag_token(detected)


def detect_and_mask(O, flags: DetectabilityFlags, mask_value: float = 0.0, mode: str = "column"):
    """Single observation ``(N, 3)`` -> ``(V, M, F)`` with ``M`` holding true ``-inf``."""
    O = np.asarray(O, dtype=np.float64)
    masked = np.zeros(O.shape[0], dtype=bool)
    masked[list(flags.masked_joints)] = True
    V, M, F = detect_and_mask_batch(O[None], masked[None], np.array([flags.joint_malfunction_detected]),
                                    mask_value, mode)
    M = np.where(M[0] <= MASK_NEG, -np.inf, 0.0)
    return V[0], M, F[0]


# ---------------------------------------------------------------------------
# transformer pieces


def init_trunk(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    S, D = cfg.n_joints + 1, cfg.d_model
    store.add("tok.W", rng.normal(0.0, 1.0 / np.sqrt(3.0), size=(S, 3, D)))
    store.add("tok.b", np.zeros((S, D)))
    store.add("pos", rng.normal(0.0, 0.1, size=(S, D)))
    for k in range(cfg.n_layers):
        nn.init_block(store, f"blk{k}.", D, cfg.d_ff, rng)
    if cfg.n_layers:
        store.add("ln_f.g", np.ones(D))
        store.add("ln_f.b", np.zeros(D))


def tokenize(O_prime, p) -> np.ndarray:
    """Per-token linear maps plus learnable positions: ``E[i] = O'[i] W_i + b_i + pos_i``."""
    O_prime = _as_float(O_prime)
    single = O_prime.ndim == 2
    X = O_prime[None] if single else O_prime
    if X.shape[1] != p["tok.W"].shape[0]:
        raise ValueError(f"expected {p['tok.W'].shape[0]} rows, got {X.shape[1]}")
    E = (X.transpose(1, 0, 2) @ p["tok.W"]).transpose(1, 0, 2) + p["tok.b"] + p["pos"]
    return E[0] if single else E


def tokenize_backward(dE, X, store: ParamStore) -> None:
    store.grads["tok.W"] += X.transpose(1, 2, 0) @ dE.transpose(1, 0, 2)
    s = dE.sum(axis=0)
    store.grads["tok.b"] += s
    store.grads["pos"] += s


def encode(E, M, p, cfg: ModelConfig, need_cache: bool = False, rows: slice | None = None):
    """K pre-norm attention blocks sharing the same mask, then a final layer norm (none when K=0).

    ``rows`` restricts the output to those tokens; the last block then skips the others.
    """
    E = _as_float(E)
    single = E.ndim == 2
    x = E[None] if single else E
    S = x.shape[1]
    Mp = nn.prepare_mask(M, S, x.dtype)
    caches = []
    for k in range(cfg.n_layers):
        last = rows if k == cfg.n_layers - 1 else None
        x, c = nn.block_forward(x, Mp, p, f"blk{k}.", cfg.n_heads, last)
        caches.append(c)
    if not caches and rows is not None:
        x = x[:, rows]
    R, c_ln = nn.layernorm_forward(x, p["ln_f.g"], p["ln_f.b"]) if caches else (x, None)
    R = R[0] if single else R
    return (R, (caches, c_ln, S, rows)) if need_cache else R


def encode_backward(dR, cache, store: ParamStore, cfg: ModelConfig):
    caches, c_ln, S, rows = cache
    p = store.params
    if c_ln is None:
        if rows is None:
            return dR
        dx = np.zeros(dR.shape[:-2] + (S, dR.shape[-1]), dtype=dR.dtype)
        dx[..., rows, :] = dR
        return dx
    dx = nn.layernorm_backward(dR, c_ln, p["ln_f.g"], store, "ln_f.g", "ln_f.b")
    for k in reversed(range(cfg.n_layers)):
        dx = nn.block_backward(dx, caches[k], p, store, f"blk{k}.")
    return dx


def detokenize(R, p) -> np.ndarray:
    """Joint ``i`` action mean from token ``i`` alone; the flag token is dropped."""
    R = _as_float(R)
    W = p["detok.W"]
    N = W.shape[0]
    if R.shape[-2] != N + 1 or R.shape[-1] != W.shape[1]:
        raise ValueError(f"token matrix {R.shape} does not fit a detokenizer for {N} joints")
    return (R[..., :N, :] * W).sum(axis=-1) + p["detok.b"]


class TransformerActor:
    """Masked transformer actor with a state-independent diagonal Gaussian."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.store = ParamStore(cfg.dtype)
        init_trunk(self.store, cfg, rng)
        N, D = cfg.n_joints, cfg.d_model
        self.store.add("detok.W", rng.normal(0.0, 0.01, size=(N, D)))
        self.store.add("detok.b", np.zeros(N))
        self.store.add("log_std", np.full(N, cfg.init_log_std))

    @property
    def log_std(self) -> np.ndarray:
        return self.store["log_std"]

    def inputs(self, obs, masked, detected, mask_value: float = 0.0):
        V, M, F = detect_and_mask_batch(scale_obs(obs, self.cfg), masked, detected, mask_value, self.cfg.mask_mode)
        X = np.concatenate([V, F[:, None, :]], axis=1)
        return X.astype(self.store.dtype, copy=False), M

    def forward(self, obs, masked, detected, mask_value: float = 0.0, need_cache: bool = False):
        p = self.store.params
        X, M = self.inputs(obs, masked, detected, mask_value)
        E = tokenize(X, p)
        if need_cache:
            R, enc_cache = encode(E, M, p, self.cfg, need_cache=True)
            return detokenize(R, p), (X, R, enc_cache)
        return detokenize(encode(E, M, p, self.cfg), p)

    def backward(self, dmeans, cache) -> None:
        X, R, enc_cache = cache
        p = self.store.params
        N = self.cfg.n_joints
        dmeans = dmeans.astype(self.store.dtype, copy=False)
        self.store.grads["detok.W"] += np.einsum("bn,bnd->nd", dmeans, R[:, :N])
        self.store.grads["detok.b"] += dmeans.sum(axis=0)
        dR = np.zeros_like(R)
        dR[:, :N] = dmeans[..., None] * p["detok.W"]
        dE = encode_backward(dR, enc_cache, self.store, self.cfg)
        tokenize_backward(dE, X, self.store)


class TransformerCritic:
    """Same trunk as the actor, fed true observations with no mask; value read off the flag token."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.store = ParamStore(cfg.dtype)
        init_trunk(self.store, cfg, rng)
        self.store.add("value.W", rng.normal(0.0, 0.01, size=cfg.d_model))
        self.store.add("value.b", np.zeros(()))

    def forward(self, obs_true, need_cache: bool = False):
        obs_true = np.asarray(obs_true, dtype=np.float64)
        if obs_true.ndim != 3 or obs_true.shape[1:] != (self.cfg.n_joints, 3):
            raise ValueError(f"critic expects (B, {self.cfg.n_joints}, 3) observations, got {obs_true.shape}")
        p = self.store.params
        B = obs_true.shape[0]
        F = -np.ones((B, 1, 3))
        X = np.concatenate([scale_obs(obs_true, self.cfg), F], axis=1)
        E = tokenize(X.astype(self.store.dtype, copy=False), p)
        # only the flag token is read, so the last block computes that row alone
        R, enc_cache = encode(E, None, p, self.cfg, need_cache=True, rows=slice(-1, None))
        v = R[:, -1] @ p["value.W"] + p["value.b"]
        return (v, (X, R, enc_cache)) if need_cache else v

    def backward(self, dv, cache) -> None:
        X, R, enc_cache = cache
        p = self.store.params
        dv = dv.astype(self.store.dtype, copy=False)
        self.store.grads["value.W"] += dv @ R[:, -1]
        self.store.grads["value.b"] += dv.sum()
        dR = np.zeros_like(R)
        dR[:, -1] = dv[:, None] * p["value.W"]
        dE = encode_backward(dR, enc_cache, self.store, self.cfg)
        tokenize_backward(dE, X, self.store)


# ---------------------------------------------------------------------------
# MLP variant


def _init_mlp(store: ParamStore, widths, rng, last_std: float = 0.01) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        std = last_std if i == len(widths) - 2 else np.sqrt(2.0 / a)
        store.add(f"mlp{i}.W", rng.normal(0.0, std, size=(a, b)))
        store.add(f"mlp{i}.b", np.zeros(b))


def _mlp_forward(store: ParamStore, x, n_layers: int):
    p = store.params
    cache = []
    for i in range(n_layers):
        pre = x @ p[f"mlp{i}.W"] + p[f"mlp{i}.b"]
        cache.append((x, pre))
        x = pre if i == n_layers - 1 else nn.relu_forward(pre)
    return x, cache


def _mlp_backward(store: ParamStore, dout, cache) -> None:
    n = len(cache)
    for i in reversed(range(n)):
        x, pre = cache[i]
        if i != n - 1:
            dout = nn.relu_backward(dout, pre)
        dout = nn.linear_backward(dout, x, store[f"mlp{i}.W"], store, f"mlp{i}.W", f"mlp{i}.b")


class MlpActor:
    """Zero-out-only detector feeding a dense stack on the flattened ``(N+1) x 3`` input."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.store = ParamStore(cfg.dtype)
        N = cfg.n_joints
        self.widths = (3 * N + 3, *cfg.mlp_hidden, N)
        _init_mlp(self.store, self.widths, rng)
        self.store.add("log_std", np.full(N, cfg.init_log_std))

    @property
    def log_std(self) -> np.ndarray:
        return self.store["log_std"]

    def inputs(self, obs, masked, detected, mask_value: float = 0.0):
        obs = np.asarray(obs, dtype=np.float64)
        masked = np.asarray(masked, dtype=bool)
        if obs.ndim != 3 or obs.shape[1:] != (self.cfg.n_joints, 3) or masked.shape != obs.shape[:2]:
            raise ValueError(f"observation {obs.shape} / mask {masked.shape} shape mismatch")
        if np.any(masked.all(axis=1)):
            raise ValueError("every joint is masked; the policy would have no joint signal")
        V = np.where(masked[..., None], mask_value, scale_obs(obs, self.cfg))
        X = np.concatenate([V, flag_token(detected)[:, None, :]], axis=1)
        return X.reshape(X.shape[0], -1).astype(self.store.dtype, copy=False)

    def forward(self, obs, masked, detected, mask_value: float = 0.0, need_cache: bool = False):
        x = self.inputs(obs, masked, detected, mask_value)
        out, cache = _mlp_forward(self.store, x, len(self.widths) - 1)
        return (out, cache) if need_cache else out

    def backward(self, dmeans, cache) -> None:
        _mlp_backward(self.store, dmeans.astype(self.store.dtype, copy=False), cache)


class MlpCritic:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.store = ParamStore(cfg.dtype)
        self.widths = (3 * cfg.n_joints + 3, *cfg.mlp_hidden, 1)
        _init_mlp(self.store, self.widths, rng)

    def forward(self, obs_true, need_cache: bool = False):
        obs_true = np.asarray(obs_true, dtype=np.float64)
        B = obs_true.shape[0]
        X = np.concatenate([scale_obs(obs_true, self.cfg), -np.ones((B, 1, 3))], axis=1)
        X = X.reshape(B, -1).astype(self.store.dtype, copy=False)
        out, cache = _mlp_forward(self.store, X, len(self.widths) - 1)
        return (out[:, 0], cache) if need_cache else out[:, 0]

    def backward(self, dv, cache) -> None:
        _mlp_backward(self.store, dv[:, None].astype(self.store.dtype, copy=False), cache)


def make_actor_critic(cfg: ModelConfig, seed: int):
    rng = np.random.default_rng([seed, 0xAC])
    if cfg.variant == "transformer":
        return TransformerActor(cfg, rng), TransformerCritic(cfg, rng)
    return MlpActor(cfg, rng), MlpCritic(cfg, rng)


def param_count(store: ParamStore) -> int:
    return store.count()


# ---------------------------------------------------------------------------
# Gaussian action distribution


def gaussian_log_prob(actions, means, log_std) -> np.ndarray:
    """Sum over joints of the diagonal Gaussian log-density, shape ``(B,)``."""
    z = (actions - means) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - HALF_LOG_2PI).sum(axis=-1)


def gaussian_entropy(log_std) -> float:
    """Mean per-dimension entropy ``log sigma + 0.5 ln(2 pi e)``."""
    log_std = np.asarray(log_std, dtype=np.float64)
    return float(np.mean(log_std + HALF_LOG_2PI_E))


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: ModelConfig
    actor: ParamStore
    critic: ParamStore
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, actor, critic, meta: dict | None = None) -> Path:
    """Write parameters, Adam state and metadata to a single ``.npz`` file."""
    path = Path(path)
    meta = dict(meta or {})
    meta["version"] = CHECKPOINT_VERSION
    meta["model"] = asdict(actor.cfg)
    arrays = {}
    for tag, store in (("actor", actor.store), ("critic", critic.store)):
        for name in store.names():
            arrays[f"{tag}/p/{name}"] = store.params[name]
            arrays[f"{tag}/m/{name}"] = store.m[name]
            arrays[f"{tag}/v/{name}"] = store.v[name]
        meta[f"{tag}_adam_step"] = store.step
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Rebuild ``(actor, critic, meta)`` from :func:`save_checkpoint` output."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        cfg = ModelConfig.from_dict(meta["model"])
        actor, critic = make_actor_critic(cfg, 0)
        for tag, store in (("actor", actor.store), ("critic", critic.store)):
            for name in store.names():
                key = f"{tag}/p/{name}"
                if key not in data:
                    raise ValueError(f"checkpoint is missing {key}")
                if data[key].shape != store.params[name].shape:
                    raise ValueError(f"shape mismatch for {key}")
                store.params[name][...] = data[key]
                store.m[name][...] = data[f"{tag}/m/{name}"]
                store.v[name][...] = data[f"{tag}/v/{name}"]
            store.step = int(meta[f"{tag}_adam_step"])
    return actor, critic, meta
