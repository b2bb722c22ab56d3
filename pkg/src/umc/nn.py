"""Dense numpy kernels with hand-written reverse-mode gradients.

Arrays carry a leading batch axis and keep the dtype of the parameters
(float64 for gradient checks, float32 is fine for training).  Each
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` takes
the upstream gradient plus the cache, writes parameter gradients into a
:class:`ParamStore` and returns the gradient w.r.t. the input.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Iterable

import numpy as np

logger = logging.getLogger(__name__)

# Stand-in for -inf inside additive attention masks.
MASK_NEG = -1e30
_MASK_THRESHOLD = -1e29
LN_EPS = 1e-5
GRAD_CHECK_FLOOR = 1e-8
GRAD_CHECK_RANGE = 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or inf shows up where finite values are required."""


class ParamStore:
    """Named parameter arrays, their gradients and Adam moment buffers."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for name, p in self.params.items():
            out.params[name] = p.copy()
            out.grads[name] = self.grads[name].copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out

    def load_state(self, other: "ParamStore") -> None:
        """Overwrite values, moments and step counter in place from ``other``."""
        for name in self.params:
            self.params[name][...] = other.params[name]
            self.grads[name][...] = other.grads[name]
            self.m[name][...] = other.m[name]
            self.v[name][...] = other.v[name]
        self.step = other.step


# ---------------------------------------------------------------------------
# primitive layers


def linear_forward(x, W, b):
    return x @ W + b, x


def _col_sum(x2):
    # same trick as _row_mean, for the long leading axis
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def linear_backward(dout, x, W, store: ParamStore | None, w_name: str, b_name: str):
    din, dout_dim = W.shape
    x2 = x.reshape(-1, din)
    d2 = dout.reshape(-1, dout_dim)
    if store is not None:
        store.grads[w_name] += x2.T @ d2
        store.grads[b_name] += _col_sum(d2)
    return dout @ W.T


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0.0)


def _row_mean(x):
    # mat-vec is much faster than a reduction over a short trailing axis
    d = x.shape[-1]
    return x @ np.full((d, 1), 1.0 / d, dtype=x.dtype)


def layernorm_forward(x, g, b):
    xhat = x - _row_mean(x)
    inv = 1.0 / np.sqrt(_row_mean(np.square(xhat)) + LN_EPS)
    xhat *= inv
    out = xhat * g
    out += b
    return out, (xhat, inv)


def layernorm_backward(dout, cache, g, store: ParamStore | None, g_name: str, b_name: str):
    xhat, inv = cache
    d = xhat.shape[-1]
    if store is not None:
        store.grads[g_name] += _col_sum((dout * xhat).reshape(-1, d))
        store.grads[b_name] += _col_sum(dout.reshape(-1, d))
    dxhat = dout * g
    return inv * (dxhat - _row_mean(dxhat) - xhat * _row_mean(dxhat * xhat))


def _row_sum(x):
    return x @ np.ones((x.shape[-1], 1), dtype=x.dtype)


def _row_max(x):
    # elementwise maxima over columns beat a reduction over a short trailing axis
    m = x[..., 0].copy()
    for j in range(1, x.shape[-1]):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


def softmax(scores, axis=-1):
    if axis not in (-1, scores.ndim - 1):
        scores = np.moveaxis(scores, axis, -1)
        return np.moveaxis(softmax(scores), -1, axis)
    e = np.exp(scores - _row_max(scores))
    e /= _row_sum(e)
    return e


# ---------------------------------------------------------------------------
# attention


def prepare_mask(M, seq_len: int, dtype=np.float64) -> np.ndarray | None:
    """Validate an additive mask and swap -inf for the finite sentinel.

    Accepts ``None`` (no mask), an ``(S, S)`` mask shared by the batch or a
    ``(B, S, S)`` per-sample mask.
    """
    if M is None:
        return None
    M = np.asarray(M, dtype=np.float64)
    if M.shape[-2:] != (seq_len, seq_len):
        raise ValueError(f"mask shape {M.shape} does not match sequence length {seq_len}")
    M = np.where(np.isneginf(M), MASK_NEG, M)
    if np.any(M.max(axis=-1) <= _MASK_THRESHOLD):
        raise ValueError("attention mask has a fully masked row")
    return M.astype(dtype, copy=False)


def mhsa_forward(x, M, p: dict, prefix: str, n_heads: int, rows: slice | None = None):
    """Multi-head self attention ``softmax(QK^T/sqrt(d_k) + M) V`` with output projection.

    ``x`` is ``(B, S, D)``; ``M`` is already passed through :func:`prepare_mask`.
    With ``rows`` only those query positions are computed, giving ``(B, len(rows), D)``.
    """
    B, S, D = x.shape
    if D % n_heads:
        raise ValueError(f"width {D} not divisible by {n_heads} heads")
    dk = D // n_heads
    scale = 1.0 / math.sqrt(dk)

    W = np.concatenate([p[prefix + "Wq"], p[prefix + "Wk"], p[prefix + "Wv"]], axis=1)
    bias = np.concatenate([p[prefix + "bq"], np.zeros_like(p[prefix + "bq"]), p[prefix + "bv"]])
    qkv = x.reshape(-1, D) @ W
    qkv += bias
    # (3, B, H, S, dk) views of the fused projection
    q, k, v = qkv.reshape(B, S, 3, n_heads, dk).transpose(2, 0, 3, 1, 4)
    if rows is not None:
        q = q[:, :, rows]
        if M is not None:
            M = M[..., rows, :]
    scores = q @ k.transpose(0, 1, 3, 2)
    scores *= scale
    if M is not None:
        scores += M[:, None] if M.ndim == 3 else M
    attn = softmax(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, q.shape[2], D)
    out = ctx @ p[prefix + "Wo"] + p[prefix + "bo"]
    return out, (x, q, k, v, attn, ctx, scale, rows)


def mhsa_backward(dout, cache, p: dict, store: ParamStore | None, prefix: str):
    x, q, k, v, attn, ctx, scale, rows = cache
    B, S, D = x.shape
    n_heads, nq, dk = q.shape[1], q.shape[2], q.shape[3]
    dctx = linear_backward(dout, ctx, p[prefix + "Wo"], store, prefix + "Wo", prefix + "bo")
    dctx = dctx.reshape(B, nq, n_heads, dk).transpose(0, 2, 1, 3)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - _row_sum(dattn * attn))
    dscores *= scale
    dq = dscores @ k
    dk_ = dscores.transpose(0, 1, 3, 2) @ q

    dqkv = np.empty((B, S, 3, n_heads, dk), dtype=dq.dtype)
    if rows is None:
        dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
    else:
        dqkv[:, :, 0] = 0.0
        dqkv[:, rows, 0] = dq.transpose(0, 2, 1, 3)
    for i, g in ((1, dk_), (2, dv)):
        dqkv[:, :, i] = g.transpose(0, 2, 1, 3)
    dqkv = dqkv.reshape(B * S, 3 * D)
    if store is not None:
        dW = x.reshape(-1, D).T @ dqkv
        db = _col_sum(dqkv)
        for i, w in enumerate("qkv"):
            store.grads[prefix + "W" + w] += dW[:, i * D:(i + 1) * D]
            if w != "k":
                store.grads[prefix + "b" + w] += db[i * D:(i + 1) * D]
    W = np.concatenate([p[prefix + "Wq"], p[prefix + "Wk"], p[prefix + "Wv"]], axis=1)
    return (dqkv @ W.T).reshape(B, S, D)


def mhsa(E, M, p: dict, n_heads: int = 1, prefix: str = "", return_weights: bool = False):
    """Single-sequence convenience wrapper: ``E`` is ``(S, D)`` and ``M`` is ``(S, S)``.

    With ``return_weights`` the per-head attention matrix ``(H, S, S)`` is
    returned as well.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError("mhsa expects a 2-D token matrix")
    if p[prefix + "Wq"].shape[0] != E.shape[1]:
        raise ValueError("token width does not match projection width")
    Mp = prepare_mask(M, E.shape[0])
    out, cache = mhsa_forward(E[None], Mp, p, prefix, n_heads)
    if return_weights:
        return out[0], cache[4][0]
    return out[0]


def ffn_forward(x, p: dict, prefix: str):
    h_pre = x @ p[prefix + "W1"] + p[prefix + "b1"]
    h = relu_forward(h_pre)
    out = h @ p[prefix + "W2"] + p[prefix + "b2"]
    return out, (x, h_pre, h)


def ffn_backward(dout, cache, p: dict, store: ParamStore | None, prefix: str):
    x, h_pre, h = cache
    dh = linear_backward(dout, h, p[prefix + "W2"], store, prefix + "W2", prefix + "b2")
    dh = relu_backward(dh, h_pre)
    return linear_backward(dh, x, p[prefix + "W1"], store, prefix + "W1", prefix + "b1")


def ffn(tokens, p: dict, prefix: str = ""):
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[-1] != p[prefix + "W1"].shape[0]:
        raise ValueError("token width does not match feed-forward input width")
    out, _ = ffn_forward(tokens, p, prefix)
    return out


# ---------------------------------------------------------------------------
# pre-norm attention block


def block_param_shapes(d_model: int, d_ff: int) -> dict[str, tuple]:
    shapes = {}
    for ln in ("ln1.", "ln2."):
        shapes[ln + "g"] = (d_model,)
        shapes[ln + "b"] = (d_model,)
    for w in ("Wq", "Wk", "Wv", "Wo"):
        shapes["attn." + w] = (d_model, d_model)
        if w != "Wk":  # a key bias shifts each score row uniformly, which softmax ignores
            shapes["attn.b" + w[1].lower()] = (d_model,)
    shapes["ffn.W1"] = (d_model, d_ff)
    shapes["ffn.b1"] = (d_ff,)
    shapes["ffn.W2"] = (d_ff, d_model)
    shapes["ffn.b2"] = (d_model,)
    return shapes


def init_block(store: ParamStore, prefix: str, d_model: int, d_ff: int, rng: np.random.Generator):
    for name, shape in block_param_shapes(d_model, d_ff).items():
        full = prefix + name
        if name.endswith(".g"):
            store.add(full, np.ones(shape))
        elif len(shape) == 2:
            store.add(full, rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape))
        else:
            store.add(full, np.zeros(shape))


def block_forward(x, M, p: dict, prefix: str, n_heads: int, rows: slice | None = None):
    """Pre-norm block; with ``rows`` only those output tokens are produced (all tokens still act as keys)."""
    h1, c_ln1 = layernorm_forward(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    a, c_attn = mhsa_forward(h1, M, p, prefix + "attn.", n_heads, rows)
    x2 = (x if rows is None else x[:, rows]) + a
    h2, c_ln2 = layernorm_forward(x2, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    f, c_ffn = ffn_forward(h2, p, prefix + "ffn.")
    return x2 + f, (c_ln1, c_attn, c_ln2, c_ffn, rows)


def block_backward(dout, cache, p: dict, store: ParamStore | None, prefix: str):
    c_ln1, c_attn, c_ln2, c_ffn, rows = cache
    dh2 = ffn_backward(dout, c_ffn, p, store, prefix + "ffn.")
    dx2 = dout + layernorm_backward(dh2, c_ln2, p[prefix + "ln2.g"], store, prefix + "ln2.g", prefix + "ln2.b")
    dh1 = mhsa_backward(dx2, c_attn, p, store, prefix + "attn.")
    dx = layernorm_backward(dh1, c_ln1, p[prefix + "ln1.g"], store, prefix + "ln1.g", prefix + "ln1.b")
    if rows is None:
        return dx + dx2
    dx[:, rows] += dx2
    return dx


# ---------------------------------------------------------------------------
# optimisation utilities


def _stores(stores) -> list[ParamStore]:
    return [stores] if isinstance(stores, ParamStore) else list(stores)


def global_grad_norm(stores) -> float:
    total = 0.0
    for s in _stores(stores):
        for g in s.grads.values():
            total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_global_norm(stores, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the scale factor applied (1.0 when nothing was clipped).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(stores)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for s in _stores(stores):
        for g in s.grads.values():
            g *= scale
    return scale


def adam_step(store: ParamStore, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place; refuses non-finite gradients."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name!r}; Adam step aborted")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def finite_difference(f: Callable[[ParamStore], float], store: ParamStore, eps: float = 1e-5,
                      names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. every coordinate of ``store``."""
    out = {}
    for name in (store.names() if names is None else names):
        p = store.params[name]
        flat = p.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(store)
            flat[i] = orig - eps
            fm = f(store)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]")
            g[i] = (fp - fm) / (2.0 * eps)
        out[name] = g.reshape(p.shape)
    return out


def grad_check(f: Callable[[ParamStore], float], store: ParamStore, eps: float = 1e-5,
               names: Iterable[str] | None = None) -> float:
    """Worst relative error between the analytic and central-difference gradient.

    ``f(store)`` must return the scalar loss and leave the analytic gradient
    in ``store.grads`` (it is responsible for zeroing them first).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    loss = f(store)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss at the base point")
    analytic = {k: g.copy() for k, g in store.grads.items()}
    numeric = finite_difference(f, store, eps, names)
    for name in numeric:
        if not np.all(np.isfinite(analytic[name])):
            raise NonFiniteError(f"non-finite analytic gradient in {name}")
    # entries far below the largest gradient sit at the central-difference
    # roundoff floor, so they are measured against that absolute scale
    scale = max([float((np.abs(analytic[k]) + np.abs(g)).max(initial=0.0)) for k, g in numeric.items()] or [0.0])
    floor = max(GRAD_CHECK_FLOOR, GRAD_CHECK_RANGE * scale)
    worst = 0.0
    for name, gn in numeric.items():
        ga = analytic[name]
        rel = np.abs(ga - gn) / np.maximum(floor, np.abs(ga) + np.abs(gn))
        if rel.size:
            worst = max(worst, float(rel.max()))
    logger.debug("grad_check: worst relative error %.3e", worst)
    return worst
