import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from umc import nn
from umc.damage import DetectabilityFlags
from umc.policy import (HALF_LOG_2PI_E, MlpActor, MlpCritic, ModelConfig, TransformerActor, TransformerCritic,
                        build_mask, detect_and_mask, detokenize, encode, gaussian_entropy, gaussian_log_prob,
                        load_checkpoint, make_actor_critic, full_mlp_config, full_transformer_config,
                        param_count, save_checkpoint, tokenize)

N = 6


def tcfg(**kw):
    base = dict(n_joints=N, d_model=8, n_layers=2, n_heads=2, d_ff=16, dtype="float64")
    base.update(kw)
    return ModelConfig("transformer", **base)


def mcfg(**kw):
    base = dict(n_joints=N, mlp_hidden=(16, 16), dtype="float64")
    base.update(kw)
    return ModelConfig("mlp", **base)


def randomize(store, rng, scale=0.5):
    for p in store.params.values():
        p[...] = rng.normal(0.0, scale, p.shape)


# -- detector ------------------------------------------------------------------


def test_detect_no_flags_is_identity(rng):
    O = rng.normal(size=(N, 3))
    V, M, F = detect_and_mask(O, DetectabilityFlags.none())
    np.testing.assert_array_equal(V, O)
    np.testing.assert_array_equal(M, np.zeros((N + 1, N + 1)))
    np.testing.assert_array_equal(F, [-1, -1, -1])


def test_detect_sensor_failed_joint():
    O = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
    V, M, F = detect_and_mask(O, DetectabilityFlags(frozenset({0}), False))
    np.testing.assert_array_equal(V, [[0, 0, 0], [0.4, 0.5, 0.6]])
    assert M.shape == (3, 3)
    assert np.all(np.isneginf(M[:, 0])) and np.all(M[:, 1:] == 0)
    np.testing.assert_array_equal(F, [-1, -1, -1])
    p = {k: np.eye(1) for k in ("Wq", "Wk", "Wv", "Wo")} | {k: np.zeros(1) for k in ("bq", "bv", "bo")}
    _, w = nn.mhsa(np.array([[1.0], [2.0], [3.0]]), M, p, return_weights=True)
    assert np.all(w[..., 0] < 1e-12)


def test_detect_detected_joint_damage():
    O = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])
    V, M, F = detect_and_mask(O, DetectabilityFlags(frozenset({1}), True))
    np.testing.assert_array_equal(V[1], 0.0)
    np.testing.assert_array_equal(V[0], O[0])
    assert np.all(np.isneginf(M[:, 1]))
    np.testing.assert_array_equal(F, [1, 1, 1])


def test_detect_rejects_all_masked():
    with pytest.raises(ValueError):
        detect_and_mask(np.zeros((2, 3)), DetectabilityFlags(frozenset({0, 1}), True))


@given(st.lists(st.booleans(), min_size=2, max_size=8))
def test_mask_matrix_invariants(bits):
    masked = np.array(bits)
    if masked.all():
        masked[0] = False
    M = build_mask(masked[None])[0]
    n = len(masked)
    for j in range(n + 1):
        col = M[:, j]
        if j < n and masked[j]:
            assert np.all(col == nn.MASK_NEG)
        else:
            assert np.all(col == 0)
    assert np.all(M.max(axis=1) == 0)


def test_row_column_mode_masks_rows_too():
    M = build_mask(np.array([[True, False, False]]), "row_column")[0]
    assert np.all(M[0, :3] == nn.MASK_NEG) and M[0, 3] == 0.0
    assert np.all(M[:, 0] == nn.MASK_NEG)


def test_mask_value_is_configurable():
    V, _, _ = detect_and_mask(np.ones((3, 3)), DetectabilityFlags(frozenset({2}), False), mask_value=-100.0)
    np.testing.assert_array_equal(V[2], [-100, -100, -100])


# -- tokenizer / encoder / detokenizer ------------------------------------------


def test_tokenize_zero_params():
    p = {"tok.W": np.zeros((3, 3, 4)), "tok.b": np.zeros((3, 4)), "pos": np.zeros((3, 4))}
    np.testing.assert_array_equal(tokenize(np.ones((3, 3)), p), 0.0)


def test_tokenize_hand_example():
    W = np.zeros((2, 3, 2))
    W[0] = [[1, 0], [0, 1], [0, 0]]
    p = {"tok.W": W, "tok.b": np.zeros((2, 2)), "pos": np.array([[5.0, 5.0], [0.0, 0.0]])}
    E = tokenize(np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 0.0]]), p)
    np.testing.assert_allclose(E[0], [5.1, 5.2], atol=1e-15)


def test_tokenize_row_count_mismatch(rng):
    a = TransformerActor(tcfg(), rng)
    with pytest.raises(ValueError):
        tokenize(np.zeros((N, 3)), a.store.params)


def test_tokenizer_disentanglement(rng):
    a = TransformerActor(tcfg(), rng)
    p = a.store.params
    X = rng.normal(size=(N + 1, 3))
    E0 = tokenize(X, p)
    for j in (0, 3, N):
        X2 = X.copy()
        X2[j] += 5.0
        changed = np.abs(tokenize(X2, p) - E0).max(axis=1) > 0
        assert changed.tolist() == [i == j for i in range(N + 1)]
        p2 = {k: v.copy() for k, v in p.items()}
        p2["tok.W"][j] += 1.0
        changed = np.abs(tokenize(X, p2) - E0).max(axis=1) > 0
        assert changed.tolist() == [i == j for i in range(N + 1)]


def test_encode_without_blocks_is_identity(rng):
    cfg = tcfg(n_layers=0)
    a = TransformerActor(cfg, rng)
    E = rng.normal(size=(N + 1, 8))
    np.testing.assert_array_equal(encode(E, None, a.store.params, cfg), E)


def test_encode_masked_column_isolation(rng):
    cfg = tcfg()
    a = TransformerActor(cfg, rng)
    randomize(a.store, rng)
    j = 2
    M = build_mask(np.eye(N, dtype=bool)[j][None])[0]
    E = rng.normal(size=(N + 1, 8))
    R0 = encode(E, M, a.store.params, cfg)
    E2 = E.copy()
    E2[j] += rng.normal(0, 1e3, 8)
    R1 = encode(E2, M, a.store.params, cfg)
    others = [i for i in range(N + 1) if i != j]
    assert np.abs(R1[others] - R0[others]).max() < 1e-9


def test_encode_zero_mask_equals_unmasked(rng):
    cfg = tcfg()
    a = TransformerActor(cfg, rng)
    E = rng.normal(size=(N + 1, 8))
    np.testing.assert_array_equal(encode(E, np.zeros((N + 1, N + 1)), a.store.params, cfg),
                                  encode(E, None, a.store.params, cfg))


def test_detokenize_examples(rng):
    p = {"detok.W": np.zeros((2, 1)), "detok.b": np.array([0.5, -1.5])}
    np.testing.assert_array_equal(detokenize(rng.normal(size=(3, 1)), p), [0.5, -1.5])
    p = {"detok.W": np.array([[2.0]]), "detok.b": np.array([1.0])}
    assert detokenize(np.array([[3.0], [9.0]]), p)[0] == 7.0


def test_detokenize_drops_flag_token(rng):
    a = TransformerActor(tcfg(), rng)
    randomize(a.store, rng)
    R = rng.normal(size=(N + 1, 8))
    R2 = R.copy()
    R2[N] += 100.0
    np.testing.assert_array_equal(detokenize(R, a.store.params), detokenize(R2, a.store.params))
    with pytest.raises(ValueError):
        detokenize(R[:N], a.store.params)


# -- actors and critics ---------------------------------------------------------


def obs_batch(rng, B=4):
    return rng.normal(size=(B, N, 3))


@pytest.mark.parametrize("cfg", [tcfg(), tcfg(dtype="float32"), mcfg()])
def test_actor_forward_is_pure(rng, cfg):
    actor, _ = make_actor_critic(cfg, 3)
    obs = obs_batch(rng)
    masked = np.zeros((4, N), bool)
    det = np.zeros(4, bool)
    a = actor.forward(obs, masked, det)
    b = actor.forward(obs.copy(), masked, det)
    assert a.shape == (4, N)
    np.testing.assert_array_equal(a, b)


@given(seed=st.integers(0, 10**6), j=st.integers(0, N - 1), detected=st.booleans(),
       magnitude=st.sampled_from([1.0, 1e3]), mask_value=st.sampled_from([0.0, -100.0, 100.0]))
def test_transformer_isolation_of_masked_joint(seed, j, detected, magnitude, mask_value):
    rng = np.random.default_rng(seed)
    actor = TransformerActor(tcfg(), rng)
    randomize(actor.store, rng)
    obs = obs_batch(rng, 2)
    masked = np.zeros((2, N), bool)
    masked[:, j] = True
    base = actor.forward(obs, masked, np.array([detected] * 2), mask_value)
    obs2 = obs.copy()
    obs2[:, j] += rng.normal(0, magnitude, (2, 3))
    out = actor.forward(obs2, masked, np.array([detected] * 2), mask_value)
    assert np.abs(out - base).max() < 1e-9


def test_mlp_isolation_is_exact(rng):
    actor = MlpActor(mcfg(), rng)
    obs = obs_batch(rng)
    masked = np.zeros((4, N), bool)
    masked[:, 1] = True
    obs2 = obs.copy()
    obs2[:, 1] = 1e6
    np.testing.assert_array_equal(actor.forward(obs, masked, np.zeros(4, bool)),
                                  actor.forward(obs2, masked, np.zeros(4, bool)))


@pytest.mark.parametrize("cfg", [tcfg(), mcfg()])
def test_flag_reaches_the_policy(rng, cfg):
    actor, _ = make_actor_critic(cfg, 5)
    randomize(actor.store, rng)
    obs = obs_batch(rng, 1)
    masked = np.zeros((1, N), bool)
    a = actor.forward(obs, masked, np.array([False]))
    b = actor.forward(obs, masked, np.array([True]))
    assert np.abs(a - b).max() > 0


def test_mlp_input_layout(rng):
    cfg = mcfg(obs_scale=(1.0, 1.0, 1.0))
    actor = MlpActor(cfg, rng)
    obs = obs_batch(rng, 1)
    masked = np.zeros((1, N), bool)
    masked[0, 2] = True
    x = actor.inputs(obs, masked, np.array([True]), mask_value=-100.0)
    assert x.shape == (1, 3 * N + 3)
    np.testing.assert_array_equal(x[0, 6:9], [-100.0, -100.0, -100.0])
    np.testing.assert_array_equal(x[0, -3:], [1.0, 1.0, 1.0])
    clean = actor.inputs(obs, np.zeros((1, N), bool), np.array([False]))
    np.testing.assert_array_equal(clean[0], np.concatenate([obs[0].ravel(), [-1.0, -1.0, -1.0]]))


def test_mlp_without_damage_is_plain_mlp(rng):
    cfg = mcfg(obs_scale=(1.0, 1.0, 1.0))
    actor = MlpActor(cfg, rng)
    obs = obs_batch(rng, 3)
    x = np.concatenate([obs, -np.ones((3, 1, 3))], axis=1).reshape(3, -1)
    p = actor.store.params
    h = np.maximum(x @ p["mlp0.W"] + p["mlp0.b"], 0)
    h = np.maximum(h @ p["mlp1.W"] + p["mlp1.b"], 0)
    ref = h @ p["mlp2.W"] + p["mlp2.b"]
    np.testing.assert_allclose(actor.forward(obs, np.zeros((3, N), bool), np.zeros(3, bool)), ref, atol=1e-12)


def test_masked_slots_hold_exact_mask_value_after_scaling(rng):
    actor = TransformerActor(tcfg(), rng)
    masked = np.zeros((1, N), bool)
    masked[0, 4] = True
    X, _ = actor.inputs(obs_batch(rng, 1), masked, np.array([True]), mask_value=100.0)
    np.testing.assert_array_equal(X[0, 4], [100.0, 100.0, 100.0])
    np.testing.assert_array_equal(X[0, N], [1.0, 1.0, 1.0])


@pytest.mark.parametrize("critic_cls,cfg", [(TransformerCritic, tcfg()), (MlpCritic, mcfg())])
def test_critic_is_deterministic(rng, critic_cls, cfg):
    critic = critic_cls(cfg, rng)
    obs = obs_batch(rng)
    v = critic.forward(obs)
    assert v.shape == (4,)
    np.testing.assert_array_equal(v, critic.forward(obs))


def test_critic_value_equals_full_trunk_readout(rng):
    cfg = tcfg()
    critic = TransformerCritic(cfg, rng)
    randomize(critic.store, rng)
    obs = rng.normal(size=(5, N, 3))
    p = critic.store.params
    X = np.concatenate([obs * np.array(cfg.obs_scale), -np.ones((5, 1, 3))], axis=1)
    R = encode(tokenize(X, p), None, p, cfg)
    np.testing.assert_allclose(critic.forward(obs), R[:, -1] @ p["value.W"] + p["value.b"], rtol=0, atol=1e-12)


def test_critic_zero_head_returns_bias(rng):
    critic = TransformerCritic(tcfg(), rng)
    critic.store["value.W"][...] = 0.0
    critic.store["value.b"][...] = 0.75
    np.testing.assert_array_equal(critic.forward(obs_batch(rng)), 0.75)


def test_critic_rejects_bad_shape(rng):
    with pytest.raises(ValueError):
        TransformerCritic(tcfg(), rng).forward(np.zeros((2, N + 1, 3)))


# -- counts, distribution and checkpoints -----------------------------------------


def test_parameter_counts_near_reference_sizes():
    t = param_count(TransformerActor(full_transformer_config()).store)
    m = param_count(MlpActor(full_mlp_config()).store)
    assert abs(t - 366_164) / 366_164 <= 0.10
    assert m == 342_040
    assert abs(m - 345_100) / 345_100 <= 0.05
    assert param_count(nn.ParamStore()) == 0


def test_gaussian_entropy_closed_form():
    assert abs(gaussian_entropy(np.zeros(4)) - 1.4189385) < 1e-7
    assert abs(gaussian_entropy(np.zeros(1)) - HALF_LOG_2PI_E) < 1e-15
    assert gaussian_entropy(np.full(3, np.log(2.0))) - gaussian_entropy(np.zeros(3)) == pytest.approx(np.log(2.0))


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=5), st.integers(0, 1000))
def test_gaussian_log_prob_matches_density(log_std, seed):
    rng = np.random.default_rng(seed)
    log_std = np.array(log_std)
    mu = rng.normal(size=(2, len(log_std)))
    a = rng.normal(size=mu.shape)
    # multivariate normal log-density with an explicit diagonal covariance
    cov = np.diag(np.exp(2 * log_std))
    _, logdet = np.linalg.slogdet(2 * np.pi * cov)
    r = a - mu
    ref = -0.5 * np.einsum("bi,bi->b", r, np.linalg.solve(cov, r.T).T) - 0.5 * logdet
    np.testing.assert_allclose(gaussian_log_prob(a, mu, log_std), ref, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("cfg", [tcfg(), tcfg(dtype="float32"), mcfg()])
def test_checkpoint_round_trip_is_bitwise(tmp_path, rng, cfg):
    actor, critic = make_actor_critic(cfg, 11)
    randomize(actor.store, rng)
    actor.store.m["log_std"][:] = 0.25
    actor.store.step = 7
    path = save_checkpoint(tmp_path / "c.npz", actor, critic, {"phase": "stage1", "seed": 11})
    a2, c2, meta = load_checkpoint(path)
    assert meta["phase"] == "stage1" and meta["seed"] == 11 and a2.cfg == cfg
    for s1, s2 in ((actor.store, a2.store), (critic.store, c2.store)):
        assert s1.names() == s2.names()
        for k in s1.names():
            assert s1[k].dtype == s2[k].dtype
            assert s1[k].tobytes() == s2[k].tobytes()
            assert s1.m[k].tobytes() == s2.m[k].tobytes()
        assert s1.step == s2.step


def test_checkpoint_version_is_checked(tmp_path):
    actor, critic = make_actor_critic(tcfg(), 0)
    path = save_checkpoint(tmp_path / "c.npz", actor, critic)
    data = dict(np.load(path))
    meta = json.loads(bytes(data["__meta__"]).decode())
    meta["version"] = 99
    data["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "old.npz", **data)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "old.npz")


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig("rnn")
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(dtype="float16")
