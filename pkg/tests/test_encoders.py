import math

import numpy as np
import pytest

from hardcurric import encoders as E
from hardcurric import numkit as nk
from hardcurric.errors import ShapeError

from conftest import encode_reference

DIMS = {"a": 6, "t": 5, "v": 7}


def _enc_params(seed, d=4, tokens=3):
    return E.init_encoders(nk.Rng(seed), DIMS, d, tokens)


def _fusion(rng, d):
    return {k: rng.normal((d, d)) for k in ("fuse.Wq", "fuse.Wk", "fuse.Wv")}


def test_missing_with_zero_weights_is_zero():
    P = {k: np.zeros_like(v) for k, v in _enc_params(0).items()}
    f = E.encode(None, "a", nk.leaves(P))
    assert f.shape == (3, 4) and not np.any(f.data)


def test_missing_equals_zero_vector_bitwise():
    P = nk.leaves(_enc_params(1))
    assert E.encode(None, "t", P).data.tobytes() == E.encode(np.zeros(5), "t", P).data.tobytes()


def test_encode_deterministic_in_eval_mode(rng):
    P, x = nk.leaves(_enc_params(2)), rng.normal(6)
    assert np.array_equal(E.encode(x, "a", P).data, E.encode(x, "a", P).data)


@pytest.mark.parametrize("m", E.MODALITIES)
def test_encode_matches_straight_line_reference(m, rng):
    # random biases so every term of the reference is exercised
    P = {k: (rng.normal(v.shape) if k.endswith(("b1", "bf1", "bf2")) else v) for k, v in _enc_params(3).items()}
    x = rng.normal(DIMS[m])
    names = ("W1", "b1", "Wq", "Wk", "Wv", "Wo", "Wf1", "bf1", "Wf2", "bf2")
    ref = encode_reference(x, *(P[f"enc.{m}.{n}"] for n in names))
    np.testing.assert_allclose(E.encode(x, m, nk.leaves(P)).data, ref, rtol=0, atol=1e-10)


def test_encode_batch_equals_rows(rng):
    P = nk.leaves(_enc_params(4))
    X = rng.normal((5, 7))
    batch = E.encode(X, "v", P).data
    for i in range(5):
        np.testing.assert_allclose(batch[i], E.encode(X[i], "v", P).data, rtol=0, atol=1e-13)


def test_encode_wrong_dim():
    with pytest.raises(ShapeError):
        E.encode(np.ones(9), "a", nk.leaves(_enc_params(0)))


def test_pool_examples(rng):
    assert np.array_equal(E.pool(np.array([[1.0, 2.0, 3.0]])).data, [1.0, 2.0, 3.0])
    assert np.array_equal(E.pool(np.array([[1.0, 1.0], [3.0, 3.0]])).data, [2.0, 2.0])
    f = rng.normal((5, 3))
    ref = [sum(f[i, c] for i in range(5)) / 5 for c in range(3)]
    np.testing.assert_allclose(E.pool(f).data, ref, rtol=0, atol=1e-15)


def test_reconstruct_linear_examples(rng):
    d = 2
    x = {m: rng.normal(DIMS[m]) for m in E.MODALITIES}
    P = {}
    for m in E.MODALITIES:
        P[f"rec.{m}.W"] = np.zeros((3 * d, DIMS[m]))
        P[f"rec.{m}.b"] = x[m]
    f = {m: rng.normal(d) for m in E.MODALITIES}
    out = E.reconstruct_linear(f["a"], f["t"], f["v"], nk.leaves(P))
    for m in E.MODALITIES:
        assert np.array_equal(out[m].data, x[m])
    # zero input gives the bias for any weights
    P = {**P, **{f"rec.{m}.W": rng.normal((3 * d, DIMS[m])) for m in E.MODALITIES}}
    out = E.reconstruct_linear(np.zeros(d), np.zeros(d), np.zeros(d), nk.leaves(P))
    for m in E.MODALITIES:
        assert np.array_equal(out[m].data, x[m])
    # scalar-loop oracle
    out = E.reconstruct_linear(f["a"], f["t"], f["v"], nk.leaves(P))
    joint = list(f["a"]) + list(f["t"]) + list(f["v"])
    for m in E.MODALITIES:
        W, b = P[f"rec.{m}.W"], P[f"rec.{m}.b"]
        ref = [sum(joint[i] * W[i, j] for i in range(3 * d)) + b[j] for j in range(DIMS[m])]
        np.testing.assert_allclose(out[m].data, ref, rtol=0, atol=1e-12)


def test_cross_attention_singleton_and_duplicates(rng):
    d = 3
    F = _fusion(rng, d)
    q, kv = rng.normal((1, d)), rng.normal((1, d))
    np.testing.assert_allclose(E.cross_attention(q, kv, nk.leaves(F)).data, kv @ F["fuse.Wv"], rtol=0, atol=1e-15)
    tok = rng.normal(d)
    kv = np.tile(tok, (4, 1))
    out = E.cross_attention(rng.normal((4, d)), kv, nk.leaves(F)).data
    np.testing.assert_allclose(out, np.tile(tok @ F["fuse.Wv"], (4, 1)), rtol=0, atol=1e-13)


def test_cross_attention_explicit_loop_oracle(rng):
    d, L = 5, 4
    F = _fusion(rng, d)
    q, kv = rng.normal((L, d)), rng.normal((L, d))
    Q, K, V = q @ F["fuse.Wq"], kv @ F["fuse.Wk"], kv @ F["fuse.Wv"]
    ref = np.zeros((L, d))
    for i in range(L):
        s = [sum(Q[i, c] * K[j, c] for c in range(d)) / math.sqrt(d) for j in range(L)]
        mx = max(s)
        e = [math.exp(v - mx) for v in s]
        for j in range(L):
            ref[i] += e[j] / sum(e) * V[j]
    np.testing.assert_allclose(E.cross_attention(q, kv, nk.leaves(F)).data, ref, rtol=0, atol=1e-10)


def test_cross_attention_width_mismatch(rng):
    with pytest.raises(ShapeError):
        E.cross_attention(np.ones((2, 3)), np.ones((2, 4)), nk.leaves(_fusion(rng, 3)))


def test_fuse_pair_symmetric_exactly():
    for trial in range(100):
        r = nk.Rng(trial)
        F = nk.leaves(_fusion(r, 4))
        p, q = r.normal((3, 4)), r.normal((3, 4))
        assert E.fuse_pair(p, q, F).data.tobytes() == E.fuse_pair(q, p, F).data.tobytes()


def test_fuse_pair_zero_params_and_composition(rng):
    zero = nk.leaves({k: np.zeros((4, 4)) for k in ("fuse.Wq", "fuse.Wk", "fuse.Wv")})
    assert not np.any(E.fuse_pair(rng.normal((3, 4)), rng.normal((3, 4)), zero).data)
    F = nk.leaves(_fusion(rng, 4))
    p, q = rng.normal((3, 4)), rng.normal((3, 4))
    ref = E.cross_attention(p, q, F).data + E.cross_attention(q, p, F).data
    np.testing.assert_array_equal(E.fuse_pair(p, q, F).data, ref)


def test_classify_examples(rng):
    C, d = 4, 3
    b = np.eye(C)[0]
    P = nk.leaves({"cls.x.W": np.zeros((d, C)), "cls.x.b": b})
    assert np.array_equal(E.classify(rng.normal(d), P, "cls.x").data, b)
    P = nk.leaves({"cls.x.W": np.eye(d, C), "cls.x.b": np.zeros(C)})
    assert np.array_equal(E.classify(np.eye(d)[1], P, "cls.x").data, np.eye(d, C)[1])
    W, bb, f = rng.normal((d, C)), rng.normal(C), rng.normal(d)
    ref = [sum(f[i] * W[i, j] for i in range(d)) + bb[j] for j in range(C)]
    out = E.classify(f, nk.leaves({"cls.x.W": W, "cls.x.b": bb}), "cls.x").data
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        E.classify(np.ones(d + 1), nk.leaves({"cls.x.W": W, "cls.x.b": bb}), "cls.x")


def test_encoder_gradients(rng):
    P = _enc_params(5)
    x = rng.normal((4, 6))
    y = np.array([0, 1, 2, 1])
    head = {"cls.a.W": rng.normal((4, 3)), "cls.a.b": np.zeros(3)}
    loss = lambda lv: nk.cross_entropy(E.classify(E.pool(E.encode(x, "a", lv)), lv, "cls.a"), y)
    assert nk.grad_check(loss, {**P, **head}, rng=nk.Rng(2)) < 1e-5


def test_initialiser_shapes():
    P = E.init_encoder(nk.Rng(0), "enc.a", 10, d=8, tokens=4)
    assert P["enc.a.W1"].shape == (10, 32) and P["enc.a.Wf1"].shape == (8, 32)
    R = E.init_retrieval_encoders(nk.Rng(0), DIMS, d_r=6)
    assert R["ret.v.W1"].shape == (7, 6) and R["ret.v.W2"].shape == (6, 6)
    H = E.init_heads(nk.Rng(0), 8, 4)
    assert H["cls.joint.W"].shape == (24, 4) and H["cls.t.W"].shape == (8, 4)
    A = E.init_autoencoders(nk.Rng(0), DIMS, 8, 16)
    assert A["ae.t.W1"].shape == (24, 16) and A["ae.t.W2"].shape == (16, 5)
