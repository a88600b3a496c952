import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hardcurric import curriculum as cu
from hardcurric import numkit as nk
from hardcurric.data import CONDITIONS, available
from hardcurric.errors import ContractError, DomainError, IntegrityError
from hardcurric.featstore import FeatureStore, topk
from hardcurric.hardness import HardnessRecord

from test_featstore import brute_topk, IP, L2


def _store(seed, n=50, dims=(4, 6, 5), metrics=None):
    r = nk.Rng(seed)
    feats = {m: r.normal((n, d)) for m, d in zip("atv", dims)}
    return FeatureStore(feats, r.integers(3, n), metrics or {"a": L2, "t": IP, "v": L2})


def _query(store, i):
    return {m: store.features[m][i] for m in "atv"}


def brute_rank(store, anchor, condition, cands):
    """Rooted-L2 mean over available modalities with explicit loops, ties to ascending id."""
    q = _query(store, anchor)
    out = []
    for c in cands:
        ds = []
        for m in available(condition):
            row = store.features[m][c].astype(np.float64)
            ds.append(math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(row, q[m]))))
        out.append((sum(ds) / len(ds), c))
    return [c for _, c in sorted(out)]


# -- retrieval ----------------------------------------------------------------

def test_single_modality_is_topk_minus_self():
    s = _store(0)
    idx = cu.build_indices(s)
    for anchor in range(10):
        got = cu.retrieve_candidates(_query(s, anchor), "v", idx, 5, exclude=anchor)
        top = [i for i, _ in topk(idx["v"], s.matrix("v")[anchor], 5)]
        assert got == sorted(set(top) - {anchor})


def test_identical_modalities_dedupe():
    s = _store(1, dims=(5, 5, 5))
    s = FeatureStore({"a": s.features["a"], "t": s.features["a"], "v": s.features["v"]}, s.labels,
                     {"a": L2, "t": L2, "v": L2})
    idx = cu.build_indices(s)
    for anchor in range(10):
        assert len(cu.retrieve_candidates(_query(s, anchor), "at", idx, 5)) <= 5


def test_union_matches_brute_force_scan():
    for seed in range(10):
        s = _store(seed)
        idx = cu.build_indices(s)
        for anchor, cond in ((0, "at"), (7, "tv"), (20, "av")):
            want = set()
            for m in available(cond):
                want.update(brute_topk(s.matrix(m), s.matrix(m)[anchor], 5, s.metrics[m]))
            want.discard(anchor)
            assert cu.retrieve_candidates(_query(s, anchor), cond, idx, 5, exclude=anchor) == sorted(want)


def test_retrieval_needs_a_modality():
    s = _store(0)
    with pytest.raises(ContractError):
        cu.retrieve_candidates(_query(s, 0), "", cu.build_indices(s), 5)


def test_zero_query_under_inner_product_is_handled():
    s = _store(0)
    q = _query(s, 0)
    q["t"] = np.zeros_like(q["t"])
    assert len(cu.retrieve_candidates(q, "t", cu.build_indices(s), 5)) == 5


# -- similarity -----------------------------------------------------------------

def test_integrated_similarity_examples():
    feats = {"a": np.array([[0.0, 0.0], [1.0, 0.0]]), "t": np.array([[0.0], [3.0]]), "v": np.zeros((2, 2))}
    s = FeatureStore(feats, [0, 1])
    q = _query(s, 0)
    assert cu.integrated_similarity(q, 1, "at", s) == 2.0
    assert cu.integrated_similarity(q, 0, "at", s) == 0.0
    with pytest.raises(IntegrityError):
        cu.integrated_similarity(q, 2, "at", s)


def test_integrated_similarity_scalar_loop():
    s = _store(3)
    q = _query(s, 4)
    for c in (1, 9, 30):
        ds = [math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(s.features[m][c], q[m]))) for m in "atv"]
        assert abs(cu.integrated_similarity(q, c, "atv", s) - sum(ds) / 3) < 1e-12


# -- dynamic k --------------------------------------------------------------------

def test_dynamic_k_examples():
    assert cu.dynamic_k(0.5, 5) == 3
    assert cu.dynamic_k(0.9608, 5) == 5
    assert cu.dynamic_k(0.01, 5) == 1
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            cu.dynamic_k(bad, 5)


def test_dynamic_k_dense_grid():
    for k in range(1, 12):
        for h in np.linspace(1e-9, 1 - 1e-9, 2001):
            kp = cu.dynamic_k(float(h), k)
            assert kp == math.ceil(h * k) and 1 <= kp <= k


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-9, 1 - 1e-9), st.floats(1e-9, 1 - 1e-9), st.integers(1, 20))
def test_dynamic_k_monotone(h1, h2, k):
    lo, hi = sorted((h1, h2))
    assert cu.dynamic_k(lo, k) <= cu.dynamic_k(hi, k)


# -- curricula --------------------------------------------------------------------

def test_minimum_support_is_the_nearest():
    s = _store(5)
    idx = cu.build_indices(s)
    for anchor in range(15):
        c = cu.build_curriculum(anchor, _query(s, anchor), "a", 1e-9, s, idx, 5)
        others = [i for i in range(len(s)) if i != anchor]
        assert c.supports == (brute_rank(s, anchor, "a", others)[0],)


def test_tiny_database_truncates_with_flag():
    s = _store(6, n=3)
    c = cu.build_curriculum(0, _query(s, 0), "atv", 0.99, s, cu.build_indices(s), 5)
    assert len(c.supports) <= 2 and c.short and c.k_prime == 5


def test_ranking_matches_brute_force():
    for seed in range(5):
        s = _store(seed)
        idx = cu.build_indices(s)
        for anchor in range(0, 50, 7):
            cond = CONDITIONS[anchor % 6]
            c = cu.build_curriculum(anchor, _query(s, anchor), cond, 0.999, s, idx, 5)
            union = cu.retrieve_candidates(_query(s, anchor), cond, idx, 5, exclude=anchor)
            assert list(c.supports) == brute_rank(s, anchor, cond, union)[:5]


def test_prefix_property_and_self_exclusion():
    s = _store(7)
    idx = cu.build_indices(s)
    for anchor in range(50):
        cond = CONDITIONS[anchor % 6]
        prev = ()
        for h in np.linspace(0.01, 0.99, 12):
            sup = cu.build_curriculum(anchor, _query(s, anchor), cond, float(h), s, idx, 5).supports
            assert sup[:len(prev)] == prev and anchor not in sup
            prev = sup


def test_fixed_k_ignores_hardness():
    s = _store(8)
    idx = cu.build_indices(s)
    a = cu.build_curriculum(3, _query(s, 3), "atv", 0.05, s, idx, 5, fixed_k=True)
    b = cu.build_curriculum(3, _query(s, 3), "atv", 0.95, s, idx, 5, fixed_k=True)
    assert a.supports == b.supports and a.k_prime == 5


def _records(n, seed):
    r = nk.Rng(seed)
    return [HardnessRecord(i, CONDITIONS[int(r.integers(6))], 0, 0, 0, 0, 0, float(r.uniform() * 0.98 + 0.01))
            for i in range(n)]


def test_curricula_recomputation_is_bit_identical(tmp_path):
    s = _store(9)
    recs = _records(50, 1)
    a = cu.build_curricula(recs, s, cu.build_indices(s), 5)
    b = cu.build_curricula(recs, s, cu.build_indices(s), 5)
    assert a == b
    cu.write_curricula(a, tmp_path / "a.csv")
    cu.write_curricula(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert cu.read_curricula(tmp_path / "a.csv") == a


def test_curricula_csv_header_checked(tmp_path):
    (tmp_path / "c.csv").write_text("anchor,cond\n")
    with pytest.raises(IntegrityError):
        cu.read_curricula(tmp_path / "c.csv")


def test_store_from_training_data(smoke, small_cfg):
    tr = smoke[0]
    ret = cu.train_retrieval_encoders(tr, small_cfg)
    assert not any(".cls." in k for k in ret)
    s = cu.build_store(tr, ret)
    assert s.features["a"].shape == (len(tr), small_cfg.d_r) and s.features["a"].dtype == np.float32
    raw = cu.build_store(tr, None)
    assert raw.features["t"].shape == tr.features["t"].shape
