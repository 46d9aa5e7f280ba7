import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsa.fingerprint import ecfp
from mmsa.metrics import MetricReport, dbi, nmi, retrieve, rmse, roc_auc
from mmsa.smiles import read_smiles


def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_roc_auc_hand_cases():
    s = [0.9, 0.8, 0.3, 0.2]
    assert roc_auc(s, [1, 1, 0, 0]) == 1.0
    assert roc_auc(s, [1, 0, 1, 0]) == 0.75
    assert roc_auc([0.4] * 4, [1, 0, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        roc_auc(s, [1, 1, 1, 1])
    with pytest.raises(ValueError):
        roc_auc(s, [1, 0])


def test_roc_auc_matches_pair_counting():
    r = np.random.default_rng(0)
    for _ in range(100):
        n = int(r.integers(2, 40))
        y = r.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = np.round(r.normal(size=n), 1)  # rounding forces ties
        assert abs(roc_auc(s, y) - brute_auc(s, y)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_roc_auc_invariances(seed):
    r = np.random.default_rng(seed)
    y = np.array([0, 1] + list(r.integers(0, 2, size=10)))
    s = r.normal(size=12)
    base = roc_auc(s, y)
    assert roc_auc(np.exp(s) * 3 + 1, y) == pytest.approx(base, abs=1e-12)
    assert roc_auc(-s, y) == pytest.approx(1 - base, abs=1e-12)
    p = r.permutation(12)
    assert roc_auc(s[p], y[p]) == pytest.approx(base, abs=1e-12)


def test_rmse():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert abs(rmse([3, -4], [0, 0]) - np.sqrt(12.5)) < 1e-9
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


def test_dbi():
    pts = [[0, 0], [0, 1], [10, 0], [10, 1]]
    assert abs(dbi(pts, [0, 0, 1, 1]) - 0.1) < 1e-9
    with pytest.raises(ValueError):
        dbi(pts, [0, 0, 0, 0])


def test_dbi_matches_sklearn():
    from sklearn.metrics import davies_bouldin_score
    r = np.random.default_rng(1)
    x = r.normal(size=(30, 3))
    lab = r.integers(0, 3, size=30)
    assert dbi(x, lab) == pytest.approx(davies_bouldin_score(x, lab), rel=1e-9)


def test_nmi():
    a = [0, 0, 1, 1, 2]
    assert nmi(a, [5, 5, 7, 7, 9]) == pytest.approx(1.0, abs=1e-12)
    assert nmi(a, [0] * 5) == 0.0
    assert abs(nmi([0, 0, 1, 1], [0, 1, 0, 1])) < 1e-12
    with pytest.raises(ValueError):
        nmi([0, 1], [0])


def test_nmi_matches_sklearn():
    from sklearn.metrics import normalized_mutual_info_score
    r = np.random.default_rng(2)
    for _ in range(20):
        a, b = r.integers(0, 4, size=25), r.integers(0, 3, size=25)
        assert nmi(a, b) == pytest.approx(normalized_mutual_info_score(a, b), abs=1e-12)


def test_retrieve_cosine():
    q = np.array([1.0, 0.0])
    refs = np.array([[0.1, np.sqrt(1 - 0.01)], [0.9, np.sqrt(1 - 0.81)], [0.5, np.sqrt(0.75)]])
    res = retrieve(q, refs, 3, ref_ids=["a", "b", "c"])
    assert res.ids() == ["b", "c", "a"]
    assert [h[1] for h in res.hits] == pytest.approx([0.9, 0.5, 0.1])
    self_hit = retrieve(refs[2], refs, 1)
    assert self_hit.ids() == ["2"] and self_hit.hits[0][1] == pytest.approx(1.0)


def test_retrieve_ties_and_errors():
    refs = np.ones((3, 2))
    assert retrieve(np.ones(2), refs, 3).ids() == ["0", "1", "2"]
    with pytest.raises(ValueError):
        retrieve(np.ones(2), refs, 4)
    fp = ecfp(read_smiles("CCO"))
    with pytest.raises(TypeError):
        retrieve(fp, [fp], 1, mode="cosine")
    with pytest.raises(TypeError):
        retrieve(np.ones(2), refs, 1, mode="tanimoto")


def test_retrieve_tanimoto_self():
    smi = ["CCO", "CC(=O)Nc1cccc(O)c1", "c1ccccc1"]
    fps = [ecfp(read_smiles(s)) for s in smi]
    res = retrieve(fps[1], fps, 2, mode="tanimoto", ref_ids=smi)
    assert res.hits[0] == ("CC(=O)Nc1cccc(O)c1", 1.0)
    assert res.to_dict()["hits"][0]["similarity"] == 1.0


def test_metric_report():
    rep = MetricReport.from_values("roc_auc", [0.5, 0.7])
    assert rep.mean == pytest.approx(0.6) and rep.std == pytest.approx(0.1) and rep.seeds == (0, 1)
    with pytest.raises(ValueError):
        MetricReport.from_values("rmse", [])
