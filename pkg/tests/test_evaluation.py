import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matvae import evaluation as E
from matvae import model as M
from matvae import seqdata as S
from matvae.tensor import Tensor
from matvae.training import vae_loss_terms
from oracles import auroc_oracle, spearman_oracle

CFG = dict(L=6, d=21, H=3, D=3, fcb_hidden=(8,), transformer_layers=1)


def random_instance(rng):
    n = int(rng.integers(2, 51))
    # small integer supports force plenty of ties
    x = rng.integers(0, int(rng.integers(2, 12)), size=n).astype(float)
    y = rng.integers(0, int(rng.integers(2, 12)), size=n).astype(float)
    if rng.random() < 0.5:
        x = x + rng.normal(size=n)
    return x, y, rng.random(n) < rng.uniform(0.1, 0.9)


# ---------------------------------------------------------------------------
# metrics


def test_rankdata_ties():
    np.testing.assert_array_equal(E.rankdata([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


def test_spearman_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, y, _ = random_instance(rng)
        got, ref = E.spearman_r(x, y), spearman_oracle(x, y)
        assert (math.isnan(got) and math.isnan(ref)) or abs(got - ref) < 1e-9


def test_auroc_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, _, lab = random_instance(rng)
        got, ref = E.auroc(x, lab), auroc_oracle(x, lab)
        assert (math.isnan(got) and math.isnan(ref)) or abs(got - ref) < 1e-9


def test_spearman_monotone_invariance_exact():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.integers(-40, 40, size=int(rng.integers(3, 51))).astype(float)
        y = rng.normal(size=len(x))
        r = E.spearman_r(x, y)
        assert E.spearman_r(np.exp(x / 7), y) == r
        assert E.spearman_r(x ** 3 + 7, y) == r


def test_spearman_edges():
    assert E.spearman_r([1, 2, 3], [4, 5, 6]) == 1.0
    assert E.spearman_r([1, 2, 3], [6, 5, 4]) == -1.0
    assert math.isnan(E.spearman_r([1, 1, 1], [1, 2, 3]))
    with pytest.raises(ValueError):
        E.spearman_r([1], [1])


def test_auroc_edges():
    assert E.auroc([1, 2], [False, True]) == 1.0
    assert E.auroc([1, 1], [False, True]) == 0.5
    assert math.isnan(E.auroc([1, 2], [True, True]))


@given(st.lists(st.integers(-5, 5), min_size=2, max_size=30), st.data())
def test_auroc_complement(pred, data):
    lab = np.array(data.draw(st.lists(st.booleans(), min_size=len(pred), max_size=len(pred))))
    if lab.all() or not lab.any():
        return
    a = E.auroc(pred, lab)
    assert abs(E.auroc(-np.array(pred), lab) - (1 - a)) < 1e-12
    assert abs(E.auroc(pred, ~lab) - (1 - a)) < 1e-12


# ---------------------------------------------------------------------------
# ELBO scoring


@pytest.fixture(scope="module")
def params():
    rng = np.random.default_rng(3)
    p = M.init_model(M.ModelConfig(**CFG), rng)
    for _, t in p:
        t.data += rng.normal(scale=0.2, size=t.shape)
    return p


def onehots(rng, n):
    return np.eye(21)[rng.integers(0, 21, size=(n, 6))]


def test_elbo_nonpositive_and_deterministic(params):
    x = onehots(np.random.default_rng(4), 20)
    a = E.elbo_scores(params, x)
    assert (a <= 0).all()
    np.testing.assert_array_equal(a, E.elbo_scores(params, x))


def test_elbo_decomposition(params):
    x = onehots(np.random.default_rng(5), 4)
    for i in range(4):
        h, z, xh = M.matvae_forward(x[i:i + 1], params, None, "test")
        total, _, _ = vae_loss_terms(x[i:i + 1], h, xh, params.config.beta_test)
        assert abs(E.elbo_score(params, x[i]) + total.item()) < 1e-12


def test_elbo_batch_invariant(params):
    x = onehots(np.random.default_rng(6), 9)
    np.testing.assert_array_equal(E.elbo_scores(params, x), E.elbo_scores(params, x[::-1])[::-1])


def test_log_ratio_wild_type_zero_and_antisymmetry(params):
    rng = np.random.default_rng(7)
    wt, v = onehots(rng, 2)
    assert E.log_ratio(params, wt, wt) == 0.0
    assert E.log_ratio(params, np.stack([wt, v, wt]), wt)[[0, 2]].tolist() == [0.0, 0.0]
    assert E.log_ratio(params, v, wt) == -E.log_ratio(params, wt, v)


def test_scoring_preserves_parameters(params):
    before = params.checksum()
    x = onehots(np.random.default_rng(8), 5)
    E.log_ratio(params, x, x[0])
    assert params.checksum() == before


def test_elbo_rejects_matenc():
    p = M.init_model(M.ModelConfig(**CFG), np.random.default_rng(0), M.MATENC)
    with pytest.raises(ValueError):
        E.elbo_scores(p, np.zeros((1, 6, 21)))


# ---------------------------------------------------------------------------
# reports


def dms_of(scores, labels, higher=True):
    recs = [S.DmsRecord(f"m{i}", np.zeros(1, np.int8), float(s), bool(l)) for i, (s, l) in enumerate(zip(scores, labels))]
    return S.DmsDataset(recs, 0.0, higher)


def test_evaluate_cv_per_fold_slices():
    rng = np.random.default_rng(9)
    n = 30
    y = rng.normal(size=n)
    lab = y > 0
    pred = y + rng.normal(size=n)
    assign = S.kfold_split(n, 3, 0).assignment
    rep = E.evaluate_cv(pred, assign, dms_of(y, lab))
    sp = [spearman_oracle(pred[assign == f], y[assign == f]) for f in range(3)]
    au = [auroc_oracle(pred[assign == f], lab[assign == f]) for f in range(3)]
    assert abs(rep.spearman_r - np.mean(sp)) < 1e-12 and abs(rep.auroc - np.mean(au)) < 1e-12
    assert len(rep.per_fold) == 3


def test_evaluate_cv_requires_full_coverage():
    with pytest.raises(ValueError):
        E.evaluate_cv([1.0, np.nan], [0, 1], dms_of([1, 2], [0, 1]))


def test_lower_is_fit_orientation():
    scores = [E.VariantScore(str(i), -float(i), float(i), i < 2) for i in range(5)]
    rep = E.evaluate_scores(scores, higher_is_fit=False)
    assert rep.spearman_r == 1.0 and rep.auroc == 1.0


def test_aggregate_mean_and_population_std():
    reps = [E.MetricsReport("a", 0.4, 0.7, 10, {"category": "x"}), E.MetricsReport("b", 0.6, 0.9, 10, {"category": "x"}),
            E.MetricsReport("c", 0.1, 0.5, 10, {"category": "y"})]
    (row,) = E.aggregate_report(reps[:2])
    assert row.group == "all" and abs(row.spearman_mean - 0.5) < 1e-12 and abs(row.spearman_std - 0.1) < 1e-12
    rows = E.aggregate_report(reps, "category")
    assert [(r.group, r.n_datasets) for r in rows] == [("x", 2), ("y", 1)]
    assert "0.500 ± 0.100" in E.report_text(rows)
    assert E.report_csv(rows).splitlines()[0].startswith("group,n_datasets")


def test_scores_round_trip(tmp_path):
    s = [E.VariantScore("A1C", -0.123456789012345, 1.5, True), E.VariantScore("WT", 0.0, 0.0, False)]
    E.write_scores(tmp_path / "s.csv", s)
    assert E.read_scores(tmp_path / "s.csv") == s


def test_elbo_upper_bound(monkeypatch):
    x = np.eye(21)[[0, 3, 5, 1, 2, 7]][None]
    h = Tensor(np.array([[0.0, 1.0, 0.0]]))
    monkeypatch.setattr(M, "matvae_forward", lambda xb, p, rng, phase: (h, h, Tensor(xb)))
    p = M.init_model(M.ModelConfig(**CFG), np.random.default_rng(0))
    assert E.elbo_scores(p, x)[0] == 0.0


def test_log_ratio_batch_decomposition(params):
    rng = np.random.default_rng(15)
    wt = onehots(rng, 1)[0]
    v = onehots(rng, 100)
    batch = E.log_ratio(params, v, wt)
    wt_score = E.elbo_score(params, wt)
    for i in range(100):
        assert abs(batch[i] - (E.elbo_score(params, v[i]) - wt_score)) < 1e-12


def test_zero_shot_self_consistency_and_null(params):
    rng = np.random.default_rng(16)
    wt_enc = rng.integers(0, 20, size=6).astype(np.int8)
    recs = []
    for i in range(500):
        e = rng.integers(0, 20, size=6).astype(np.int8)
        recs.append(S.DmsRecord(f"v{i}", e, 0.0, False))
    dms = S.DmsDataset(recs, 0.0)
    scores = E.score_dms(params, dms, wt_enc)
    for r, s in zip(recs, scores):
        r.score = s.predicted
        r.label = s.predicted > np.median([q.predicted for q in scores])
    rep, _ = E.evaluate_zero_shot(params, dms, wt_enc)
    assert rep.spearman_r == 1.0 and rep.n_variants == 500
    shuffled = rng.permutation([r.score for r in recs])
    assert abs(E.spearman_r([s.predicted for s in scores], shuffled)) < 0.15


def test_evaluate_cv_perfect_and_single_report():
    y = np.arange(12.0)
    rep = E.evaluate_cv(y * 2, np.arange(12) % 3, dms_of(y, y > 5))
    assert rep.spearman_r == 1.0
    (row,) = E.aggregate_report([E.MetricsReport("a", 0.3, 0.6, 5)])
    assert row.spearman_std == 0.0 and row.auroc_std == 0.0
