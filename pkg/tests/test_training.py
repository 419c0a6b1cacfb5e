import math

import numpy as np
import pytest

from matvae import model as M
from matvae import seqdata as S
from matvae import tensor as T
from matvae import training as TR
from matvae.tensor import Tensor

CFG = dict(L=6, d=4, H=3, D=3, fcb_hidden=(8,), transformer_layers=1)
DCFG = {**CFG, "d": 21}  # DMS one-hot always uses the full alphabet


def small_msa(rng, n=40, L=6, d=4):
    base = rng.integers(0, d, size=L)
    enc = np.tile(base, (n, 1))
    flip = rng.random((n, L)) < 0.2
    enc[flip] = rng.integers(0, d, size=flip.sum())
    enc[0] = base
    return S.MsaDataset([f"s{i}" for i in range(n)], enc.astype(np.int8), np.ones(n), list(range(1, L + 1)))


def small_dms(rng, n=30, L=6, d=4):
    enc = rng.integers(0, d, size=(n, L)).astype(np.int8)
    w = rng.normal(size=(L, d))
    scores = w[np.arange(L), enc].sum(axis=1)
    recs = [S.DmsRecord(f"m{i}", enc[i], float(s), bool(s > 0)) for i, s in enumerate(scores)]
    return S.DmsDataset(recs, 0.0)


# ---------------------------------------------------------------------------
# losses


def test_vae_loss_composition():
    rng = np.random.default_rng(0)
    x = np.eye(4)[rng.integers(0, 4, size=(3, 5))]
    h = Tensor(rng.dirichlet(np.ones(3), size=3))
    xh = Tensor(rng.dirichlet(np.ones(4), size=(3, 5)))
    total, ent, rec = TR.vae_loss_terms(x, h, xh, 0.7)
    S_ref = -(h.data * np.log(h.data)).sum() / 3
    ce_ref = -np.log((xh.data * x).sum(-1)).sum() / 3
    assert abs(ent.item() - S_ref) < 1e-12 and abs(rec.item() - ce_ref) < 1e-12
    assert abs(total.item() - (0.7 * S_ref + ce_ref)) < 1e-12
    assert TR.vae_loss(x, h, h, xh, 0.0).item() == rec.item()


def test_mse_cases():
    assert TR.mse_loss([1.0, 2.0], [1.0, 2.0]).item() == 0
    assert TR.mse_loss([0.0, 0.0], [1.0, 3.0]).item() == 5.0
    with pytest.raises(ValueError):
        TR.mse_loss(np.zeros(0), np.zeros(0))
    with pytest.raises(T.ShapeError):
        TR.mse_loss(np.zeros(2), np.zeros(3))


# ---------------------------------------------------------------------------
# Adam


def one_param(value):
    return M.ModelParams(None, M.MATVAE, {"w": Tensor(np.array(value, dtype=float), requires_grad=True)})


def test_adam_first_step_is_lr_sign():
    p = one_param([1.0, -2.0, 3.0])
    p["w"].grad[:] = [0.5, -4.0, 1e-3]
    TR.adam_step(p, TR.AdamState.zeros_like(p), 0.1)
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_zero_gradient_no_move():
    p = one_param([1.0, 2.0])
    s = TR.AdamState.zeros_like(p)
    for _ in range(5):
        TR.adam_step(p, s, 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])


def test_adam_descends_quadratic():
    p = one_param([3.0])
    s = TR.AdamState.zeros_like(p)
    for _ in range(2000):
        p.zero_grad()
        T.backward(T.sum(T.mul(p["w"], p["w"])))
        TR.adam_step(p, s, 0.01)
    assert abs(p["w"].data[0]) < 1e-2


def test_adam_frozen_names():
    p = M.ModelParams(None, M.MATENC, {"a": Tensor(np.ones(1), requires_grad=True), "b": Tensor(np.ones(1), requires_grad=True)})
    p["a"].grad[:] = 1
    p["b"].grad[:] = 1
    TR.adam_step(p, TR.AdamState.zeros_like(p), 0.1, names={"b"})
    assert p["a"].data[0] == 1 and p["b"].data[0] < 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TR.TrainConfig.from_dict({"nope": 1})
    c = TR.TrainConfig(steps=3)
    assert TR.TrainConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------------------
# MSA training


def test_gradient_reaches_every_group():
    rng = np.random.default_rng(1)
    c = M.ModelConfig(**CFG)
    p = M.init_model(c, rng)
    x = np.eye(4)[rng.integers(0, 4, size=(4, 6))]
    h, z, xh = M.matvae_forward(x, p, rng, "train")
    T.backward(TR.vae_loss(x, h, z, xh, 0.01))
    for name, t in p:
        if name.endswith(".bk"):
            continue  # key bias cancels under the softmax
        assert np.abs(t.grad).max() > 0, name


def test_train_msa_deterministic():
    rng = np.random.default_rng(2)
    msa = small_msa(rng)
    c = M.ModelConfig(**CFG)
    tc = TR.TrainConfig(learning_rate=1e-3, batch_size=8, steps=15, seed=5)
    a, ta = TR.train_msa(msa, tc, c)
    b, tb = TR.train_msa(msa, tc, c)
    assert a.checksum() == b.checksum() and ta.total == tb.total
    assert len(ta) == 15


def test_tau_stays_in_unit_interval():
    rng = np.random.default_rng(3)
    c = M.ModelConfig(**CFG)
    p, _ = TR.train_msa(small_msa(rng), TR.TrainConfig(learning_rate=1e-2, batch_size=8, steps=1000, seed=1, log_interval=100), c)
    for side in ("enc", "dec"):
        for which in ("tau1", "tau2"):
            t = M.tau(p, f"{side}.tf0", which).item()
            assert 0 < t < 1


def test_train_msa_length_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(M.ConfigError):
        TR.train_msa(small_msa(rng, L=5), TR.TrainConfig(steps=1), M.ModelConfig(**CFG))


def test_smoothed_trace():
    t = TR.LossTrace()
    for i, v in enumerate([4.0, 2.0, 0.0, 2.0]):
        t.append(i + 1, v)
    np.testing.assert_allclose(t.smoothed(2), [4.0, 3.0, 1.0, 1.0])


def test_numeric_error_is_raised():
    rng = np.random.default_rng(5)
    c = M.ModelConfig(**CFG)
    p = M.init_model(c, rng)
    p["dec.raw_temp"].data[...] = -800.0  # temperature underflows to zero
    with pytest.raises((TR.NumericError, FloatingPointError, ValueError)):
        with np.errstate(all="ignore"):
            TR.train_msa(small_msa(rng), TR.TrainConfig(steps=2, batch_size=4), c, params=p)


# ---------------------------------------------------------------------------
# DMS training


def test_cv_covers_each_record_once():
    rng = np.random.default_rng(6)
    dms = small_dms(rng)
    folds = S.kfold_split(len(dms), 5, 0)
    res = TR.train_dms(dms, folds, TR.TrainConfig(learning_rate=1e-3, batch_size=8, steps=3), M.ModelConfig(**DCFG))
    assert not np.isnan(res.predictions).any()
    seen = np.concatenate([f.val_index for f in res.folds])
    assert sorted(seen.tolist()) == list(range(len(dms)))
    for f in res.folds:
        assert not set(f.train_index) & set(f.val_index)
        np.testing.assert_array_equal(res.predictions[f.val_index], TR.predict_dms(f.params, dms.one_hot()[f.val_index]))


def test_cv_no_leakage():
    # changing a validation target must not change that fold's model
    rng = np.random.default_rng(7)
    dms = small_dms(rng)
    folds = S.kfold_split(len(dms), 3, 0)
    tc = TR.TrainConfig(learning_rate=1e-3, batch_size=8, steps=4)
    c = M.ModelConfig(**DCFG)
    a = TR.train_dms(dms, folds, tc, c)
    i = int(folds.indices(0)[1][0])
    dms.records[i].score += 100.0
    b = TR.train_dms(dms, folds, tc, c)
    assert a.folds[0].params.checksum() == b.folds[0].params.checksum()
    assert a.folds[1].params.checksum() != b.folds[1].params.checksum()


def test_finetune_starts_from_pretrained():
    rng = np.random.default_rng(8)
    dms = small_dms(rng)
    vae = M.init_model(M.ModelConfig(**DCFG), rng)
    folds = S.kfold_split(len(dms), 3, 0)
    res = TR.finetune(vae, dms, folds, TR.TrainConfig(steps=0))
    x = dms.one_hot()
    for f in res.folds:
        np.testing.assert_array_equal(M.encode(x, f.params).data, M.encode(x, vae).data)


def test_finetune_frozen_encoder():
    rng = np.random.default_rng(9)
    dms = small_dms(rng)
    vae = M.init_model(M.ModelConfig(**DCFG), rng)
    res = TR.finetune(vae, dms, S.kfold_split(len(dms), 3, 0), TR.TrainConfig(steps=5, batch_size=8, learning_rate=1e-2, freeze_encoder=True))
    for name, t in res.folds[0].params:
        if name.startswith("enc."):
            np.testing.assert_array_equal(t.data, vae[name].data)


def test_finetune_length_mismatch():
    rng = np.random.default_rng(10)
    vae = M.init_model(M.ModelConfig(**{**DCFG, "L": 7}), rng)
    dms = small_dms(rng)
    with pytest.raises(M.ConfigError, match="L"):
        TR.finetune(vae, dms, S.kfold_split(len(dms), 3, 0), TR.TrainConfig(steps=1))


def test_write_predictions(tmp_path):
    rng = np.random.default_rng(11)
    dms = small_dms(rng, n=9)
    folds = S.kfold_split(9, 3, 0)
    res = TR.train_dms(dms, folds, TR.TrainConfig(steps=1, batch_size=4), M.ModelConfig(**DCFG))
    TR.write_predictions(tmp_path / "p.csv", dms, res)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "mutant,fold,predicted,target,target_binary" and len(lines) == 10


def test_uniform_latent_entropy_term():
    h = Tensor(np.full((1, 10), 0.1))
    x = np.eye(4)[[[0, 1]]]
    xh = Tensor(np.full((1, 2, 4), 0.25))
    total, ent, rec = TR.vae_loss_terms(x, h, xh, 0.3)
    assert abs(total.item() - rec.item() - 0.3 * math.log(10)) < 1e-12


def test_mse_shifted_and_loop():
    rng = np.random.default_rng(12)
    y = rng.normal(size=7)
    assert abs(TR.mse_loss(y + 1, y).item() - 1.0) < 1e-12
    yh = rng.normal(size=7)
    ref = 0.0
    for a, b in zip(yh, y):
        ref += (a - b) ** 2
    assert abs(TR.mse_loss(yh, y).item() - ref / 7) < 1e-12


def test_adam_ten_steps_strict_descent():
    p = one_param([1.0])
    s = TR.AdamState.zeros_like(p)
    prev = 1.0
    for _ in range(10):
        p.zero_grad()
        T.backward(T.sum(T.mul(p["w"], p["w"])))
        TR.adam_step(p, s, 0.1)
        cur = abs(p["w"].data[0])
        assert cur < prev
        prev = cur
    assert s.t == 10


def test_trace_decomposition_exact():
    rng = np.random.default_rng(13)
    tc = TR.TrainConfig(learning_rate=1e-3, batch_size=8, steps=12, seed=2, log_interval=3)
    _, tr = TR.train_msa(small_msa(rng), tc, M.ModelConfig(**CFG))
    assert tr.steps == [3, 6, 9, 12]
    for t, e, r in zip(tr.total, tr.entropy, tr.reconstruction):
        assert t == 0.01 * e + r


def test_finetune_zero_steps_equals_fresh_head():
    rng = np.random.default_rng(14)
    dms = small_dms(rng)
    vae = M.init_model(M.ModelConfig(**DCFG), rng)
    folds = S.kfold_split(len(dms), 3, 0)
    res = TR.finetune(vae, dms, folds, TR.TrainConfig(steps=0, seed=4))
    x = dms.one_hot()
    for f in res.folds:
        fresh = M.matenc_from_matvae(vae, np.random.default_rng([4, f.fold]))
        np.testing.assert_array_equal(f.predictions, TR.predict_dms(fresh, x[f.val_index]))
