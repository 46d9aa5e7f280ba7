import json
from dataclasses import replace

import numpy as np
import pytest

from mmsa.data import Dataset, build_molecule, gen_synthetic
from mmsa.encoders import batch_from_molecules
from mmsa.model import MMSAModel, PretrainConfig
from mmsa.smiles import read_smiles
from mmsa.tensor import Tape, backward
from mmsa.trainer import (REGRESSION, Checkpoint, CheckpointError, ConfigMismatchError, MissingModalityError, embed,
                          epoch_batches, finetune, finetune_seeds, load_checkpoint, make_checkpoint,
                          model_from_checkpoint, pretrain, save_checkpoint)

SMALL = PretrainConfig(epochs=2, batch=8, d_c=16, d_o=16, d_h=8, ae_hidden=16, L=8, K=3, seed=5)


@pytest.fixture(scope="module")
def small_corpus():
    return gen_synthetic(20, seed=9)


@pytest.fixture(scope="module")
def trained(small_corpus, tmp_path_factory):
    log_path = tmp_path_factory.mktemp("run") / "log.jsonl"
    ck, log = pretrain(small_corpus, SMALL, log_path=log_path)
    return ck, log, log_path


def test_zero_learning_rate_keeps_parameters(small_corpus):
    cfg = SMALL.replace(lr=0.0, epochs=1, batch=20)
    model = MMSAModel(cfg)
    before = make_checkpoint(model).params
    ck, log = pretrain(small_corpus, cfg)
    learnable = [n for n, _ in model.named_parameters()]
    assert all(np.array_equal(before[k], ck.params[k]) for k in learnable)
    assert not np.array_equal(before["gin.out_norm.running_var"], ck.params["gin.out_norm.running_var"])
    _, log2 = pretrain(small_corpus, cfg)
    assert log == log2


def test_pretrain_is_deterministic(small_corpus, trained, tmp_path):
    ck, log, log_path = trained
    ck2, log2 = pretrain(small_corpus, SMALL, log_path=tmp_path / "log.jsonl")
    assert ck.to_bytes() == ck2.to_bytes()
    assert log_path.read_bytes() == (tmp_path / "log.jsonl").read_bytes()


def test_log_rows(trained):
    _, log, log_path = trained
    rows = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert rows == log and [r["epoch"] for r in rows] == [1, 2]
    for r in rows:
        assert r["L_overall"] == pytest.approx(r["L_ae"] + r["L_sa"], rel=1e-12)
        assert r["L_ae"] == pytest.approx(0.6 * r["L_cl"] + 0.4 * r["L_rl"], rel=1e-12)
        assert r["L_sa"] == pytest.approx(0.5 * r["L_me"] + 0.5 * r["L_pre"], rel=1e-12)


def test_overall_is_sum_of_parts(small_corpus):
    model = MMSAModel(SMALL)
    mols = list(small_corpus.molecules[:6])
    yg = np.stack([m.y_geom for m in mols])
    yp = np.stack([m.y_prop for m in mols])
    out = model.losses(batch_from_molecules(mols), yg, yp)
    assert out.L_overall.item() == pytest.approx(out.L_ae.item() + out.L_sa.item(), rel=1e-14)


def test_ablation_flags_drop_terms(small_corpus):
    mols = list(small_corpus.molecules[:6])
    yg = np.stack([m.y_geom for m in mols])
    yp = np.stack([m.y_prop for m in mols])
    out = MMSAModel(SMALL.replace(use_me=False, use_cl=False)).losses(batch_from_molecules(mols), yg, yp)
    assert out.L_sa.item() == pytest.approx(0.5 * out.L_pre.item())
    assert out.L_ae.item() == pytest.approx(0.4 * out.L_rl.item())


def test_checkpoint_round_trip(trained, tmp_path):
    ck = trained[0]
    path = tmp_path / "ck.bin"
    save_checkpoint(ck, path)
    back = load_checkpoint(path, expect=SMALL)
    assert list(back.params) == list(ck.params)
    assert all(np.array_equal(back.params[k], ck.params[k]) for k in ck.params)
    assert back.config == ck.config and back.label_stats == ck.label_stats
    save_checkpoint(back, tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()
    model = model_from_checkpoint(back)
    assert all(np.array_equal(p.data, ck.params[n]) for n, p in model.named_parameters())


def test_checkpoint_errors(trained, tmp_path):
    raw = trained[0].to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(raw + b"\0")
    path = tmp_path / "ck.bin"
    path.write_bytes(raw)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expect=SMALL.replace(d_c=32))
    wrong = replace(trained[0], config=SMALL.replace(d_c=32))
    with pytest.raises(ConfigMismatchError):
        model_from_checkpoint(wrong)


def test_missing_modality_names_the_molecule(small_corpus):
    mols = list(small_corpus.molecules[:4])
    mols[2] = replace(mols[2], coords=[])
    with pytest.raises(MissingModalityError, match="molecule 2"):
        pretrain(mols, SMALL)


def test_epoch_batches_fold_singleton_tail():
    chunks = epoch_batches(17, 8, np.random.default_rng(0))
    assert [len(c) for c in chunks] == [8, 9]
    assert sorted(np.concatenate(chunks)) == list(range(17))


def test_pretraining_gradients_match_finite_differences(small_corpus):
    """Semi-gradient path off: the taped gradient is the true gradient of L_overall."""
    cfg = SMALL.replace(d_c=4, d_o=4, d_h=4, ae_hidden=4, L=3, K=2, image_size=64, detach_targets=False)
    model = MMSAModel(cfg)
    mols = list(small_corpus.molecules[:3])
    batch = batch_from_molecules(mols)
    yg = np.stack([m.y_geom for m in mols]) / 10
    yp = np.stack([m.y_prop for m in mols]) / 10
    # parameters downstream of C: moving C itself can flip the KNN graph
    params = model.structure.parameters()
    with Tape() as tape:
        loss = model.losses(batch, yg, yp).L_overall
    g = backward(tape, loss, params)
    rng = np.random.default_rng(0)
    for p in params:
        idx = tuple(rng.integers(0, s) for s in p.shape)
        old = p.data[idx]
        p.data[idx] = old + 1e-6
        up = model.losses(batch, yg, yp).L_overall.item()
        p.data[idx] = old - 1e-6
        down = model.losses(batch, yg, yp).L_overall.item()
        p.data[idx] = old
        fd = (up - down) / 2e-6
        assert abs(fd - g[p][idx]) <= 1e-4 * max(1.0, abs(fd))


def _hand_dataset(smiles_labels, splits):
    mols = tuple(build_molecule(read_smiles(s), labels=np.array([y]), mol_id=s) for s, y in smiles_labels)
    return Dataset(mols, ("y",), tuple(splits))


def test_finetune_separable_labels():
    arom = ["c1ccccc1", "c1ccccc1C", "c1ccccc1O", "c1ccc2ccccc2c1", "c1ccccc1CC", "c1ccccc1N", "c1ccccc1Cl",
            "c1ccc(C)cc1C"]
    chain = ["CCCC", "CCCCC", "CCCCCC", "CCCO", "CCCCO", "CCCCCCC", "CC(C)CC", "CCCCCN"]
    pairs = [(s, 1.0) for s in arom] + [(s, 0.0) for s in chain]
    splits = ["test" if i % 4 == 3 else "train" for i in range(8)] * 2
    ds = _hand_dataset(pairs, splits)
    _, res = finetune(None, ds, epochs=40, seed=0, batch=4, config=SMALL)
    assert res.metric == "roc_auc" and res.value == 1.0 and not res.pretrained


def test_finetune_regression_recovers_linear_function(trained, small_corpus):
    # test rows repeat the training molecules: this checks the fit, not generalisation
    ck = trained[0]
    emb = embed(ck, small_corpus)
    w = np.random.default_rng(0).normal(size=emb.shape[1])
    y = emb @ w
    y = (y - y.mean()) / y.std()
    mols = tuple(replace(m, labels=np.array([v])) for m, v in zip(small_corpus.molecules, y))
    ds = Dataset(mols + mols, ("y",), tuple(["train"] * len(mols) + ["test"] * len(mols)))
    _, res = finetune(ck, ds, REGRESSION, epochs=200, batch=len(mols), lr=0.003)
    assert res.metric == "rmse" and res.value < 0.05 and res.pretrained


def test_finetune_errors(small_corpus):
    with pytest.raises(ValueError):
        finetune(None, small_corpus, config=SMALL)  # no splits
    ds = small_corpus.with_splits(["train"] * 16 + ["test"] * 4)
    with pytest.raises(ValueError):
        finetune(None, ds, "classification", label="size", epochs=1, config=SMALL)
    with pytest.raises(KeyError):
        finetune(None, ds, label="missing", epochs=1, config=SMALL)


def test_finetune_seeds_report():
    ds = gen_synthetic(24, seed=4)
    ds = ds.with_splits(["train"] * 16 + ["test"] * 8)
    rep = finetune_seeds(None, ds, seeds=[0, 1], epochs=1, config=SMALL, task=REGRESSION, label="size")
    assert rep.metric == "rmse" and rep.seeds == (0, 1) and len(rep.values) == 2
    assert rep.mean == pytest.approx(np.mean(rep.values))


def test_embed_shape_and_duplicates(trained, small_corpus):
    ck = trained[0]
    mols = list(small_corpus.molecules[:5]) + [small_corpus.molecules[1]]
    e = embed(ck, mols)
    assert e.shape == (6, SMALL.d_c)
    assert np.array_equal(e[1], e[5])
    assert np.array_equal(e, embed(ck, mols))
    assert np.allclose(e[:3], embed(ck, mols[:3], batch=2))
