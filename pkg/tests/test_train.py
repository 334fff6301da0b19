import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import synthetic_dataset, toy_config
from maya.data import batches
from maya.model import build, forward_train
from maya.tensor import Parameter, Tensor, backward
from maya.train import (AdamW, average_ranks, evaluate, fit, loss, mean_rank, summarize, write_summary)

SMALL = dict(hidden_size=8, num_heads=2, num_branch=2, num_layers=1, num_decoder_layers=1, batch_size=32)


@pytest.fixture(scope="module")
def cls_ds(tmp_path_factory):
    return synthetic_dataset(tmp_path_factory.mktemp("cls"), "classification", n=120)


@pytest.fixture(scope="module")
def reg_ds(tmp_path_factory):
    return synthetic_dataset(tmp_path_factory.mktemp("reg"), "regression", n=120)


# optimizer ------------------------------------------------------------------

def test_adam_scalar_step(frozen):
    w = Parameter(np.array([1.0]), name="w")
    w.grad = np.array([1.0])
    AdamW([w], lr=0.1).step()
    assert abs(w.data[0] - frozen["adam_scalar_step"]) < 1e-15


def test_zero_learning_rate_changes_nothing():
    rng = np.random.default_rng(0)
    params = [Parameter(rng.normal(size=(3, 3)), name="w"), Parameter(rng.normal(size=3), name="bias")]
    before = [p.data.copy() for p in params]
    for p in params:
        p.grad = rng.normal(size=p.shape)
    AdamW(params, lr=0.0, weight_decay=0.5).step()
    assert all(np.array_equal(a, p.data) for a, p in zip(before, params))


def test_decay_skips_biases_and_norms():
    names = {"enc.ffn.up.weight": (2, 2), "enc.ffn.up.bias": (2,), "norm.gamma": (2,), "tok.slope": (1,),
             "attn.q.bias": (3, 1, 2)}
    params = [Parameter(np.ones(s), name=n) for n, s in names.items()]
    for p in params:
        p.grad = np.zeros(p.shape)
    AdamW(params, lr=0.1, weight_decay=0.5).step()
    got = {p.name: p.data.flat[0] for p in params}
    assert got["enc.ffn.up.weight"] == pytest.approx(1 - 0.1 * 0.5)
    assert all(got[n] == 1.0 for n in names if n != "enc.ffn.up.weight")


def test_non_finite_gradient_raises():
    p = Parameter(np.ones(2), name="w")
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError):
        AdamW([p]).step()


# losses ---------------------------------------------------------------------

def test_loss_examples():
    assert loss(Tensor(np.array([[0.0], [2.0]])), np.array([0.0, 0.0]), "regression").item() == 2.0
    ce = loss(Tensor(np.zeros((2, 4))), np.array([1, 3]), "multiclass").item()
    assert ce == pytest.approx(np.log(4))


# training loop --------------------------------------------------------------

def test_patience_zero_runs_one_epoch(cls_ds):
    model = build(toy_config(**SMALL), cls_ds.info, 0)
    report, cache = fit(model, cls_ds, 0, max_epochs=10, patience=0)
    assert len(report.epochs) == 1 and report.best_epoch == 1 and cache is not None


def test_fit_is_deterministic_and_restores_best(cls_ds):
    cfg = toy_config(**SMALL, dropout=0.1, decoder_dropout=0.1)
    reports = []
    for _ in range(2):
        model = build(cfg, cls_ds.info, 3)
        report, cache = fit(model, cls_ds, 3, max_epochs=6, patience=2)
        reports.append(report)
        assert report.checkpoint_hash == model.fingerprint()
        assert evaluate(model, cache, cls_ds, "test") == report.test_metric
        assert report.best_val == max(e.val_metric for e in report.epochs)
    assert reports[0].comparable() == reports[1].comparable()


def test_branch_weight_trace_on_simplex(reg_ds):
    model = build(toy_config(**{**SMALL, "num_branch": 3}), reg_ds.info, 1)
    report, _ = fit(model, reg_ds, 1, max_epochs=4, patience=4)
    assert len(report.wb_trace) == 4
    for wb in report.wb_trace:
        assert wb.shape == (1, 3) and np.all(wb > 0) and np.allclose(wb.sum(1), 1.0, atol=1e-12)


def test_constant_predictor_rmse_is_target_spread(reg_ds):
    model = build(toy_config(**SMALL, use_decoder=False), reg_ds.info, 0)
    model.predictor.weight.data[...] = 0.0
    model.predictor.bias.data[...] = 0.0
    model.target_mean, model.target_std = reg_ds.target_mean, reg_ds.target_std
    rmse = evaluate(model, None, reg_ds, "test")
    truth = reg_ds.destandardize(reg_ds.rows(reg_ds.split.test)[2])
    assert rmse == pytest.approx(np.sqrt(np.mean((truth - reg_ds.target_mean) ** 2)), rel=1e-12)


def test_training_loss_falls_in_first_steps(cls_ds):
    falls = 0
    seeds = range(10)
    for seed in seeds:
        model = build(toy_config(**SMALL, learning_rate=3e-3), cls_ds.info, seed)
        opt = AdamW(model.parameters(), 3e-3)
        idx = next(batches(cls_ds.split.train, 32, seed, 1, shuffle=True))
        x_num, x_cat, y = cls_ds.rows(idx)
        first = last = None
        for _ in range(20):
            obj = loss(forward_train(model, x_num, x_cat, y).logits, y, "binary")
            model.zero_grad()
            backward(obj)
            opt.step()
            first = obj.item() if first is None else first
            last = obj.item()
        falls += last < first
    assert falls >= 0.9 * len(seeds)


def test_report_files(cls_ds, tmp_path):
    model = build(toy_config(**SMALL), cls_ds.info, 7)
    report, _ = fit(model, cls_ds, 7, max_epochs=2, patience=5)
    report.write(tmp_path)
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "# seed=7" and lines[1] == "epoch,train_loss,val_accuracy,is_best" and len(lines) == 4
    assert "final_branch_weights.0" in (tmp_path / "summary.txt").read_text()


# ranking --------------------------------------------------------------------

def test_rank_examples():
    assert list(average_ranks([0.9, 0.8], True)) == [1.0, 2.0]
    assert list(average_ranks([0.5, 0.5], True)) == [1.5, 1.5]
    assert list(average_ranks([0.3, 0.1], False)) == [2.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=8), st.booleans())
def test_ranks_sum_and_order(values, higher):
    r = average_ranks(values, higher)
    n = len(values)
    assert r.sum() == pytest.approx(n * (n + 1) / 2)
    for i in range(n):
        for j in range(n):
            if values[i] == values[j]:
                assert r[i] == r[j]
            elif (values[i] > values[j]) == higher:
                assert r[i] < r[j]


def test_summary_single_seed_and_mean_rank(tmp_path):
    rows = summarize({("a", "d1"): [0.9], ("b", "d1"): [0.8], ("a", "d2"): [1.0, 2.0], ("b", "d2"): [0.5, 0.5]},
                     {"d1": "binary", "d2": "regression"}, ["a", "b"])
    by = {(r.config, r.dataset): r for r in rows}
    assert by[("a", "d1")].single_seed and by[("a", "d1")].std == 0.0
    assert by[("a", "d2")].std == pytest.approx(0.5)
    assert mean_rank(rows) == {"a": 1.5, "b": 1.5}
    write_summary(rows, tmp_path / "s.csv", seeds=[0])
    text = (tmp_path / "s.csv").read_text().splitlines()
    assert text[0] == "# seeds=0" and text[1].startswith("config,dataset,mean,std,rank") and len(text) == 6
