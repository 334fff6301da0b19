"""Losses, optimizer, training loop and multi-seed reporting."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .data import EncodedDataset, batches
from .decoder import CandidateCache
from .encoder import update_branch_weights
from .model import Model, ModelConfig, build, forward_infer, forward_train
from .tensor import ContractError, Parameter, Tensor, add, backward, cross_entropy, getitem, mse, mul

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, report: Optional["TrainReport"] = None) -> None:
        super().__init__(message)
        self.report = report


def loss(predictions: Tensor, targets, task: str) -> Tensor:
    """Mean cross-entropy from logits, or MSE on standardized targets."""
    if task == "regression":
        return mse(predictions, targets)
    return cross_entropy(predictions, targets)


def higher_is_better(task: str) -> bool:
    return task != "regression"


def metric_name(task: str) -> str:
    return "rmse" if task == "regression" else "accuracy"


class AdamW:
    """Adam with bias correction, then decoupled decay ``p -= lr * wd * p`` on
    weight matrices (biases, LayerNorm, PReLU slopes excluded)."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.decay = [p.data.ndim >= 2 and "bias" not in p.name and "slope" not in p.name for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {p.name}")
            grads.append(g)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v, self.decay):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decay and self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data


def step(optimizer: AdamW) -> None:
    optimizer.step()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    is_best: bool


@dataclass
class TrainReport:
    seed: int
    metric: str
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("nan")
    test_metric: float = float("nan")
    wb_trace: List[np.ndarray] = field(default_factory=list)  # per epoch, [L_e, n]
    wall_time: float = 0.0
    checkpoint_hash: str = ""

    def comparable(self) -> dict:
        """Everything except wall time, for determinism checks."""
        return {"seed": self.seed, "epochs": [(e.epoch, e.train_loss, e.val_metric, e.is_best) for e in self.epochs],
                "best_epoch": self.best_epoch, "best_val": self.best_val, "test": self.test_metric,
                "wb": [w.tolist() for w in self.wb_trace], "hash": self.checkpoint_hash}

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "report.csv", "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n")
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", f"val_{self.metric}", "is_best"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_metric), int(e.is_best)])
        lines = [f"seed = {self.seed}", f"metric = {self.metric}", f"epochs_run = {len(self.epochs)}",
                 f"best_epoch = {self.best_epoch}", f"best_val = {self.best_val!r}",
                 f"test_{self.metric} = {self.test_metric!r}", f"checkpoint_hash = {self.checkpoint_hash}"]
        if self.wb_trace:
            for i, row in enumerate(self.wb_trace[-1]):
                lines.append(f"final_branch_weights.{i} = " + " ".join(repr(float(x)) for x in row))
        (d / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate(model: Model, cache: Optional[CandidateCache], ds: EncodedDataset, split: str = "test",
             indices: Optional[np.ndarray] = None) -> float:
    """Accuracy of the argmax class, or RMSE in original target units."""
    idx = ds.split.get(split) if indices is None else indices
    if len(idx) == 0:
        raise ContractError(f"split {split!r} is empty")
    was = model.training
    model.eval()
    try:
        x_num, x_cat, y = ds.rows(idx)
        pred = forward_infer(model, x_num, x_cat, cache)
    finally:
        model.training = was
    if ds.task == "regression":
        truth = ds.destandardize(y)
        return float(np.sqrt(np.mean((pred.value - truth) ** 2)))
    return float(np.mean(pred.label == y))


def _train_loss(model: Model, out, labels) -> Tensor:
    total = loss(out.logits, labels, model.config.task)
    coef = model.config.aux_loss_coef
    if coef:
        for block in out.encoder.branch_cls_t:
            for j in range(block.shape[0]):
                cls = getitem(block, j)
                total = add(total, mul(loss(model.predictor(cls), labels, model.config.task), coef))
    return total


def fit(model: Model, ds: EncodedDataset, seed: int = 0, max_epochs: Optional[int] = None,
        patience: Optional[int] = None, log_every: int = 0) -> Tuple[TrainReport, Optional[CandidateCache]]:
    """Train with early stopping on the validation metric.

    On return the model holds the best-validation weights (eval mode) and the
    returned cache was built from them.
    """
    cfg = model.config
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    patience = cfg.patience if patience is None else patience
    model.target_mean, model.target_std = ds.target_mean, ds.target_std
    model.data_fingerprint = ds.fingerprint()
    opt = AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    report = TrainReport(seed=seed, metric=metric_name(cfg.task))
    better = (lambda a, b: a > b) if higher_is_better(cfg.task) else (lambda a, b: a < b)
    train_idx = ds.split.train
    needs_pairs = model.decoder is not None and cfg.mask_self
    tr_num, tr_cat, tr_y = ds.rows(train_idx)
    best_state, best_cache = model.state(), None
    since_best = 0
    start = time.perf_counter()

    for epoch in range(1, max_epochs + 1):
        model.train()
        losses = []
        try:
            for block_idx in batches(train_idx, cfg.batch_size, seed, epoch, shuffle=True,
                                     drop_singletons=needs_pairs):
                x_num, x_cat, y = ds.rows(block_idx)
                out = forward_train(model, x_num, x_cat, y)
                objective = _train_loss(model, out, y)
                model.zero_grad()
                backward(objective)
                opt.step()
                for state, cls in zip(model.encoder.weight_states, out.branch_cls):
                    if state.enabled:
                        update_branch_weights(state, cls, y, model.predictor, model.loss_kind)
                losses.append(objective.item())
        except FloatingPointError as e:
            model.load_state(best_state)
            model.eval()
            report.wall_time = time.perf_counter() - start
            raise DivergenceError(f"training diverged at epoch {epoch}: {e}", report) from e

        model.eval()
        cache = model.build_cache(tr_num, tr_cat, tr_y) if model.decoder is not None else None
        val = evaluate(model, cache, ds, "val")
        is_best = epoch == 1 or better(val, report.best_val)
        if is_best:
            report.best_epoch, report.best_val = epoch, val
            best_state, best_cache = model.state(), cache
            since_best = 0
        else:
            since_best += 1
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), val, is_best))
        report.wb_trace.append(model.branch_weights())
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.5f val %s %.5f", epoch, report.epochs[-1].train_loss, report.metric, val)
        if since_best >= patience:
            break

    model.load_state(best_state)
    model.eval()
    report.checkpoint_hash = model.fingerprint()
    report.test_metric = evaluate(model, best_cache, ds, "test")
    report.wall_time = time.perf_counter() - start
    return report, best_cache


# ---------------------------------------------------------------------------
# multi-seed runs and ranking


def average_ranks(values: Sequence[float], higher_better: bool) -> np.ndarray:
    """Rank 1 is best; ties share the average of their ranks."""
    v = np.asarray(values, dtype=np.float64)
    return rankdata(-v if higher_better else v, method="average")


@dataclass
class SummaryRow:
    config: str
    dataset: str
    mean: float
    std: float
    rank: float
    n_seeds: int
    metrics: List[float] = field(default_factory=list)
    param_ratio: Optional[float] = None

    @property
    def single_seed(self) -> bool:
        return self.n_seeds == 1


def _run_one(args) -> float:
    config, ds, seed = args
    model = build(config, ds.info, seed)
    report, _ = fit(model, ds, seed)
    return report.test_metric


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MAYA_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def multi_seed(configs: Mapping[str, ModelConfig], datasets: Mapping[str, EncodedDataset],
               seeds: Sequence[int]) -> List[SummaryRow]:
    """Fit every (config, dataset, seed); report mean/std of the test metric
    and each config's rank among configs on every dataset."""
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [(c, d, s) for d in datasets for c in configs for s in seeds]
    payload = [(configs[c], datasets[d], s) for c, d, s in jobs]
    workers = _workers()
    if workers > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, payload))
    else:
        results = [_run_one(p) for p in payload]
    by_key: Dict[Tuple[str, str], List[float]] = {}
    for (c, d, _), r in zip(jobs, results):
        by_key.setdefault((c, d), []).append(r)
    return summarize(by_key, {d: datasets[d].task for d in datasets}, list(configs))


def summarize(metrics: Mapping[Tuple[str, str], Sequence[float]], tasks: Mapping[str, str],
              config_order: Sequence[str]) -> List[SummaryRow]:
    rows = []
    for d, task in tasks.items():
        names = [c for c in config_order if (c, d) in metrics]
        means = [float(np.mean(metrics[(c, d)])) for c in names]
        ranks = average_ranks(means, higher_is_better(task))
        for c, m, r in zip(names, means, ranks):
            vals = list(metrics[(c, d)])
            std = float(np.std(vals)) if len(vals) > 1 else 0.0
            rows.append(SummaryRow(c, d, m, std, float(r), len(vals), vals))
    return rows


def mean_rank(rows: Sequence[SummaryRow]) -> Dict[str, float]:
    out: Dict[str, List[float]] = {}
    for r in rows:
        out.setdefault(r.config, []).append(r.rank)
    return {c: float(np.mean(v)) for c, v in out.items()}


def write_summary(rows: Sequence[SummaryRow], path, seeds: Sequence[int] = ()) -> None:
    with open(path, "w", newline="") as fh:
        if seeds:
            fh.write(f"# seeds={','.join(str(s) for s in seeds)}\n")
        w = csv.writer(fh)
        w.writerow(["config", "dataset", "mean", "std", "rank", "n_seeds", "single_seed", "param_ratio"])
        for r in rows:
            w.writerow([r.config, r.dataset, repr(r.mean), repr(r.std), r.rank, r.n_seeds, int(r.single_seed),
                        "" if r.param_ratio is None else f"{r.param_ratio:.1f}"])
