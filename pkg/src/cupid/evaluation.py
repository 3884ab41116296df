"""Downstream evaluation: patient-disjoint folds, linear probing, fine-tuning and metrics."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    ModelConfig,
    ModelParams,
    encode_full,
    encoder_param_names,
    patchify,
    random_mask,
    represent,
    forward,
)
from .preprocessing import EcgWindow
from .training import OptimizerState, adamw_step

log = logging.getLogger(__name__)


class EvaluationConfigError(ValueError):
    pass


# -- folds ------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: frozenset
    val: frozenset
    test: frozenset


def make_folds(patient_ids: Iterable[str], n_folds: int = 5, seed: int = 0) -> list[Fold]:
    """Rotate ``n_folds`` patient groups: one for test, the next for validation, the rest train.

    With five folds this yields 60/20/20 by patient count.
    """
    patients = sorted(set(patient_ids))
    if len(patients) < n_folds:
        raise EvaluationConfigError(f"{len(patients)} patients cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    groups = [frozenset(patients[i] for i in order[g::n_folds]) for g in range(n_folds)]
    folds = []
    for f in range(n_folds):
        test, val = groups[f], groups[(f + 1) % n_folds]
        train = frozenset().union(*(groups[g] for g in range(n_folds) if g not in (f, (f + 1) % n_folds)))
        folds.append(Fold(train, val, test))
    verify_folds(folds)
    return folds


def verify_folds(folds: Sequence[Fold]) -> None:
    for k, f in enumerate(folds):
        if f.train & f.val or f.train & f.test or f.val & f.test:
            raise AssertionError(f"fold {k} shares patients between partitions")


def single_split(patient_ids: Sequence[str], test_patients: Iterable[str],
                 val_fraction: float = 0.2, seed: int = 0) -> list[Fold]:
    """One fold from a prescribed test set; validation patients drawn from the remainder."""
    test = frozenset(test_patients)
    rest = sorted(set(patient_ids) - test)
    order = np.random.default_rng(seed).permutation(len(rest))
    n_val = max(1, int(round(val_fraction * len(rest))))
    val = frozenset(rest[i] for i in order[:n_val])
    return [Fold(frozenset(rest) - val, val, test)]


def read_split_file(path: str | Path) -> set[str]:
    """Test-set record ids from a ``record,split`` CSV (rows whose split is 'test')."""
    out = set()
    with open(path) as fh:
        for row in csv.reader(fh):
            if len(row) >= 2 and row[1].strip().lower() == "test":
                out.add(row[0].strip())
    return out


def stratified_split(labels: Sequence[int], patient_ids: Sequence[str], test_fraction: float = 0.2,
                     seed: int = 0) -> list[Fold]:
    """Fallback when no official split is supplied: patients stratified by their majority label."""
    warnings.warn("no split file supplied; using a seeded stratified patient split", stacklevel=2)
    by_patient: dict[str, list[int]] = {}
    for y, p in zip(labels, patient_ids):
        by_patient.setdefault(p, []).append(int(y))
    rng = np.random.default_rng(seed)
    test: set[str] = set()
    majority: dict[int, list[str]] = {}
    for p in sorted(by_patient):
        majority.setdefault(int(np.bincount(by_patient[p]).argmax()), []).append(p)
    for cls in sorted(majority):
        group = majority[cls]
        picks = rng.permutation(len(group))[: max(1, int(round(test_fraction * len(group))))]
        test.update(group[i] for i in picks)
    return single_split(patient_ids, test, seed=seed)


def fold_indices(patient_ids: Sequence[str], fold: Fold) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pids = np.asarray(patient_ids)
    pick = lambda s: np.flatnonzero(np.isin(pids, sorted(s)))  # noqa: E731
    return pick(fold.train), pick(fold.val), pick(fold.test)


# -- metrics ------------------------------------------------------------------


def rank_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with mid-ranks for ties."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    order = np.argsort(scores, kind="mergesort")
    s = np.asarray(scores)[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    r = np.empty_like(ranks)
    r[order] = ranks
    return float((r[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics(y_true: Sequence[int], y_score: np.ndarray) -> dict[str, float]:
    """Accuracy (argmax), macro F1 and macro one-vs-rest AUC.

    Classes absent from ``y_true`` are left out of the macro means.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_score = np.atleast_2d(np.asarray(y_score, dtype=np.float64))
    n_classes = y_score.shape[1]
    pred = y_score.argmax(axis=1)
    acc = float(np.mean(pred == y_true))
    f1s, aucs = [], []
    for c in range(n_classes):
        actual = y_true == c
        if not actual.any():
            warnings.warn(f"class {c} absent from y_true; excluded from macro F1/AUC", stacklevel=2)
            continue
        tp = np.sum(actual & (pred == c))
        fp = np.sum(~actual & (pred == c))
        fn = np.sum(actual & (pred != c))
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
        auc = rank_auc(actual, y_score[:, c])
        if not math.isnan(auc):
            aucs.append(auc)
    return {
        "accuracy": acc,
        "f1": float(np.mean(f1s)) if f1s else math.nan,
        "auc": float(np.mean(aucs)) if aucs else math.nan,
    }


@dataclass
class MetricReport:
    folds: list[dict[str, float]] = field(default_factory=list)

    def mean(self, key: str) -> float:
        vals = [f[key] for f in self.folds if not math.isnan(f[key])]
        return float(np.mean(vals)) if vals else math.nan

    def std(self, key: str) -> float:
        vals = [f[key] for f in self.folds if not math.isnan(f[key])]
        return float(np.std(vals)) if vals else math.nan

    def summary(self) -> dict[str, float]:
        out = {}
        for key in ("accuracy", "f1", "auc"):
            out[key] = self.mean(key)
            out[f"{key}_std"] = self.std(key)
        return out


# -- logistic regression probe ------------------------------------------------------


class LogisticProbe:
    """Multinomial logistic regression fitted by full-batch gradient descent.

    Features are standardised with training statistics; weights start at zero
    so the fit is deterministic. Stops when the gradient norm drops below
    ``tol`` or after ``max_steps`` steps.
    """

    def __init__(self, l2: float = 1e-4, max_steps: int = 10_000, tol: float = 1e-6):
        self.l2 = l2
        self.max_steps = max_steps
        self.tol = tol

    def fit(self, X: np.ndarray, y: Sequence[int], n_classes: int | None = None) -> "LogisticProbe":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=int)
        C = int(n_classes if n_classes is not None else y.max() + 1)
        self.mu = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd = np.where(sd > 1e-12, sd, 1.0)
        Z = (X - self.mu) / self.sd
        n, d = Z.shape
        Y = np.eye(C)[y]
        W = np.zeros((d, C))
        b = np.zeros(C)
        smooth = 0.5 * (np.linalg.norm(Z, 2) ** 2 / n + 1.0) + self.l2
        step = 1.0 / smooth
        self.steps = 0
        for self.steps in range(1, self.max_steps + 1):
            P = _softmax_rows(Z @ W + b)
            R = (P - Y) / n
            gW = Z.T @ R + self.l2 * W
            gb = R.sum(axis=0)
            if math.sqrt(np.sum(gW * gW) + np.sum(gb * gb)) < self.tol:
                break
            W -= step * gW
            b -= step * gb
        self.W, self.b = W, b
        return self

    def raw_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Equivalent weights acting on unstandardised features."""
        W = self.W / self.sd[:, None]
        return W, self.b - self.mu @ W

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mu) / self.sd
        return _softmax_rows(Z @ self.W + self.b)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(representations: np.ndarray, labels: Sequence[int], patient_ids: Sequence[str],
                 folds: Sequence[Fold], l2: float = 1e-4) -> MetricReport:
    X = np.asarray(representations)
    y = np.asarray(labels, dtype=int)
    n_classes = int(y.max()) + 1
    report = MetricReport()
    for k, fold in enumerate(folds):
        tr, _, te = fold_indices(patient_ids, fold)
        if len(np.unique(y[tr])) < 2:
            warnings.warn(f"fold {k}: training split holds a single class; skipped", stacklevel=2)
            continue
        if len(te) == 0:
            warnings.warn(f"fold {k}: empty test split; skipped", stacklevel=2)
            continue
        probe = LogisticProbe(l2).fit(X[tr], y[tr], n_classes)
        report.folds.append(metrics(y[te], probe.predict_proba(X[te])))
    return report


# -- fine-tuning ---------------------------------------------------------------------


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to improve the best validation loss."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad = 0

    def step(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad = val_loss, self.epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def _classifier_logits(enc: Mapping[str, Tensor], head_w: Tensor, head_b: Tensor,
                       config: ModelConfig, x: np.ndarray) -> Tensor:
    pooled = ad.mean(encode_full(enc, config, x), axis=1)
    return ad.add(ad.matmul(pooled, head_w), head_b)


def _predict(enc, head_w, head_b, config, x, batch_size=256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(ad.softmax(_classifier_logits(enc, head_w, head_b, config, x[s:s + batch_size])).data)
    return np.concatenate(out).astype(np.float64)


def _val_loss(enc, head_w, head_b, config, x, y, batch_size=256) -> float:
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            logits = _classifier_logits(enc, head_w, head_b, config, x[s:s + batch_size])
            total += float(ad.cross_entropy(logits, y[s:s + batch_size]).data) * len(logits)
    return total / len(x)


def fine_tune(params: Mapping[str, Tensor], config: ModelConfig, x: np.ndarray,
              labels: Sequence[int], patient_ids: Sequence[str], folds: Sequence[Fold],
              lr: float = 1e-4, patience: int = 5, max_epochs: int = 50, batch_size: int = 32,
              seed: int = 0, l2: float = 1e-4) -> MetricReport:
    """Jointly update the encoder and a linear head with Adam, early-stopped on validation loss.

    The head starts from the linear-probe solution on frozen training features,
    so ``lr=0`` reproduces linear probing exactly. Test metrics use the
    weights from the best validation epoch.
    """
    x = np.asarray(x, dtype=config.np_dtype)
    y = np.asarray(labels, dtype=int)
    n_classes = int(y.max()) + 1
    names = encoder_param_names(params)
    report = MetricReport()
    for k, fold in enumerate(folds):
        tr, va, te = fold_indices(patient_ids, fold)
        if len(va) == 0:
            raise EvaluationConfigError(f"fold {k}: validation split is empty")
        if len(np.unique(y[tr])) < 2:
            warnings.warn(f"fold {k}: training split holds a single class; skipped", stacklevel=2)
            continue
        enc = {n: Tensor(params[n].data.copy(), requires_grad=True) for n in names}
        probe = LogisticProbe(l2).fit(represent(enc, config, x[tr]), y[tr], n_classes)
        w0, b0 = probe.raw_weights()
        head_w = Tensor(w0.astype(config.np_dtype), requires_grad=True)
        head_b = Tensor(b0.astype(config.np_dtype), requires_grad=True)
        trainable = dict(enc, **{"head.w": head_w, "head.b": head_b})
        state = OptimizerState()
        stopper = EarlyStopping(patience)
        best = {n: t.data.copy() for n, t in trainable.items()}
        rng = np.random.default_rng([seed, k])
        for _ in range(max_epochs):
            if lr > 0:
                order = rng.permutation(tr)
                for s in range(0, len(order), batch_size):
                    idx = order[s:s + batch_size]
                    ad.parameters_zero_grad(trainable.values())
                    loss = ad.cross_entropy(_classifier_logits(enc, head_w, head_b, config, x[idx]), y[idx])
                    loss.backward()
                    adamw_step(trainable, state, lr, weight_decay=0.0)
            stop = stopper.step(_val_loss(enc, head_w, head_b, config, x[va], y[va]))
            if stopper.best_epoch == stopper.epoch:
                best = {n: t.data.copy() for n, t in trainable.items()}
            if stop or lr == 0:
                break
        for n, t in trainable.items():
            t.data = best[n]
        report.folds.append(metrics(y[te], _predict(enc, head_w, head_b, config, x[te])))
    return report


# -- SDNN-stratified reconstruction error ------------------------------------------------


def per_window_masked_l1(params: Mapping[str, Tensor], config: ModelConfig, x: np.ndarray,
                         masked: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Masked L1 of each window separately (no gradient)."""
    from .model import MaskSpec

    x = np.asarray(x, dtype=config.np_dtype)
    out = []
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            mask = MaskSpec(masked[s:s + batch_size])
            _, recon = forward(params, config, x[s:s + batch_size], mask)
            target = patchify(x[s:s + batch_size], config.patch_size)
            per_patch = np.abs(recon.data - target).mean(axis=-1)
            out.append((per_patch * mask.masked).sum(axis=1) / mask.masked.sum(axis=1))
    return np.concatenate(out).astype(np.float64)


DEFAULT_SDNN_EDGES = (0.0, 50.0, 100.0, math.inf)


def sdnn_stratified_error(models: Mapping[str, tuple[ModelConfig, Mapping[str, Tensor]]],
                          windows: Sequence[EcgWindow], edges: Sequence[float] = DEFAULT_SDNN_EDGES,
                          seed: int = 0) -> list[dict]:
    """Mean masked L1 per SDNN bin ``[lo, hi)`` for each model, all using the same masks."""
    keep = [w for w in windows if w.sdnn_ms is not None and not math.isnan(w.sdnn_ms)]
    sdnn = np.array([w.sdnn_ms for w in keep])
    x = np.stack([w.samples for w in keep]) if keep else np.zeros((0, 0))
    configs = [cfg for cfg, _ in models.values()]
    N, ratio = configs[0].n_patches, configs[0].mask_ratio
    rng = np.random.default_rng([seed, 7])
    masked = random_mask(N, ratio, rng, batch=len(keep)).masked if keep else np.zeros((0, N), bool)
    losses = {name: per_window_masked_l1(p, cfg, x, masked) if keep else np.zeros(0)
              for name, (cfg, p) in models.items()}
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (sdnn >= lo) & (sdnn < hi)
        row = {"bin_lo": lo, "bin_hi": hi, "count": int(sel.sum())}
        for name, vals in losses.items():
            row[f"{name}_loss"] = float(vals[sel].mean()) if sel.any() else math.nan
        rows.append(row)
    return rows


def write_csv(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


SDNN_COLUMNS = ("bin_lo", "bin_hi", "count", "mtae_loss", "cupid_loss")
RESULT_COLUMNS = ("dataset", "variant", "fold", "accuracy", "f1", "auc")


def result_rows(dataset: str, variant: str, report: MetricReport) -> list[dict]:
    return [dict(dataset=dataset, variant=variant, fold=k, **m) for k, m in enumerate(report.folds)]


# -- ablation sweeps ------------------------------------------------------------------------


@dataclass
class SweepGrid:
    patch_size: list[int] = field(default_factory=lambda: [20])
    mask_ratio: list[float] = field(default_factory=lambda: [0.4])
    iterations: list[int] = field(default_factory=lambda: [45_000])
    enc_blocks: list[int] = field(default_factory=lambda: [4])

    def cells(self):
        for ps in self.patch_size:
            for mr in self.mask_ratio:
                for it in self.iterations:
                    for eb in self.enc_blocks:
                        yield ps, mr, it, eb


def sweep(grid: SweepGrid, pretrain_windows: Sequence[EcgWindow],
          datasets: Mapping[str, Sequence[EcgWindow]], base_model: ModelConfig, base_train,
          pretrain: Callable, n_folds: int = 5, seed: int = 0) -> list[dict]:
    """One pretrain + linear-probe run per grid cell and variant.

    ``pretrain(windows, model_config, train_config)`` must return trained
    parameters. Rows carry mean/std probe accuracy per dataset for both
    variants, mirroring an ablation table (PS, MR, MTAE, CuPID).
    """
    rows = []
    for ps, mr, it, eb in grid.cells():
        row: dict = {"patch_size": ps, "mask_ratio": mr, "iterations": it, "enc_blocks": eb, "skipped": ""}
        if base_model.window_len % ps:
            row["skipped"] = f"patch size {ps} does not divide {base_model.window_len}"
            rows.append(row)
            continue
        for variant in ("mtae", "cupid"):
            cfg = replace(base_model, patch_size=ps, mask_ratio=mr, enc_blocks=eb, variant=variant)
            params = pretrain(pretrain_windows, cfg, replace(base_train, iterations=it))
            for name, ws in datasets.items():
                pids = [w.patient_id for w in ws]
                labels = [w.label for w in ws]
                reps = represent(params, cfg, np.stack([w.samples for w in ws]))
                rep = linear_probe(reps, labels, pids, make_folds(pids, n_folds, seed))
                row[f"{name}_{variant}_acc"] = rep.mean("accuracy")
                row[f"{name}_{variant}_acc_std"] = rep.std("accuracy")
        rows.append(row)
    return rows


def sweep_columns(dataset_names: Sequence[str]) -> list[str]:
    cols = ["patch_size", "mask_ratio", "iterations", "enc_blocks"]
    for name in dataset_names:
        for variant in ("mtae", "cupid"):
            cols += [f"{name}_{variant}_acc", f"{name}_{variant}_acc_std"]
    return cols + ["skipped"]
