"""Optimization, subject-level cross-validation, metrics and gating reports."""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import stats

from . import tensor as tn
from .data import make_batch
from .graphprior import PriorSpec
from .model import K_BANDS, ModelConfig, VMoGE
from .spectral import BAND_NAMES

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


class DivergenceError(ArithmeticError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    batch_size: int = 16
    lambda_kl: float = 0.6
    prior: str = "normalized-laplacian-shift"
    lambda_shift: float = 0.1
    granularity: str = "medium"
    mixture: str = "prob"
    seed: int = 0
    folds: int = 5
    paper_kl_sign: bool = False
    eval_samples: int = 8
    d_token: int = 16
    heads: int = 2
    layers: int = 2
    d_h: int = 16
    aggregation: str = "mean"
    max_len: int = 512
    d_g: int = 16
    d_z: int = 8
    add_self_loops: bool = False
    gate_warmup: int = 0  # epochs with the gate frozen
    gate_lr_scale: float = 1.0  # gate learning rate relative to lr
    logsig_init: float = -3.0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("invalid optimizer settings")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.gate_warmup < 0:
            raise ValueError("gate_warmup must be >= 0")
        if self.gate_lr_scale <= 0:
            raise ValueError("gate_lr_scale must be > 0")
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be >= 0")
        self.prior = PriorSpec(self.prior, self.lambda_shift).variant

    @property
    def prior_spec(self):
        return PriorSpec(self.prior, self.lambda_shift)

    def model_config(self):
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class GatingRecord:
    subject: str
    epoch: int
    label: int
    pi: np.ndarray
    p_hat: float
    age: float | None = None
    score: float | None = None


@dataclass
class FoldResult:
    fold: int
    auc: float | None  # subject level
    acc: float
    epoch_auc: float | None
    epoch_acc: float
    gating_by_class: dict
    records: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    attribution_sum: np.ndarray | None = None  # (K, C) sum of pi_k * ||mu_c^(k)||
    n_test: int = 0


# -- optimizer -----------------------------------------------------------


def adam_step(store, grads=None, lr=1e-3, betas=(0.9, 0.999), t=None, lr_scale=None):
    """Bias-corrected Adam update in place. Non-finite gradients skip the step.

    ``lr_scale`` optionally maps parameter names to a multiplier on ``lr``.
    """
    if grads is None:
        grads = {k: p.grad for k, p in store.items()}
    for k, g in grads.items():
        if g is None or not np.all(np.isfinite(g)):
            store.skipped += 1
            log.warning("non-finite gradient in %s; step skipped", k)
            return store
    t = store.t + 1 if t is None else t
    if t < 1:
        raise ValueError("adam step index must be >= 1")
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in store.items():
        g = grads[k]
        m = store.m.get(k)
        if m is None:
            m = store.m[k] = np.zeros_like(p.data)
            store.v[k] = np.zeros_like(p.data)
        v = store.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr if lr_scale is None else lr * lr_scale.get(k, 1.0)
        p.data -= step * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    store.t = t
    return store


# -- folds and metrics ---------------------------------------------------


def subject_kfold(subject_labels, folds, seed):
    """Stratified subject-level fold ids.

    ``subject_labels`` maps subject key -> class. Returns {subject: fold}.
    """
    rng = np.random.default_rng(seed)
    assignment = {}
    offset = 0
    for cls in sorted(set(subject_labels.values())):
        members = sorted(s for s, y in subject_labels.items() if y == cls)
        if len(members) < folds:
            raise ValueError(f"class {cls} has {len(members)} subjects, fewer than {folds} folds")
        order = rng.permutation(len(members))
        for j, i in enumerate(order):
            assignment[members[i]] = (offset + j) % folds
        offset += len(members)
    return assignment


def auc(scores, labels):
    """Mann-Whitney AUC, ties counted half; None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return None
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def accuracy(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        return float("nan")
    return float(np.mean((scores >= threshold).astype(int) == labels))


def pearson_r(x, y):
    """Sample correlation and two-sided t-test p value; None if undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3 or y.size != n:
        return None
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        return None
    r = float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


# -- training ------------------------------------------------------------


def train_model(features, config, seed=None, trace_extra=None):
    """Mini-batch Adam on the negative ELBO. Returns (model, trace records)."""
    seed = config.seed if seed is None else seed
    if len(features) == 0 or len(set(features.labels.tolist())) < 2:
        raise ValueError("training split must be non-empty and contain both classes")
    model = VMoGE(config.model_config(), features.fs, seed=seed)
    batch = make_batch(features, config.prior_spec, config.add_self_loops)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    trace = []
    extra = trace_extra or {}
    step = 0
    n = len(batch)
    C = features.n_channels
    gate_names = [k for k in model.store if ".gate." in k or ".phi." in k]
    gate_params = [model.store[k] for k in gate_names]
    scales = {k: config.gate_lr_scale for k in gate_names} if config.gate_lr_scale != 1.0 else None
    for ep in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            b = batch.take(perm[s : s + config.batch_size])
            model.store.zero_grad()
            root, br = model.loss(b, config.lambda_kl, eps=model.draw_eps(rng, len(b), C),
                                  paper_sign=config.paper_kl_sign)
            step += 1
            trace.append(br.as_record(step, epoch=ep + 1, **extra))
            if not np.isfinite(br.total):
                raise DivergenceError(f"loss became non-finite at step {step}", trace)
            root.backward()
            if ep < config.gate_warmup:
                for p in gate_params:
                    p.grad[...] = 0.0
            adam_step(model.store, lr=config.lr, betas=(config.beta1, config.beta2), lr_scale=scales)
    return model, trace


def _fold_seed(seed, fold):
    return int(np.random.SeedSequence([int(seed), 1000 + int(fold)]).generate_state(1)[0])


def run_fold(features, config, assignment, fold):
    """Train on all folds but ``fold`` and evaluate on it."""
    fold_of = np.array([assignment[int(s)] for s in features.subject_index])
    tr = np.flatnonzero(fold_of != fold)
    te = np.flatnonzero(fold_of == fold)
    fseed = _fold_seed(config.seed, fold)
    model, trace = train_model(features.subset(tr), config, seed=fseed, trace_extra={"fold": fold})
    test = features.subset(te)
    out, mu_norms = model.predict(make_batch(test, config.prior_spec, config.add_self_loops),
                                  samples=config.eval_samples,
                                  rng=np.random.default_rng(np.random.SeedSequence([fseed, 2])))
    y = test.labels
    subj = sorted(set(test.subject_index.tolist()))
    s_score = np.array([out.p_hat[test.subject_index == s].mean() for s in subj])
    s_label = np.array([y[test.subject_index == s][0] for s in subj])
    gating = {int(c): out.pi[y == c].mean(axis=0).tolist() for c in (0, 1) if np.any(y == c)}
    records = []
    for i in range(len(test)):
        name = test.subjects[test.subject_index[i]]
        cov = test.covariates.get(name, {})
        records.append(GatingRecord(name, int(test.epoch_index[i]), int(y[i]), out.pi[i].copy(),
                                    float(out.p_hat[i]), cov.get("age"), cov.get("score")))
    attribution = (out.pi[:, :, None] * mu_norms).sum(axis=0)
    return FoldResult(
        fold=fold, auc=auc(s_score, s_label), acc=accuracy(s_score, s_label),
        epoch_auc=auc(out.p_hat, y), epoch_acc=accuracy(out.p_hat, y),
        gating_by_class=gating, records=records, trace=trace,
        attribution_sum=attribution, n_test=len(test),
    ), model


def _run_fold_worker(args):
    features, config, assignment, fold = args
    res, model = run_fold(features, config, assignment, fold)
    return res, model.store.state_dict()


def worker_count():
    n = int(os.environ.get("VMOGE_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass
class CVResult:
    folds: list
    states: list  # fold parameter dicts

    def aggregate(self):
        out = {}
        for key in ("auc", "acc", "epoch_auc", "epoch_acc"):
            vals = [getattr(f, key) for f in self.folds if getattr(f, key) is not None]
            out[key] = {"mean": float(np.mean(vals)) if vals else None,
                        "std": float(np.std(vals)) if vals else None}
        return out

    @property
    def records(self):
        return [r for f in self.folds for r in f.records]

    def mean_gating(self):
        return np.mean([r.pi for r in self.records], axis=0)

    def attribution(self):
        """(K, C) mean of pi_k * ||mu_c^(k)|| over test samples, max-normalized per band."""
        total = sum(f.attribution_sum for f in self.folds)
        n = sum(f.n_test for f in self.folds)
        att = total / n
        peak = att.max(axis=1, keepdims=True)
        return np.divide(att, peak, out=np.zeros_like(att), where=peak > 0)

    def metrics(self):
        return {
            "folds": [
                {"fold": f.fold, "auc": f.auc, "acc": f.acc, "epoch_auc": f.epoch_auc,
                 "epoch_acc": f.epoch_acc,
                 "gating_mean_by_class": {str(c): v for c, v in sorted(f.gating_by_class.items())}}
                for f in self.folds
            ],
            "aggregate": self.aggregate(),
            "gating_mean": dict(zip(BAND_NAMES, self.mean_gating().tolist())),
        }


def cross_validate(features, config, workers=None):
    subj_labels = features.subject_labels()
    assignment = subject_kfold(subj_labels, config.folds, config.seed)
    workers = worker_count() if workers is None else workers
    jobs = [(features, config, assignment, k) for k in range(config.folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.folds)) as ex:
            done = list(ex.map(_run_fold_worker, jobs))
    else:
        done = [_run_fold_worker(j) for j in jobs]
    return CVResult([d[0] for d in done], [d[1] for d in done])


# -- reports -------------------------------------------------------------


def gating_report(records, attribution=None):
    """Quartiles of band weights per class, optional attribution, covariate correlations."""
    if not records:
        raise ValueError("no gating records")
    pis = np.array([r.pi for r in records])
    labels = np.array([r.label for r in records])
    quart = []
    for c in sorted(set(labels.tolist())):
        sel = pis[labels == c]
        for k, band in enumerate(BAND_NAMES):
            q1, med, q3 = np.percentile(sel[:, k], [25, 50, 75])
            quart.append({"label": int(c), "band": band, "mean": float(sel[:, k].mean()),
                          "q1": float(q1), "median": float(med), "q3": float(q3),
                          "iqr": float(q3 - q1)})
    contrast = {}
    if {0, 1} <= set(labels.tolist()):
        gap = pis[labels == 1].mean(axis=0) - pis[labels == 0].mean(axis=0)
        contrast = dict(zip(BAND_NAMES, gap.tolist()))
    corr = []
    for cov in ("age", "score"):
        vals = [getattr(r, cov) for r in records]
        if any(v is None for v in vals):
            continue
        for k, band in enumerate(BAND_NAMES):
            res = pearson_r(pis[:, k], vals)
            if res is not None:
                corr.append({"band": band, "covariate": cov, "r": res[0], "p": res[1]})
    report = {"quartiles": quart, "class_contrast": contrast, "correlations": corr}
    if attribution is not None:
        report["attribution"] = [
            {"band": BAND_NAMES[k], "channel": c, "value": float(attribution[k, c])}
            for k in range(attribution.shape[0]) for c in range(attribution.shape[1])
        ]
    return report


__all__ = [
    "TrainConfig", "GatingRecord", "FoldResult", "CVResult", "DivergenceError", "adam_step",
    "subject_kfold", "auc", "accuracy", "pearson_r", "train_model", "run_fold",
    "cross_validate", "gating_report", "K_BANDS",
]
