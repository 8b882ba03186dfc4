"""Disentanglement scores, histogram mutual information and rank correlation.

Every score lands in [0, 1]. Classifier-based scores use scikit-learn
estimators seeded from the caller's generator.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score, mutual_info_score
from sklearn.preprocessing import StandardScaler
from sklearn.tree import DecisionTreeClassifier

from . import settings
from .exceptions import InsufficientDataError, ShapeError

logger = logging.getLogger(__name__)

METRICS = ["betavae", "factorvae", "mig", "dci", "modularity", "sap"]
METRIC_COLUMNS = ["checkpoint", "dataset", "latent_kind", "objective", "seed", "gamma", "omega",
                  *METRICS, "st_gap", "recon", "kl", "neg_elbo", "sup_val"]


@dataclass
class RepresentationTable:
    reps: np.ndarray
    factors: np.ndarray
    discrete: list | None = None

    def __post_init__(self):
        self.reps = np.asarray(self.reps, dtype=np.float64)
        self.factors = np.asarray(self.factors, dtype=np.float64)
        if self.reps.ndim == 1:
            self.reps = self.reps[:, None]
        if self.factors.ndim == 1:
            self.factors = self.factors[:, None]
        if len(self.reps) != len(self.factors):
            raise ShapeError(f"{len(self.reps)} representation rows but {len(self.factors)} factor rows")
        if self.reps.shape[1] < 1 or self.factors.shape[1] < 1:
            raise ShapeError("a representation table needs at least one dimension and one factor")
        if self.discrete is None:
            self.discrete = [True] * self.factors.shape[1]

    @property
    def n(self) -> int:
        return self.reps.shape[1]

    @property
    def k(self) -> int:
        return self.factors.shape[1]

    def factor_codes(self, bins: int = settings.MI_BINS) -> np.ndarray:
        cols = [self.factors[:, j].astype(np.int64) if d else discretize(self.factors[:, j], bins)
                for j, d in enumerate(self.discrete)]
        return np.stack(cols, axis=1)


def discretize(column, bins: int = settings.MI_BINS) -> np.ndarray:
    """Equal-width bin codes 0..bins-1 over [min, max]; a constant column is all 0."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    column = np.asarray(column, dtype=np.float64)
    if column.size == 0 or column.min() == column.max():
        return np.zeros(column.shape, dtype=np.int64)
    edges = np.histogram_bin_edges(column, bins=bins)
    return np.digitize(column, edges[1:-1]).astype(np.int64)


def discretize_table(reps, bins: int = settings.MI_BINS) -> np.ndarray:
    reps = np.asarray(reps, dtype=np.float64)
    return np.stack([discretize(reps[:, i], bins) for i in range(reps.shape[1])], axis=1)


def mutual_info_matrix(codes, factors) -> np.ndarray:
    """Plug-in MI (nats) between every code column and every factor column."""
    codes = np.asarray(codes)
    factors = np.asarray(factors)
    out = np.zeros((codes.shape[1], factors.shape[1]))
    for i in range(codes.shape[1]):
        for j in range(factors.shape[1]):
            out[i, j] = mutual_info_score(factors[:, j], codes[:, i])
    return np.maximum(out, 0.0)


def entropies(codes) -> np.ndarray:
    codes = np.asarray(codes)
    return np.array([stats.entropy(np.unique(codes[:, j], return_counts=True)[1]) for j in range(codes.shape[1])])


def _mi(table: RepresentationTable, bins: int):
    fcodes = table.factor_codes(bins)
    return mutual_info_matrix(discretize_table(table.reps, bins), fcodes), entropies(fcodes)


def _informative(h: np.ndarray) -> np.ndarray:
    keep = h > 0
    for j in np.flatnonzero(~keep):
        logger.warning("factor %d is constant and is left out", j)
    if not keep.any():
        raise InsufficientDataError("every factor is constant")
    return keep


def _top_gap(scores: np.ndarray) -> np.ndarray:
    """Per column: largest minus second largest entry (second is 0 for one row)."""
    ordered = np.sort(scores, axis=0)[::-1]
    second = ordered[1] if len(ordered) > 1 else np.zeros(scores.shape[1])
    return ordered[0] - second


def mig(table: RepresentationTable, bins: int = settings.MI_BINS) -> float:
    mi, h = _mi(table, bins)
    keep = _informative(h)
    gaps = _top_gap(mi[:, keep]) / h[keep]
    return float(np.clip(gaps.mean(), 0.0, 1.0))


def modularity(table: RepresentationTable, bins: int = settings.MI_BINS) -> float:
    mi, _ = _mi(table, bins)
    if table.k == 1:
        return 1.0
    scores = []
    for row in mi:
        best = row.max()
        if best <= 0:
            scores.append(1.0)
            continue
        off = (row ** 2).sum() - best ** 2
        scores.append(1.0 - off / (best ** 2 * (table.k - 1)))
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def axis_alignment(table: RepresentationTable, ratio: float = 2.0, bins: int = settings.MI_BINS) -> bool:
    """True when every latent dimension's top-factor MI is at least ``ratio`` times its runner-up."""
    mi, _ = _mi(table, bins)
    ordered = np.sort(mi, axis=1)[:, ::-1]
    if mi.shape[1] < 2:
        return True
    return bool(np.all(ordered[:, 0] >= ratio * ordered[:, 1]) and np.all(ordered[:, 0] > 0))


def sap(table: RepresentationTable, rng=None) -> float:
    """Mean top-two gap of per-dimension scores.

    Discrete factors score the held-out balanced accuracy of a single-threshold
    split, rescaled so chance is 0 and a perfect split is 1. Continuous factors
    score R^2 of a 1-D linear fit.
    """
    rng = rng or np.random.default_rng(0)
    keep = _informative(entropies(table.factor_codes()))
    half = len(table.reps) // 2
    if half < 2:
        raise InsufficientDataError("sap needs at least 4 rows")
    order = rng.permutation(len(table.reps))
    tr, te = order[:half], order[half:]
    scores = np.zeros((table.n, table.k))
    for j in range(table.k):
        y = table.factors[:, j]
        if not keep[j]:
            continue
        for i in range(table.n):
            x = table.reps[:, i]
            if table.discrete[j]:
                c = len(np.unique(y))
                stump = DecisionTreeClassifier(max_depth=1, random_state=0)
                stump.fit(x[tr, None], y[tr])
                bacc = balanced_accuracy_score(y[te], stump.predict(x[te, None]))
                scores[i, j] = max(0.0, (bacc - 1.0 / c) / (1.0 - 1.0 / c))
            elif x.std() > 0:
                scores[i, j] = np.corrcoef(x, y)[0, 1] ** 2
    return float(np.clip(_top_gap(scores[:, keep]).mean(), 0.0, 1.0))


def _logreg(n_rows: int, seed: int, **kw) -> LogisticRegression:
    params = {"C": 1.0 / (settings.LOGREG_L2 * max(n_rows, 1)), "max_iter": settings.LOGREG_ITERS, "random_state": seed}
    params.update(kw)
    return LogisticRegression(**params)


def _fit(clf, x, y):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return clf.fit(x, y)


class _Constant:
    def __init__(self, label):
        self.label = label

    def predict(self, x):
        return np.full(len(x), self.label)


def _fit_or_constant(clf, x, y):
    labels = np.unique(y)
    return _Constant(labels[0]) if len(labels) == 1 else _fit(clf, x, y)


def dci_from_importance(importance) -> float:
    """Importance-weighted mean over dims of 1 - entropy (base k) of the dim's factor distribution."""
    r = np.abs(np.asarray(importance, dtype=np.float64))
    col = r.sum(axis=0, keepdims=True)
    r = np.divide(r, col, out=np.zeros_like(r), where=col > 0)
    total = r.sum()
    if total == 0:
        return 0.0
    k = r.shape[1]
    row = r.sum(axis=1)
    scores = np.ones(len(r))
    if k > 1:
        for i in np.flatnonzero(row > 0):
            scores[i] = 1.0 - stats.entropy(r[i] / row[i], base=k)
    return float(np.clip((scores * row / total).sum(), 0.0, 1.0))


def dci_disentanglement(table: RepresentationTable, rng=None) -> float:
    rng = rng or np.random.default_rng(0)
    keep = _informative(entropies(table.factor_codes()))
    x = StandardScaler().fit_transform(table.reps)
    codes = table.factor_codes()
    importance = np.zeros((table.n, table.k))
    seed = int(rng.integers(2 ** 31))
    for j in np.flatnonzero(keep):
        clf = _fit(LogisticRegression(penalty="l1", solver="saga", C=1.0, max_iter=settings.LOGREG_ITERS,
                                      random_state=seed), x, codes[:, j])
        importance[:, j] = np.abs(clf.coef_).mean(axis=0)
    return dci_from_importance(importance[:, keep])


class FactorSampler:
    """Draws factor rows from a spec and maps them to representations with ``fn``."""

    def __init__(self, spec, fn):
        self.spec = spec
        self.fn = fn

    def sample_factors(self, num, rng):
        return self.spec.sample(rng, num)

    def represent(self, factors, rng):
        return np.asarray(self.fn(factors, rng), dtype=np.float64)


class DatasetSampler(FactorSampler):
    """Renders factors through a dataset and encodes them with a trained model."""

    def __init__(self, dataset, model):
        self.spec = dataset.spec
        self.dataset = dataset
        self.model = model

    def sample_factors(self, num, rng):
        return self.dataset.sample_factors(num, rng)

    def represent(self, factors, rng):
        return self.model.representation(self.dataset.observations_from_factors(factors, rng))


def _pair_features(sampler, num, batch, rng):
    k = sampler.spec.k
    labels = rng.integers(0, k, size=num)
    feats = []
    step = max(1, 4096 // batch)
    for lo in range(0, num, step):
        lab = labels[lo:lo + step]
        a = sampler.sample_factors(len(lab) * batch, rng)
        b = sampler.sample_factors(len(lab) * batch, rng)
        fixed = np.repeat(lab, batch)
        b[np.arange(len(b)), fixed] = a[np.arange(len(a)), fixed]
        diff = np.abs(sampler.represent(a, rng) - sampler.represent(b, rng))
        feats.append(diff.reshape(len(lab), batch, -1).mean(axis=1))
    return np.concatenate(feats), labels


def betavae_metric(sampler, rng, num_train: int = settings.METRIC_TRAIN, num_eval: int = settings.METRIC_EVAL,
                   batch: int = settings.METRIC_BATCH) -> float:
    if sampler.spec.k < 2:
        raise InsufficientDataError("the BetaVAE metric needs at least 2 factors")
    x_tr, y_tr = _pair_features(sampler, num_train, batch, rng)
    x_te, y_te = _pair_features(sampler, num_eval, batch, rng)
    clf = _fit_or_constant(_logreg(num_train, int(rng.integers(2 ** 31))), x_tr, y_tr)
    return float(np.mean(clf.predict(x_te) == y_te))


def _votes(sampler, num, batch, scale, active, rng):
    k = sampler.spec.k
    labels = rng.integers(0, k, size=num)
    dims = np.zeros(num, dtype=np.int64)
    step = max(1, 4096 // batch)
    for lo in range(0, num, step):
        lab = labels[lo:lo + step]
        f = sampler.sample_factors(len(lab) * batch, rng).reshape(len(lab), batch, k)
        f[np.arange(len(lab)), :, lab] = f[np.arange(len(lab)), 0, lab][:, None]
        reps = sampler.represent(f.reshape(len(lab) * batch, k), rng) / scale
        var = reps.reshape(len(lab), batch, -1)[:, :, active].var(axis=1)
        dims[lo:lo + step] = active[var.argmin(axis=1)]
    return dims, labels


def factorvae_metric(sampler, rng, num_train: int = settings.METRIC_TRAIN, num_eval: int = settings.METRIC_EVAL,
                     batch: int = settings.METRIC_BATCH, prune_samples: int = settings.PRUNE_SAMPLES,
                     threshold: float = settings.PRUNE_THRESHOLD) -> float:
    reps = sampler.represent(sampler.sample_factors(prune_samples, rng), rng)
    var = reps.var(axis=0)
    active = np.flatnonzero(var >= threshold)
    if active.size == 0:
        logger.warning("every latent dimension falls below the variance threshold %.3g", threshold)
        return 0.0
    scale = np.sqrt(np.where(var > 0, var, 1.0))
    n, k = reps.shape[1], sampler.spec.k
    dims, labels = _votes(sampler, num_train, batch, scale, active, rng)
    table = np.zeros((n, k), dtype=np.int64)
    np.add.at(table, (dims, labels), 1)
    mapping = table.argmax(axis=1)
    dims, labels = _votes(sampler, num_eval, batch, scale, active, rng)
    return float(np.mean(mapping[dims] == labels))


def downstream_efficiency(table: RepresentationTable, rng=None, small: int = settings.DOWNSTREAM_SMALL,
                          large: int = settings.DOWNSTREAM_LARGE, test: int = settings.DOWNSTREAM_TEST):
    """(acc with ``small`` labels, acc with ``large`` labels, mean per-factor ratio)."""
    if len(table.reps) < large + test:
        raise InsufficientDataError(f"downstream efficiency needs {large + test} rows, got {len(table.reps)}")
    rng = rng or np.random.default_rng(0)
    order = rng.permutation(len(table.reps))
    pool, held = order[:large], order[large:large + test]
    x = StandardScaler().fit(table.reps[pool]).transform(table.reps)
    codes = table.factor_codes()
    seed = int(rng.integers(2 ** 31))
    acc_small, acc_large = [], []
    for j in range(table.k):
        y = codes[:, j]
        accs = []
        for size in (small, large):
            rows = pool[:size]
            clf = _fit_or_constant(_logreg(size, seed), x[rows], y[rows])
            accs.append(float(np.mean(clf.predict(x[held]) == y[held])))
        acc_small.append(accs[0])
        acc_large.append(accs[1])
    ratio = [s / l if l > 0 else 0.0 for s, l in zip(acc_small, acc_large)]
    return float(np.mean(acc_small)), float(np.mean(acc_large)), float(np.mean(ratio))


def spearman(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) != len(ys) or len(xs) < 3:
        raise InsufficientDataError(f"spearman needs two equal-length series of at least 3, got {len(xs)} and {len(ys)}")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        logger.warning("spearman on a constant series; returning 0")
        return 0.0
    rho = np.corrcoef(stats.rankdata(xs), stats.rankdata(ys))[0, 1]
    return float(np.clip(rho, -1.0, 1.0))


@dataclass
class EvalCounts:
    points: int = 10_000
    train: int = settings.METRIC_TRAIN
    eval: int = settings.METRIC_EVAL
    batch: int = settings.METRIC_BATCH
    prune: int = settings.PRUNE_SAMPLES


@dataclass
class MetricReport:
    scores: dict
    st_gap: float | None = None
    recon: float = math.nan
    kl: float = math.nan
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [m for m in METRICS if m not in self.scores]
        if missing:
            raise ValueError(f"metric report lacks {missing}")
        for name in METRICS:
            if not 0.0 <= self.scores[name] <= 1.0:
                raise ValueError(f"{name}={self.scores[name]} is outside [0, 1]")

    def to_row(self, **context) -> dict:
        row = {col: None for col in METRIC_COLUMNS}
        row.update(context)
        row.update(self.scores)
        row.update({"st_gap": self.st_gap, "recon": self.recon, "kl": self.kl})
        row.update(self.extra)
        return row


def representation_table(model, dataset, num: int, rng) -> RepresentationTable:
    images, factors = dataset.sample_batch(num, rng)
    return RepresentationTable(model.representation(images), factors, dataset.spec.discrete)


def evaluate_model(model, dataset, counts: EvalCounts | None = None, rng=None) -> MetricReport:
    """Six scores plus ST gap and eval-mode ELBO terms for one model on one dataset."""
    from .models import elbo_loss, st_gap
    from .tensor import no_grad

    counts = counts or EvalCounts()
    rng = rng if rng is not None else np.random.default_rng(0)
    if tuple(dataset.image_shape) != (model.config.image_size, model.config.image_size, model.config.channels):
        raise ShapeError(f"dataset images {dataset.image_shape} do not match the model's input")
    table = representation_table(model, dataset, counts.points, rng)
    sampler = DatasetSampler(dataset, model)
    scores = {
        "betavae": betavae_metric(sampler, rng, counts.train, counts.eval, counts.batch),
        "factorvae": factorvae_metric(sampler, rng, counts.train, counts.eval, counts.batch, counts.prune),
        "mig": mig(table),
        "dci": dci_disentanglement(table, rng),
        "modularity": modularity(table),
        "sap": sap(table, rng),
    }
    probe, _ = dataset.sample_batch(min(counts.points, 512), rng)
    with no_grad():
        terms = elbo_loss(model, probe, rng, mode="eval")
    gap = st_gap(model, probe, rng) if model.discrete else None
    return MetricReport(scores, gap, terms.recon.item(), terms.kl.item(),
                        extra={"neg_elbo": terms.negative_elbo.item()})
