"""Command handlers: training runs, evaluation, selection, plots, verification, data export."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from . import latent, settings
from .datasets import dataset_from_name, export_dataset
from .exceptions import ConfigError, FormatError, InsufficientDataError, LatentError
from .metrics import (
    METRIC_COLUMNS, EvalCounts, RepresentationTable, axis_alignment, evaluate_model, spearman,
)
from .models import SIDECAR_NAME, ModelConfig, TrainedModel, train
from .plots import plot_latent, plot_traversal
from .serializers import append_rows, read_config, read_rows, write_rows

logger = logging.getLogger(__name__)

PROPS = [("p1a", "SUPPORT"), ("p1b", "DEGENERATE_LIMIT"), ("p2", "ROTATION_EQUIVARIANCE")]
SELECT_BY = [("st_gap", "ST_GAP"), ("sup_val", "SUPERVISED_VALIDATION")]
VERIFY_COLUMNS = ["prop", "trial", "case", "detail", "passed"]
SWEEP_COLUMNS = METRIC_COLUMNS + ["aligned"]

TRAIN_LOG = "train_log.csv"
METRICS_FILE = "metrics.csv"
PLOT_GRID = 8

RUN_KEYS = {
    "dataset": str,
    "out": str,
    "metric_seed": int,
    "eval_points": int,
    "eval_train": int,
    "eval_eval": int,
    "eval_batch": int,
    "eval_prune": int,
}


def _coerce(key: str, raw, kind):
    if raw is None:
        raise ConfigError(f"setting '{key}' has no value", key=key)
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if kind is list:
            return [None if p.strip() in ("", "none") else int(p) for p in text.split(",")] if text else None
        return kind(text)
    except ValueError:
        raise ConfigError(f"setting '{key}' cannot be read as {kind.__name__}: {text!r}", key=key) from None


def _model_kinds() -> dict:
    defaults = ModelConfig()
    return {f.name: list if f.name == "mask_sizes" else type(getattr(defaults, f.name)) for f in fields(ModelConfig)}


@dataclass
class RunConfig:
    model: ModelConfig
    dataset: str = "circles"
    out: Path = settings.RUNS_DIR
    counts: EvalCounts = field(default_factory=EvalCounts)
    metric_seed: int = 0  # metric sampling only; training draws from model.seed

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        model_kinds = _model_kinds()
        model, run = {}, {}
        for key, raw in values.items():
            if key in model_kinds:
                model[key] = _coerce(key, raw, model_kinds[key])
            elif key in RUN_KEYS:
                run[key] = _coerce(key, raw, RUN_KEYS[key])
            else:
                raise ConfigError(f"unknown setting '{key}'", key=key)
        counts = EvalCounts(**{k[len("eval_"):]: run.pop(k) for k in list(run) if k.startswith("eval_")})
        out = Path(run.pop("out", settings.RUNS_DIR))
        return cls(ModelConfig(**model).validate(), out=out, counts=counts, **run)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values = dict(dotenv_values(path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    def run_name(self) -> str:
        c = self.model
        return f"{c.latent_kind}-{c.objective}-g{c.gamma:g}-w{c.omega:g}-s{c.seed}"

    def run_dir(self) -> Path:
        return Path(self.out) / self.run_name()


def _checkpoint_dir(checkpoint) -> Path:
    p = Path(checkpoint)
    return p if p.is_dir() else p.parent


def _dataset_for(checkpoint, dataset: str | None):
    if dataset:
        return dataset
    sidecar = read_config(_checkpoint_dir(checkpoint) / SIDECAR_NAME)
    try:
        return sidecar["dataset"]
    except KeyError:
        raise ConfigError("checkpoint does not record its dataset; pass --dataset", key="dataset") from None


# ===== train / eval =====
def cmd_train(config_path, out=None, seed=None) -> Path:
    rc = RunConfig.from_file(config_path, out=out, seed=seed)
    return run_training(rc)


def run_training(rc: RunConfig) -> Path:
    dataset = dataset_from_name(rc.dataset)
    model, log = train(rc.model, dataset)
    run_dir = rc.run_dir()
    model.save(run_dir, dataset=rc.dataset)
    log.to_csv(run_dir / TRAIN_LOG, index=False)
    logger.info("run saved to %s", run_dir)
    return run_dir


def cmd_eval(checkpoint, dataset=None, points=None, seed: int = 0, counts: EvalCounts | None = None) -> dict:
    model = TrainedModel.load(checkpoint)
    name = _dataset_for(checkpoint, dataset)
    counts = counts or EvalCounts()
    if points:
        counts = replace(counts, points=points)
    report = evaluate_model(model, dataset_from_name(name), counts, np.random.default_rng(seed))
    c = model.config
    row = report.to_row(checkpoint=str(checkpoint), dataset=name, latent_kind=c.latent_kind,
                        objective=c.objective, seed=c.seed, gamma=c.gamma, omega=c.omega,
                        sup_val=model.losses.get("sup_val"))
    write_rows(_checkpoint_dir(checkpoint) / METRICS_FILE, [row], METRIC_COLUMNS)
    return row


# ===== sweeps =====
def collect_metrics(sweep_dir) -> pd.DataFrame:
    files = sorted(Path(sweep_dir).glob(f"**/{METRICS_FILE}"))
    if not files:
        raise InsufficientDataError(f"no {METRICS_FILE} files under {sweep_dir}")
    return pd.concat([read_rows(f) for f in files], ignore_index=True)


def cmd_select(sweep_dir, by: str = "st_gap") -> dict:
    """Pick the run with the smallest score; ties go to the lower negative ELBO, then the path."""
    if by not in [v for v, _ in SELECT_BY]:
        raise ConfigError(f"cannot select by '{by}'", key="by")
    frame = collect_metrics(sweep_dir)
    if by == "st_gap":
        frame = frame[frame["latent_kind"] == "discrete"]
    frame = frame[frame[by].notna()]
    if frame.empty:
        raise InsufficientDataError(f"no runs under {sweep_dir} report {by}")
    if len(frame) < 2:
        raise InsufficientDataError(f"need 2 candidate runs under {sweep_dir}, found {len(frame)}")
    ranked = frame.sort_values([by, "neg_elbo", "checkpoint"], kind="mergesort")
    best = ranked.iloc[0].to_dict()
    best["reason"] = f"lowest {by} ({best[by]:.6g}) of {len(frame)} runs"
    write_rows(Path(sweep_dir) / "selection.csv", [best], list(best))
    return best


def cmd_correlate(sweep_dir, metric: str = "mig") -> tuple[float, Path]:
    frame = collect_metrics(sweep_dir)
    if metric not in frame.columns:
        raise ConfigError(f"unknown metric '{metric}'", key="metric")
    pairs = frame[frame["st_gap"].notna() & frame[metric].notna()][["checkpoint", "st_gap", metric]]
    if len(pairs) < 3:
        raise InsufficientDataError(f"need 3 runs with st_gap and {metric}, found {len(pairs)}")
    pairs = pairs.sort_values("checkpoint")
    rho = spearman(pairs["st_gap"], pairs[metric])
    path = Path(sweep_dir) / f"correlation_{metric}.csv"
    pairs["spearman"] = rho
    write_rows(path, pairs.to_dict("records"), list(pairs.columns))
    return rho, path


# ===== plots =====
def factor_grid(spec, size: int = PLOT_GRID) -> np.ndarray:
    """Regular grid over the first two factors; other factors sit at their first value or midpoint."""
    if spec.k < 2:
        raise LatentError("a latent plot needs a dataset with at least two factors")
    axes = []
    for f in spec.factors[:2]:
        if f.discrete:
            axes.append(np.unique(np.round(np.linspace(1, f.cardinality, min(size, f.cardinality)))))
        else:
            axes.append(np.linspace(f.low, f.high, size))
    a, b = np.meshgrid(*axes, indexing="ij")
    rows = np.zeros((a.size, spec.k))
    rows[:, 0], rows[:, 1] = a.ravel(), b.ravel()
    for j, f in enumerate(spec.factors[2:], start=2):
        rows[:, j] = 1.0 if f.discrete else (f.low + f.high) / 2
    return rows


def cmd_plot_latent(checkpoint, dataset=None, out=None) -> Path:
    model = TrainedModel.load(checkpoint)
    if model.config.n != 2:
        raise LatentError(f"plot-latent draws 2-D latents but this model has n={model.config.n}; "
                          "train with n=2 to plot")
    ds = dataset_from_name(_dataset_for(checkpoint, dataset))
    factors = factor_grid(ds.spec)
    reps = model.representation(ds.observations_from_factors(factors))
    units = np.stack([ds.spec.factors[j].unit(factors[:, j]) for j in range(2)], axis=1)
    limits = (-1.0, 1.0) if model.config.symmetric and model.discrete else (0.0, 1.0)
    if not model.discrete:
        span = float(np.abs(reps).max(initial=1.0))
        limits = (-span, span)
    out = Path(out) if out else _checkpoint_dir(checkpoint) / "latents.svg"
    title = f"{model.config.latent_kind} {model.config.objective} seed {model.config.seed}"
    return plot_latent(reps, units, out, title=title, limits=limits)


def cmd_traverse(checkpoint, dataset=None, out=None, steps: int = 8, seed: int = 0) -> Path:
    """Decode sweeps of each latent dimension around the representation of one probe image."""
    model = TrainedModel.load(checkpoint)
    ds = dataset_from_name(_dataset_for(checkpoint, dataset))
    probe, _ = ds.sample_batch(1, np.random.default_rng(seed))
    base = model.representation(probe)[0]
    c = model.config
    if model.discrete:
        if c.symmetric:
            base = (base + 1.0) / 2.0
        values = np.linspace(0.0, 1.0, steps)
    else:
        values = np.linspace(-2.0, 2.0, steps)
    codes = np.repeat(base[None, None, :], c.n * steps, axis=0).reshape(c.n, steps, c.n)
    for d in range(c.n):
        codes[d, :, d] = values
    images = model.decode_images(codes.reshape(-1, c.n)).reshape(c.n, steps, *ds.image_shape)
    out = Path(out) if out else _checkpoint_dir(checkpoint) / "traversal.png"
    return plot_traversal(images, out, row_labels=[f"z{d + 1}" for d in range(c.n)])


# ===== verification =====
def _verify_support(trial, rng):
    m = int(rng.integers(3, 11))
    lo = int(rng.integers(0, m - 1))
    hi = int(rng.integers(lo + 1, m))
    row = np.zeros(m)
    row[lo:hi + 1] = rng.uniform(0.2, 1.0, size=hi - lo + 1)
    res = latent.verify_support(row, 100_000, rng, tol=0.02)
    detail = f"m={m} support=({res['low']:.3f},{res['high']:.3f}) sampled=({res['min']:.4f},{res['max']:.4f})"
    return [{"prop": "p1a", "trial": trial, "case": "masked_row", "detail": detail, "passed": res["ok"]}]


def _verify_limit(trial, rng):
    m = int(rng.integers(2, 65))
    top = int(rng.integers(0, m))
    row = np.full(m, 1e-9 / (m - 1))
    row[top] = 1.0 - 1e-9
    res = latent.verify_degenerate_limit(row, 2.0, 10_000, rng)
    passed = res["hit_rate"] >= 0.999 and res["mean_error"] < 1e-3
    detail = f"m={m} top={top + 1} hit={res['hit_rate']:.4f} err={res['mean_error']:.2e}"
    return [{"prop": "p1b", "trial": trial, "case": "near_one_hot", "detail": detail, "passed": passed}]


def _verify_rotation(trial, rng):
    rows = []
    n = int(rng.integers(2, 5))
    i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
    mu = rng.normal(size=n)
    sigma = rng.uniform(0.5, 1.5, size=n)
    sigma[j] = sigma[i]
    res = latent.verify_rotation_equivariance(mu, sigma, rng.uniform(0, 2 * math.pi), (i, j), 100_000, rng)
    rows.append({"prop": "p2", "trial": trial, "case": "isotropic_pair",
                 "detail": f"mean_err={res['mean_error']:.4f} cov_err={res['cov_error']:.4f}", "passed": res["ok"]})
    sigma = sigma.copy()
    sigma[j] = sigma[i] * rng.uniform(1.5, 2.0)
    angle = rng.uniform(0.2, math.pi - 0.2)
    res = latent.verify_rotation_equivariance(mu, sigma, angle, (i, j), 100_000, rng)
    rows.append({"prop": "p2", "trial": trial, "case": "anisotropic_pair",
                 "detail": f"angle={angle:.3f} equivariant={res['equivariant']}", "passed": not res["equivariant"]})
    return rows


VERIFIERS = {"p1a": _verify_support, "p1b": _verify_limit, "p2": _verify_rotation}


def cmd_verify(props, trials: int = 10, seed: int = 0) -> tuple[pd.DataFrame, bool]:
    if trials < 1:
        raise ConfigError("trials must be at least 1", key="trials")
    unknown = [p for p in props if p not in VERIFIERS]
    if unknown:
        raise ConfigError(f"unknown proposition(s) {unknown}; choose from {list(VERIFIERS)}", key="props")
    rng = np.random.default_rng(seed)
    rows = []
    for prop in props:
        for t in range(trials):
            rows.extend(VERIFIERS[prop](t, rng))
    table = pd.DataFrame(rows, columns=VERIFY_COLUMNS)
    ok = bool(table["passed"].all()) if len(table) else True
    return table, ok


# ===== data =====
def cmd_gen_data(spec: str, count: int, path, seed: int = 0) -> Path:
    if count < 0:
        raise ConfigError("count must be nonnegative", key="count")
    path = Path(path)
    if not path.parent.exists():
        raise FormatError("parent directory does not exist", path)
    return export_dataset(dataset_from_name(spec), count, path, np.random.default_rng(seed))


# ===== desk-scale sweep =====
def circles_sweep(out, seeds: int = 10, steps: int = 3000) -> list[RunConfig]:
    """10 seeds each of a Gaussian VAE and a D-VAE with 2 latents on 16x16 Circles."""
    counts = EvalCounts(points=2000, train=500, eval=250, batch=64, prune=2000)
    runs = []
    for kind in ("gaussian", "discrete"):
        for seed in range(seeds):
            model = ModelConfig(latent_kind=kind, n=2, m=64, preset="mlp_small", image_size=16, steps=steps,
                                batch_size=64, seed=seed, lr=1e-3, log_every=max(1, steps // 10))
            runs.append(RunConfig(model, dataset="circles", out=Path(out), counts=counts, metric_seed=seed))
    return runs


SWEEP_PRESETS = {"circles-sweep": circles_sweep}


def _sweep_job(rc: RunConfig) -> dict:
    run_dir = run_training(rc)
    row = cmd_eval(run_dir, rc.dataset, seed=rc.metric_seed, counts=rc.counts)
    model = TrainedModel.load(run_dir)
    ds = dataset_from_name(rc.dataset)
    images, factors = ds.sample_batch(rc.counts.points, np.random.default_rng(rc.metric_seed))
    row["aligned"] = axis_alignment(RepresentationTable(model.representation(images), factors, ds.spec.discrete))
    if model.config.n == 2:
        cmd_plot_latent(run_dir, rc.dataset)
    return row


def cmd_sweep(preset: str = "circles-sweep", out=None, workers: int | None = None, seeds: int = 10,
              steps: int | None = None) -> dict:
    try:
        make = SWEEP_PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown sweep preset '{preset}'", key="preset") from None
    out = Path(out or settings.RUNS_DIR / preset)
    out.mkdir(parents=True, exist_ok=True)
    runs = make(out, seeds) if steps is None else make(out, seeds, steps)
    workers = max(1, min(workers or settings.THREADS, len(runs)))
    sweep_csv = out / "sweep.csv"
    rows = []
    if workers == 1:
        results = map(_sweep_job, runs)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_sweep_job, runs)
    try:
        for row in results:
            append_rows(sweep_csv, [row], SWEEP_COLUMNS)
            rows.append(row)
    finally:
        if workers > 1:
            pool.shutdown()
    return summarize_sweep(out, pd.DataFrame(rows, columns=SWEEP_COLUMNS))


def summarize_sweep(out, frame: pd.DataFrame) -> dict:
    disc = frame[frame["latent_kind"] == "discrete"]
    gauss = frame[frame["latent_kind"] == "gaussian"]
    summary = {
        "median_mig_discrete": float(disc["mig"].median()) if len(disc) else math.nan,
        "median_mig_gaussian": float(gauss["mig"].median()) if len(gauss) else math.nan,
        "aligned_discrete": int(disc["aligned"].astype(bool).sum()) if len(disc) else 0,
        "runs_discrete": len(disc),
    }
    if len(disc) >= 3:
        summary["rho_st_gap_mig"] = spearman(disc["st_gap"], disc["mig"])
    if len(disc):
        chosen = disc.sort_values(["st_gap", "neg_elbo", "checkpoint"], kind="mergesort").iloc[0]
        summary["selected_checkpoint"] = chosen["checkpoint"]
        summary["selected_mig"] = float(chosen["mig"])
    write_rows(Path(out) / "summary.csv", [summary], list(summary))
    logger.info("sweep summary: %s", summary)
    return summary
