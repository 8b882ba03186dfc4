"""Ground-truth-factor datasets rendered straight from their generative models.

Factor rows are float arrays of shape (N, k): discrete factors hold 1-based
indices, continuous factors hold reals in their declared range. Images are
(N, H, W, C) floats in [0, 1].
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FactorError

logger = logging.getLogger(__name__)

FACTOR_KINDS = [("discrete", "DISCRETE"), ("continuous", "CONTINUOUS")]
GRIDWORLD_FACTORS = ("x", "y", "scale", "intensity", "shape")
SHAPES = [(1, "SQUARE"), (2, "DISC")]

SUBPIXELS = 4
CHUNK = 512
LOOKUP_CHUNK = 64


@dataclass(frozen=True)
class Factor:
    name: str
    cardinality: int | None = None
    low: float | None = None
    high: float | None = None

    def __post_init__(self):
        if self.cardinality is None:
            if self.low is None or self.high is None or not self.low < self.high:
                raise FactorError(f"factor '{self.name}': continuous range must satisfy low < high")
        elif self.cardinality < 1:
            raise FactorError(f"factor '{self.name}': cardinality must be >= 1")

    @property
    def discrete(self) -> bool:
        return self.cardinality is not None

    @property
    def kind(self) -> str:
        return "discrete" if self.discrete else "continuous"

    def sample(self, rng, num: int) -> np.ndarray:
        if self.discrete:
            return rng.integers(1, self.cardinality + 1, size=num).astype(np.float64)
        return rng.uniform(self.low, self.high, size=num)

    def check(self, values):
        values = np.asarray(values, dtype=np.float64)
        if self.discrete:
            bad = (values < 1) | (values > self.cardinality) | (values != np.round(values))
        else:
            bad = (values < self.low) | (values > self.high) | ~np.isfinite(values)
        if np.any(bad):
            first = values[bad].flat[0]
            raise FactorError(f"factor '{self.name}': value {first} outside its declared range")

    def unit(self, values) -> np.ndarray:
        """Position of values inside the factor's range, in [0, 1]."""
        values = np.asarray(values, dtype=np.float64)
        if self.discrete:
            return (values - 1) / (self.cardinality - 1) if self.cardinality > 1 else np.zeros_like(values)
        return (values - self.low) / (self.high - self.low)


@dataclass(frozen=True)
class FactorSpec:
    factors: tuple[Factor, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise FactorError("a factor spec needs at least one factor")
        if len(set(self.names)) != len(self.names):
            raise FactorError(f"factor names must be unique: {self.names}")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.factors]

    @property
    def k(self) -> int:
        return len(self.factors)

    @property
    def discrete(self) -> list[bool]:
        return [f.discrete for f in self.factors]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise FactorError(f"unknown factor '{name}'") from None

    def sample(self, rng, num: int) -> np.ndarray:
        if num == 0:
            return np.zeros((0, self.k))
        return np.stack([f.sample(rng, num) for f in self.factors], axis=1)

    def check(self, values):
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.shape[1] != self.k:
            raise FactorError(f"expected {self.k} factor values per row, got {values.shape[1]}")
        for i, f in enumerate(self.factors):
            f.check(values[:, i])
        return values

    def grid(self) -> np.ndarray:
        """Every factor tuple of a fully discrete spec, last factor fastest."""
        if not all(self.discrete):
            raise FactorError("only fully discrete specs can be enumerated")
        axes = [np.arange(1, f.cardinality + 1, dtype=np.float64) for f in self.factors]
        return np.stack([a.reshape(-1) for a in np.meshgrid(*axes, indexing="ij")], axis=1)


class GroundTruthDataset(ABC):
    name = "dataset"
    spec: FactorSpec
    image_shape: tuple[int, int, int]

    def sample_factors(self, num: int, rng) -> np.ndarray:
        return self.spec.sample(rng, num)

    @abstractmethod
    def observations_from_factors(self, factors, rng=None) -> np.ndarray:
        ...

    def render(self, factors) -> np.ndarray:
        return self.observations_from_factors(np.atleast_2d(factors))[0]

    def sample_batch(self, batch_size: int, rng):
        factors = self.sample_factors(batch_size, rng)
        return self.observations_from_factors(factors, rng), factors

    def sample_fixed(self, factor_index: int, num: int, rng):
        """A batch in which one factor shares a single value."""
        factors = self.sample_factors(num, rng)
        factors[:, factor_index] = factors[0, factor_index]
        return self.observations_from_factors(factors, rng), factors

    def sample_pairs(self, factor_index: int, num_pairs: int, rng):
        """Two batches whose rows agree on one factor."""
        a = self.sample_factors(num_pairs, rng)
        b = self.sample_factors(num_pairs, rng)
        b[:, factor_index] = a[:, factor_index]
        return self.observations_from_factors(a, rng), self.observations_from_factors(b, rng), a, b

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, factors={self.spec.names}, image={self.image_shape})"


def _subpixel_centers(size: int) -> np.ndarray:
    return (np.arange(size * SUBPIXELS) + 0.5) / SUBPIXELS


def _coverage(inside: np.ndarray, size: int) -> np.ndarray:
    n = inside.shape[0]
    return inside.reshape(n, size, SUBPIXELS, size, SUBPIXELS).mean(axis=(2, 4))


def circles_render(x: float, y: float, size: int = 16) -> np.ndarray:
    """Filled disc of diameter 0.2*size centred at column x*size, row y*size; (size, size, 1)."""
    return Circles(size).render([x, y])


class Circles(GroundTruthDataset):
    DIAMETER = 0.2

    def __init__(self, size: int = 16):
        self.size = size
        self.name = f"circles:size={size}"
        self.spec = FactorSpec((Factor("x", low=0.2, high=0.8), Factor("y", low=0.2, high=0.8)))
        self.image_shape = (size, size, 1)

    def observations_from_factors(self, factors, rng=None):
        factors = self.spec.check(factors)
        u = _subpixel_centers(self.size)
        r2 = (self.DIAMETER * self.size / 2) ** 2
        out = np.empty((len(factors), self.size, self.size, 1))
        for lo in range(0, len(factors), CHUNK):
            part = factors[lo:lo + CHUNK] * self.size
            dx = (u[None, None, :] - part[:, 0, None, None]) ** 2
            dy = (u[None, :, None] - part[:, 1, None, None]) ** 2
            out[lo:lo + CHUNK, :, :, 0] = _coverage(dx + dy <= r2, self.size)
        return out


def _lerp(lo, hi, t):
    return lo + (hi - lo) * t


class GridWorld(GroundTruthDataset):
    """Single square or disc on a blank canvas, every factor discrete."""
    DEFAULT_SIZE = 0.375
    DEFAULT_INTENSITY = 1.0

    def __init__(self, cardinalities: dict[str, int], size: int = 16):
        unknown = set(cardinalities) - set(GRIDWORLD_FACTORS)
        if unknown:
            raise FactorError(f"gridworld has no factor(s) {sorted(unknown)}; choose from {GRIDWORLD_FACTORS}")
        if not 2 <= len(cardinalities) <= 5:
            raise FactorError("gridworld needs between 2 and 5 factors")
        if cardinalities.get("shape", 1) > len(SHAPES):
            raise FactorError("gridworld shape cardinality is at most 2")
        names = [n for n in GRIDWORLD_FACTORS if n in cardinalities]
        self.size = size
        self.spec = FactorSpec(tuple(Factor(n, cardinality=int(cardinalities[n])) for n in names))
        self.image_shape = (size, size, 1)
        self.name = "gridworld:" + ",".join(f"{n}={cardinalities[n]}" for n in names) + f",size={size}"

    def _column(self, factors, name, default):
        if name not in self.spec.names:
            return np.full(len(factors), default)
        i = self.spec.index(name)
        return self.spec.factors[i].unit(factors[:, i])

    def observations_from_factors(self, factors, rng=None):
        factors = self.spec.check(factors)
        n = len(factors)
        h = self.size
        cx = _lerp(0.25, 0.75, self._column(factors, "x", 0.5)) * h
        cy = _lerp(0.25, 0.75, self._column(factors, "y", 0.5)) * h
        if "x" in self.spec.names and self.spec.factors[self.spec.index("x")].cardinality == 1:
            cx = np.full(n, 0.5 * h)
        if "y" in self.spec.names and self.spec.factors[self.spec.index("y")].cardinality == 1:
            cy = np.full(n, 0.5 * h)
        if "scale" in self.spec.names:
            side = _lerp(0.25, 0.5, self._column(factors, "scale", 0.0)) * h
        else:
            side = np.full(n, self.DEFAULT_SIZE * h)
        if "intensity" in self.spec.names:
            level = _lerp(0.5, 1.0, self._column(factors, "intensity", 1.0))
        else:
            level = np.full(n, self.DEFAULT_INTENSITY)
        if "shape" in self.spec.names:
            disc = factors[:, self.spec.index("shape")] == 2
        else:
            disc = np.zeros(n, dtype=bool)

        u = _subpixel_centers(h)
        out = np.empty((n, h, h, 1))
        for lo in range(0, n, CHUNK):
            s = slice(lo, lo + CHUNK)
            dx = u[None, None, :] - cx[s, None, None]
            dy = u[None, :, None] - cy[s, None, None]
            half = side[s, None, None] / 2
            square = (np.abs(dx) <= half) & (np.abs(dy) <= half)
            circle = dx ** 2 + dy ** 2 <= half ** 2
            inside = np.where(disc[s, None, None], circle, square)
            out[s, :, :, 0] = _coverage(inside, h) * level[s, None, None]
        return out


def gridworld_render(factors, cardinalities: dict[str, int], size: int = 16) -> np.ndarray:
    return GridWorld(cardinalities, size).render(factors)


class ExternalDataset(GroundTruthDataset):
    """Stored records; conditioning picks the stored record closest to each requested factor row."""

    def __init__(self, spec: FactorSpec, images: np.ndarray, factors: np.ndarray, name: str = "external"):
        if len(images) != len(factors):
            raise FactorError(f"{len(images)} images but {len(factors)} factor rows")
        self.spec = spec
        self.images = images
        self.factors = spec.check(factors) if len(factors) else np.zeros((0, spec.k))
        self.image_shape = tuple(images.shape[1:])
        self.name = name
        spans = [float(f.cardinality - 1 or 1) if f.discrete else f.high - f.low for f in spec.factors]
        self._scale = np.asarray(spans)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], self.factors[i]

    def _require_records(self):
        if len(self) == 0:
            raise FactorError(f"dataset '{self.name}' holds no records")

    def sample_factors(self, num, rng):
        self._require_records()
        return self.factors[rng.integers(0, len(self), size=num)].copy()

    def sample_batch(self, batch_size, rng):
        self._require_records()
        idx = rng.integers(0, len(self), size=batch_size)
        return self.images[idx], self.factors[idx]

    def lookup(self, factors, rng=None) -> np.ndarray:
        factors = np.atleast_2d(np.asarray(factors, dtype=np.float64))
        self._require_records()
        rng = rng or np.random.default_rng(0)
        stored = self.factors / self._scale
        out = np.empty(len(factors), dtype=np.int64)
        for lo in range(0, len(factors), LOOKUP_CHUNK):
            d = ((factors[lo:lo + LOOKUP_CHUNK, None, :] / self._scale - stored[None]) ** 2).sum(axis=-1)
            best = d.min(axis=1, keepdims=True)
            # break ties between equal records at random
            noise = rng.random(d.shape)
            out[lo:lo + LOOKUP_CHUNK] = np.where(d <= best, noise, -1.0).argmax(axis=1)
        return out

    def observations_from_factors(self, factors, rng=None):
        return self.images[self.lookup(factors, rng)]


def load_external(path) -> ExternalDataset:
    from .serializers import read_dataset

    spec, images, factors = read_dataset(path)
    logger.info("loaded %d records from %s", len(images), path)
    return ExternalDataset(spec, images, factors, name=str(path))


def export_dataset(dataset: GroundTruthDataset, count: int, path, rng) -> Path:
    """Write ``count`` observations; discrete specs enumerate their grid cyclically."""
    from .serializers import write_dataset

    if all(dataset.spec.discrete):
        table = dataset.spec.grid()
        if count >= len(table):
            factors = table[np.arange(count) % len(table)]
        else:
            # partial exports walk every factor at once so each reaches its top index
            cards = np.array([f.cardinality for f in dataset.spec.factors])
            factors = (np.arange(count)[:, None] % cards + 1).astype(np.float64)
    else:
        factors = dataset.spec.sample(rng, count)
    images = dataset.observations_from_factors(factors, rng) if count else np.zeros((0, *dataset.image_shape))
    return write_dataset(path, dataset.spec, images, factors)


def _parse_options(text: str) -> dict[str, int]:
    out = {}
    for item in filter(None, text.split(",")):
        key, _, value = item.partition("=")
        try:
            out[key.strip()] = int(value)
        except ValueError:
            raise FactorError(f"bad dataset option '{item}'") from None
    return out


def dataset_from_name(name: str) -> GroundTruthDataset:
    """'circles', 'circles:size=64', 'gridworld:x=4,y=4,shape=2' or a DLAB-DS path."""
    kind, _, rest = str(name).partition(":")
    if kind == "circles":
        return Circles(**_parse_options(rest))
    if kind == "gridworld":
        opts = _parse_options(rest) or {"x": 4, "y": 4, "shape": 2}
        size = opts.pop("size", 16)
        return GridWorld(opts, size=size)
    if Path(name).exists():
        return load_external(name)
    raise FactorError(f"unknown dataset '{name}'")
