"""Latent layers: Gumbel-Softmax sampling, the ordered map f, KL terms and verifiers.

Discrete latents live on n rows of m ordered categories. Category j (1-based)
sits at grid value (j-1)/(m-1), so a simplex row maps to [0, 1] by a dot
product with that grid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import settings
from .exceptions import LatentError
from .tensor import Tensor, apply, as_tensor

logger = logging.getLogger(__name__)


@dataclass
class DiscreteLatentParams:
    """Log category weights, shape (..., n, m). -inf marks alpha = 0."""
    log_alpha: Tensor

    def __post_init__(self):
        self.log_alpha = as_tensor(self.log_alpha)
        a = self.log_alpha.data
        if a.ndim < 1 or a.shape[-1] < 2:
            raise LatentError(f"need at least 2 categories, got shape {a.shape}")
        if not np.isfinite(a).any(axis=-1).all():
            raise LatentError("every latent row needs at least one positive weight")

    @classmethod
    def from_alphas(cls, alphas):
        alphas = np.asarray(alphas, dtype=np.float64)
        if (alphas < 0).any():
            raise LatentError("category weights must be nonnegative")
        with np.errstate(divide="ignore"):
            return cls(np.log(alphas))

    @property
    def n(self) -> int:
        return self.log_alpha.shape[-2] if self.log_alpha.ndim > 1 else 1

    @property
    def m(self) -> int:
        return self.log_alpha.shape[-1]

    def probabilities(self) -> np.ndarray:
        return special.softmax(self.log_alpha.data, axis=-1)


@dataclass
class GaussianLatentParams:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.sigma = as_tensor(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise LatentError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ in shape")

    def check(self):
        if not (self.sigma.data > 0).all():
            raise LatentError("standard deviations must be positive")


@dataclass
class AnnealSchedule:
    initial_scale: float = settings.INITIAL_SCALE
    final_scale: float = settings.FINAL_SCALE
    total_steps: int = 1
    temperature: float = settings.TEMPERATURE

    def scale(self, step: int) -> float:
        return anneal_scale(self, step)


ANNEAL_MODES = [("train", "TRAIN"), ("eval", "EVAL")]


def anneal_scale(schedule: AnnealSchedule, step: int, mode: str = "train") -> float:
    """Cosine path from initial to final Gumbel scale; 0 in eval mode."""
    if mode == "eval":
        return 0.0
    if schedule.total_steps <= 0:
        return schedule.initial_scale
    t = min(max(step, 0), schedule.total_steps) / schedule.total_steps
    span = schedule.final_scale - schedule.initial_scale
    return schedule.initial_scale + span * (1.0 - math.cos(math.pi * t)) / 2.0


def grid(m: int) -> np.ndarray:
    return np.arange(m, dtype=np.float64) / (m - 1)


def sample_gumbel(shape, scale: float, rng) -> Tensor:
    if scale < 0:
        raise LatentError(f"Gumbel scale must be nonnegative, got {scale}")
    if scale == 0:
        return Tensor(np.zeros(shape))
    u = np.clip(rng.random(shape), settings.GUMBEL_EPS, 1.0 - settings.GUMBEL_EPS)
    return Tensor(scale * -np.log(-np.log(u)))


def gumbel_softmax_sample(params: DiscreteLatentParams, temperature: float = 1.0,
                          scale: float = 1.0, rng=None, noise=None) -> Tensor:
    """Rows of softmax((log alpha + g) / temperature); pass ``noise`` to reuse a draw."""
    if temperature <= 0:
        raise LatentError(f"temperature must be positive, got {temperature}")
    if noise is None:
        noise = sample_gumbel(params.log_alpha.shape, scale, rng)
    logits = apply("add", params.log_alpha, noise)
    if temperature != 1.0:
        logits = apply("mul", logits, 1.0 / temperature)
    return apply("softmax", logits)


def map_f(z, m: int | None = None):
    """Dot product of simplex rows with the equidistant grid; graph-aware for Tensors."""
    if isinstance(z, Tensor):
        m = m or z.shape[-1]
        flat = apply("reshape", z, shape=(-1, m))
        out = apply("matmul", flat, grid(m).reshape(m, 1))
        return apply("reshape", out, shape=z.shape[:-1])
    z = np.asarray(z, dtype=np.float64)
    return z @ grid(m or z.shape[-1])


def representation(params: DiscreteLatentParams, symmetric: bool = False) -> np.ndarray:
    r = map_f(params.probabilities())
    return 2.0 * r - 1.0 if symmetric else r


def kl_categorical_uniform(params: DiscreteLatentParams) -> Tensor:
    """Sum over rows of KL(softmax(log alpha) || uniform over m)."""
    la = params.log_alpha
    if not la.requires_grad:
        p = params.probabilities()
        return Tensor(np.sum(special.xlogy(p, p) + p * math.log(params.m)))
    if np.isneginf(la.data).any():
        raise LatentError("use a finite mask logit for differentiable KL")
    logp = apply("log_softmax", la)
    p = apply("exp", logp)
    return apply("sum", apply("mul", p, apply("add", logp, math.log(params.m))))


def kl_gaussian_standard(params: GaussianLatentParams) -> Tensor:
    """0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)."""
    params.check()
    mu, sigma = params.mu, params.sigma
    var = apply("mul", sigma, sigma)
    inner = apply("sub", apply("add", apply("mul", mu, mu), var), apply("add", apply("log", var), 1.0))
    return apply("mul", apply("sum", inner), 0.5)


def gaussian_reparam(params: GaussianLatentParams, rng, noise=None) -> Tensor:
    params.check()
    eps = rng.standard_normal(params.mu.shape) if noise is None else noise
    return apply("add", params.mu, apply("mul", params.sigma, eps))


def straight_through_round(z):
    """One-hot at the row argmax, lowest index on ties."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    hot = np.zeros_like(data)
    np.put_along_axis(hot, data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return Tensor(hot) if isinstance(z, Tensor) else hot


def straight_through(z: Tensor) -> Tensor:
    """Rounded forward value, identity gradient."""
    return apply("add", z, straight_through_round(z.data) - z.data)


def active_categories(m: int, m_prime: int) -> np.ndarray:
    """J = {1 + round_half_up(j (m-1) / (m'-1))}, j = 0..m'-1, 1-based."""
    if m_prime < 2 or m_prime > m:
        raise LatentError(f"active category count must lie in [2, {m}], got {m_prime}")
    j = np.arange(m_prime)
    return 1 + (2 * j * (m - 1) + (m_prime - 1)) // (2 * (m_prime - 1))


def category_mask(n: int, m: int, m_primes) -> np.ndarray:
    """Boolean (n, m) table of active categories; None or m leaves a row open."""
    if m_primes is None or np.isscalar(m_primes):
        m_primes = [m_primes] * n
    if len(m_primes) != n:
        raise LatentError(f"need {n} mask sizes, got {len(m_primes)}")
    mask = np.ones((n, m), dtype=bool)
    for i, mp in enumerate(m_primes):
        if mp is None or mp == m:
            continue
        mask[i] = False
        mask[i, active_categories(m, int(mp)) - 1] = True
    return mask


def mask_categories(params: DiscreteLatentParams, m_prime) -> DiscreteLatentParams:
    """Zero the weights of inactive categories.

    Plain arrays get -inf; tensors that carry gradients get the finite
    ``settings.MASK_LOGIT`` added, which still underflows to probability 0.
    """
    mask = category_mask(params.n, params.m, m_prime)
    la = params.log_alpha
    if la.requires_grad:
        return DiscreteLatentParams(apply("add", la, np.where(mask, 0.0, settings.MASK_LOGIT)))
    return DiscreteLatentParams(np.where(mask, la.data, -np.inf))


# ===== Verifiers =====
def support_bounds(alpha_row) -> tuple[float, float]:
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    nz = np.flatnonzero(alpha_row > 0)
    if nz.size == 0:
        raise LatentError("category weights are all zero")
    m = alpha_row.size
    return nz[0] / (m - 1), nz[-1] / (m - 1)


def verify_support(alpha_row, n_samples: int = 100_000, rng=None, scale: float = 1.0,
                   tol: float | None = None) -> dict:
    """Empirical min and max of f over Gumbel-Softmax samples of one row.

    ``ok`` holds when every sample lies strictly inside the support interval
    (or on the point, for a one-hot row) and, given ``tol``, both extremes
    come within ``tol`` of the interval ends.
    """
    if n_samples < 10_000:
        raise LatentError(f"need at least 10000 samples, got {n_samples}")
    rng = rng or np.random.default_rng()
    low, high = support_bounds(alpha_row)
    params = DiscreteLatentParams.from_alphas(np.tile(alpha_row, (n_samples, 1)))
    z = gumbel_softmax_sample(params, 1.0, scale, rng).data
    f = map_f(z)
    f_min, f_max = float(f.min()), float(f.max())
    if low == high:
        ok = bool(np.isclose(f_min, low) and np.isclose(f_max, high))
    else:
        ok = low < f_min and f_max < high
        if tol is not None:
            ok = ok and f_min - low < tol and high - f_max < tol
    return {"ok": ok, "min": f_min, "max": f_max, "low": low, "high": high}


def verify_degenerate_limit(alpha_row, scale: float = 2.0, n_samples: int = 10_000, rng=None) -> dict:
    rng = rng or np.random.default_rng()
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    top = int(alpha_row.argmax())
    target = top / (alpha_row.size - 1)
    params = DiscreteLatentParams.from_alphas(np.tile(alpha_row, (n_samples, 1)))
    z = gumbel_softmax_sample(params, 1.0, scale, rng).data
    hits = straight_through_round(z).argmax(axis=-1) == top
    return {
        "hit_rate": float(hits.mean()),
        "mean_error": float(np.abs(map_f(z) - target).mean()),
        "representation_error": float(abs(representation(DiscreteLatentParams.from_alphas(alpha_row[None]))[0] - target)),
        "target": target,
    }


def rotation(n: int, angle: float, axes=(0, 1)) -> np.ndarray:
    i, j = axes
    if i == j:
        raise LatentError("rotation needs two distinct axes")
    r = np.eye(n)
    c, s = math.cos(angle), math.sin(angle)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def verify_rotation_equivariance(mu, sigma, angle: float, axes=(0, 1), n_samples: int = 100_000,
                                 rng=None, mean_tol: float = 0.02, cov_tol: float = 0.05) -> dict:
    """Rotate samples of N(mu, diag sigma^2) and compare with N(R mu, diag sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    GaussianLatentParams(mu, sigma).check()
    r = rotation(mu.size, angle, axes)
    rng = rng or np.random.default_rng()
    z = mu + sigma * rng.standard_normal((n_samples, mu.size))
    rotated = z @ r.T
    cov = np.diag(sigma ** 2)
    mean_error = float(np.abs(rotated.mean(axis=0) - r @ mu).max())
    cov_error = float(np.abs(np.cov(rotated, rowvar=False).reshape(cov.shape) - cov).max())
    closed_form = r @ cov @ r.T
    equivariant = bool(np.allclose(closed_form, cov, rtol=0.0, atol=1e-9 * max(1.0, cov.max())))
    return {
        "ok": mean_error < mean_tol and cov_error < cov_tol and equivariant,
        "equivariant": equivariant,
        "mean_error": mean_error,
        "cov_error": cov_error,
        "rotated_cov": closed_form,
    }
