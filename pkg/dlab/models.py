"""Encoder/decoder networks, VAE objectives, the TC discriminator and training."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import special
from tqdm import trange

from . import nn, settings
from .exceptions import ConfigError, DivergenceError, FactorError, FormatError, LatentError, ObservationError, ShapeError
from .latent import (
    AnnealSchedule, DiscreteLatentParams, GaussianLatentParams, active_categories, anneal_scale, category_mask,
    gumbel_softmax_sample, kl_categorical_uniform, kl_gaussian_standard, map_f, representation,
    sample_gumbel, straight_through_round,
)
from .optim import AdamState, adam_step, gradients, zero_grad
from .serializers import read_checkpoint, read_config, write_checkpoint, write_config
from .tensor import Tensor, apply, backward, no_grad

logger = logging.getLogger(__name__)

LATENT_KINDS = [("gaussian", "GAUSSIAN"), ("discrete", "DISCRETE")]
PRESETS = [("mlp_small", "MLP_SMALL"), ("paper_conv", "PAPER_CONV"), ("broadcast_circles", "BROADCAST_CIRCLES")]
OBJECTIVES = [("plain", "PLAIN"), ("factor", "FACTOR"), ("semi", "SEMI"), ("factor+semi", "FACTOR_SEMI")]
RS_LOSSES = [("bce", "BCE"), ("l2", "L2")]

CHECKPOINT_NAME = "model.dlab"
SIDECAR_NAME = "config.json"
LOG_COLUMNS = ["step", "recon", "kl", "tc", "sup", "st_gap"]


def _choices(table):
    return [value for value, _ in table]


@dataclass
class ModelConfig:
    # latent
    latent_kind: str = "discrete"
    n: int = 10
    m: int = 64
    symmetric: bool = False
    # architecture
    preset: str = "mlp_small"
    image_size: int = 16
    channels: int = 1
    hidden: int = settings.HIDDEN
    # objective
    objective: str = "plain"
    gamma: float = 0.0
    omega: float = 0.0
    masked: bool = False
    mask_sizes: list | None = None
    gaussian_rs: str = "bce"
    num_labels: int = 1000
    # training
    steps: int = 1000
    batch_size: int = 64
    seed: int = 0
    lr: float = settings.ADAM_LR
    initial_scale: float = settings.INITIAL_SCALE
    final_scale: float = settings.FINAL_SCALE
    temperature: float = settings.TEMPERATURE
    log_every: int = 100
    # discriminator
    disc_width: int = settings.DISC_WIDTH
    disc_depth: int = settings.DISC_DEPTH
    disc_lr: float = settings.ADAM_LR

    def validate(self) -> "ModelConfig":
        checks = [
            ("latent_kind", self.latent_kind in _choices(LATENT_KINDS), f"one of {_choices(LATENT_KINDS)}"),
            ("preset", self.preset in _choices(PRESETS), f"one of {_choices(PRESETS)}"),
            ("objective", self.objective in _choices(OBJECTIVES), f"one of {_choices(OBJECTIVES)}"),
            ("gaussian_rs", self.gaussian_rs in _choices(RS_LOSSES), f"one of {_choices(RS_LOSSES)}"),
            ("n", self.n >= 1, ">= 1"),
            ("m", self.latent_kind != "discrete" or self.m >= 2, ">= 2 for discrete latents"),
            ("gamma", self.gamma >= 0, ">= 0"),
            ("omega", self.omega >= 0, ">= 0"),
            ("steps", self.steps >= 0, ">= 0"),
            ("batch_size", self.batch_size >= 2, ">= 2"),
            ("temperature", self.temperature > 0, "> 0"),
            ("image_size", self.preset != "paper_conv" or self.image_size == 64, "64 for paper_conv"),
            ("num_labels", "semi" not in self.objective or self.num_labels >= 10, ">= 10 for semi objectives"),
            ("log_every", self.log_every >= 1, ">= 1"),
        ]
        for key, ok, want in checks:
            if not ok:
                raise ConfigError(f"{key}={getattr(self, key)!r} must be {want}", key=key)
        return self

    @property
    def uses_factor(self) -> bool:
        return self.objective.startswith("factor")

    @property
    def uses_semi(self) -> bool:
        return self.objective.endswith("semi")

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.initial_scale, self.final_scale, self.steps, self.temperature)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown model setting '{key}'", key=key)
        return cls(**data).validate()


@dataclass
class ElboTerms:
    negative_elbo: Tensor
    recon: Tensor
    kl: Tensor
    z: Tensor
    latents: Tensor
    params: object
    noise: object = None


@dataclass
class TrainedModel:
    config: ModelConfig
    encoder: nn.Module
    decoder: nn.Module
    steps: int = 0
    losses: dict = field(default_factory=dict)

    @property
    def discrete(self) -> bool:
        return self.config.latent_kind == "discrete"

    @property
    def mask(self):
        c = self.config
        if not self.discrete or not c.mask_sizes:
            return None
        return category_mask(c.n, c.m, c.mask_sizes)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.parameters("encoder."), **self.decoder.parameters("decoder.")}

    def _input(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        c = self.config
        want = (c.image_size, c.image_size, c.channels)
        if images.ndim != 4 or images.shape[1:] != want:
            raise ShapeError(f"model expects images of shape (N, {want[0]}, {want[1]}, {want[2]}), got {images.shape}")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ObservationError("pixel values must lie in [0, 1]")
        return images.transpose(0, 3, 1, 2) if c.preset == "paper_conv" else images

    def target(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if self.config.preset == "mlp_small":
            return images.reshape(len(images), -1)
        return images.transpose(0, 3, 1, 2).reshape(len(images), -1)

    def encode(self, images, mask=None):
        c = self.config
        head = self.encoder(Tensor(self._input(images)))
        b = head.shape[0]
        if self.discrete:
            la = apply("reshape", head, shape=(b, c.n, c.m))
            mask = self.mask if mask is None else mask
            if mask is not None:
                la = apply("add", la, np.where(mask, 0.0, settings.MASK_LOGIT))
            return DiscreteLatentParams(la)
        mu = apply("slice", head, start=0, stop=c.n, axis=1)
        sigma = apply("exp", apply("slice", head, start=c.n, stop=2 * c.n, axis=1))
        return GaussianLatentParams(mu, sigma)

    def decode(self, latents) -> Tensor:
        out = self.decoder(latents if isinstance(latents, Tensor) else Tensor(latents))
        return apply("reshape", out, shape=(out.shape[0], -1))

    def decode_images(self, latents) -> np.ndarray:
        c = self.config
        with no_grad():
            probs = special.expit(self.decode(np.asarray(latents, dtype=np.float64)).data)
        if c.preset == "mlp_small":
            return probs.reshape(-1, c.image_size, c.image_size, c.channels)
        return probs.reshape(-1, c.channels, c.image_size, c.image_size).transpose(0, 2, 3, 1)

    def representation(self, images, batch: int = 512) -> np.ndarray:
        """Deterministic r(x): f(softmax(log alpha)) for discrete latents, mu for Gaussian."""
        out = []
        with no_grad():
            for lo in range(0, len(images), batch):
                params = self.encode(images[lo:lo + batch])
                if self.discrete:
                    out.append(representation(params, self.config.symmetric))
                else:
                    out.append(params.mu.data)
        return np.concatenate(out) if out else np.zeros((0, self.config.n))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters().items()}
        out["meta.steps"] = np.array(float(self.steps))
        return out

    def save(self, directory, **meta) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_checkpoint(directory / CHECKPOINT_NAME, self.arrays())
        write_config(directory / SIDECAR_NAME, {"config": self.config.to_dict(), "steps": self.steps,
                                                "losses": self.losses, **meta})
        return directory / CHECKPOINT_NAME

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        directory = path if path.is_dir() else path.parent
        checkpoint = directory / CHECKPOINT_NAME if path.is_dir() else path
        sidecar = read_config(directory / SIDECAR_NAME)
        model = build_model(ModelConfig.from_dict(sidecar["config"]), np.random.default_rng(0))
        arrays = read_checkpoint(checkpoint)
        params = model.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise FormatError(f"checkpoint lacks arrays {sorted(missing)}", checkpoint)
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise FormatError(f"array '{name}' has shape {arrays[name].shape}, expected {p.data.shape}", checkpoint)
            p.data = arrays[name]
        model.steps = int(arrays.get("meta.steps", sidecar.get("steps", 0)))
        model.losses = sidecar.get("losses", {})
        return model


# ===== Architectures =====
def _head_size(config: ModelConfig) -> int:
    return config.n * config.m if config.latent_kind == "discrete" else 2 * config.n


def _mlp_encoder(config, rng):
    d = config.image_size ** 2 * config.channels
    h = config.hidden
    return nn.Sequential(nn.Flatten(), nn.Linear(d, h, rng), nn.ReLU(), nn.Linear(h, h, rng), nn.ReLU(),
                         nn.Linear(h, _head_size(config), rng))


def _mlp_decoder(config, rng):
    d = config.image_size ** 2 * config.channels
    h = config.hidden
    return nn.Sequential(nn.Linear(config.n, h, rng), nn.ReLU(), nn.Linear(h, h, rng), nn.ReLU(),
                         nn.Linear(h, d, rng))


def _conv_encoder(config, rng):
    layers, c_in = [], config.channels
    for c_out in (32, 32, 64, 64):
        layers += [nn.Conv2d(c_in, c_out, 4, rng, stride=2, padding=1), nn.ReLU()]
        c_in = c_out
    return nn.Sequential(*layers, nn.Flatten(), nn.Linear(64 * 4 * 4, 256, rng), nn.ReLU(),
                         nn.Linear(256, _head_size(config), rng))


def _conv_decoder(config, rng):
    layers = [nn.Linear(config.n, 256, rng), nn.ReLU(), nn.Linear(256, 64 * 4 * 4, rng), nn.ReLU(),
              nn.Reshape(64, 4, 4)]
    c_in = 64
    outs = (64, 32, 32, config.channels)
    for i, c_out in enumerate(outs):
        layers.append(nn.ConvTranspose2d(c_in, c_out, 4, rng, stride=2, padding=1))
        if i < len(outs) - 1:
            layers.append(nn.ReLU())
        c_in = c_out
    return nn.Sequential(*layers)


def _broadcast_decoder(config, rng):
    s = config.image_size
    return nn.Sequential(nn.SpatialBroadcast(s, s), nn.Conv2d(config.n + 2, 64, 4, rng), nn.ReLU(),
                         nn.Conv2d(64, 64, 4, rng), nn.ReLU(), nn.Conv2d(64, config.channels, 4, rng))


ARCHITECTURES = {
    "mlp_small": (_mlp_encoder, _mlp_decoder),
    "paper_conv": (_conv_encoder, _conv_decoder),
    "broadcast_circles": (_mlp_encoder, _broadcast_decoder),
}


def build_model(config: ModelConfig, rng) -> TrainedModel:
    config.validate()
    try:
        make_encoder, make_decoder = ARCHITECTURES[config.preset]
    except KeyError:
        raise ConfigError(f"unknown preset '{config.preset}'", key="preset") from None
    return TrainedModel(config, make_encoder(config, rng), make_decoder(config, rng))


# ===== Objectives =====
def bernoulli_nll(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-image summed Bernoulli NLL of decoder logits, shape (N,)."""
    per_pixel = apply("sub", apply("softplus", logits), apply("mul", logits, target))
    return apply("sum", per_pixel, axis=1)


def elbo_loss(model: TrainedModel, images, rng, mode: str = "train", scale: float = 1.0,
              noise=None, mask=None) -> ElboTerms:
    """Negative ELBO = batch-mean reconstruction NLL + batch-mean KL."""
    x = np.asarray(images, dtype=np.float64)
    params = model.encode(x, mask=mask)
    b = len(x)
    if mode == "eval":
        scale = 0.0
    if model.discrete:
        if noise is None:
            noise = sample_gumbel(params.log_alpha.shape, scale, rng)
        z = gumbel_softmax_sample(params, model.config.temperature, noise=noise)
        latents = map_f(z)
        kl = kl_categorical_uniform(params)
    else:
        if noise is None:
            noise = np.zeros(params.mu.shape) if mode == "eval" else rng.standard_normal(params.mu.shape)
        z = latents = apply("add", params.mu, apply("mul", params.sigma, noise))
        kl = kl_gaussian_standard(params)
    recon = apply("mean", bernoulli_nll(model.decode(latents), model.target(x)))
    kl = apply("mul", kl, 1.0 / b)
    return ElboTerms(apply("add", recon, kl), recon, kl, z, latents, params, noise)


def _simplex_kl_rows(z: np.ndarray) -> np.ndarray:
    m = z.shape[-1]
    return np.sum(special.xlogy(z, z) + z * math.log(m), axis=(-2, -1))


def st_gap(model: TrainedModel, images, rng, scale: float = 0.0) -> float:
    """Batch mean of |negative ELBO - negative ELBO with argmax-rounded latents| on shared noise.

    Both KL terms treat the sampled rows as categorical distributions, so the
    gap vanishes exactly when every sampled row is one-hot.
    """
    if not model.discrete:
        raise LatentError("st_gap needs a discrete latent model")
    x = np.asarray(images, dtype=np.float64)
    target = model.target(x)
    with no_grad():
        params = model.encode(x)
        noise = sample_gumbel(params.log_alpha.shape, scale, rng)
        z = gumbel_softmax_sample(params, model.config.temperature, noise=noise).data
        hot = straight_through_round(z)
        soft = bernoulli_nll(model.decode(map_f(z)), target).data + _simplex_kl_rows(z)
        rounded = bernoulli_nll(model.decode(map_f(hot)), target).data + _simplex_kl_rows(hot)
    return float(np.mean(np.abs(rounded - soft)))


def permute_dims(latents, rng) -> np.ndarray:
    """Shuffle each latent column independently across the batch."""
    data = latents.data if isinstance(latents, Tensor) else np.asarray(latents, dtype=np.float64)
    out = data.copy()
    for j in range(out.shape[1]):
        out[:, j] = out[rng.permutation(len(out)), j]
    return out


class Discriminator(nn.Module):
    """Classifies latent rows as drawn from q(z) (class 0) or its shuffled marginals (class 1)."""

    def __init__(self, n: int, rng, width: int = settings.DISC_WIDTH, depth: int = settings.DISC_DEPTH,
                 lr: float = settings.ADAM_LR):
        layers, d = [], n
        for _ in range(depth):
            layers += [nn.Linear(d, width, rng), nn.LeakyReLU()]
            d = width
        self.net = nn.Sequential(*layers, nn.Linear(d, 2, rng))
        self.state = AdamState(lr=lr, beta1=settings.DISC_BETA1, beta2=settings.DISC_BETA2)

    def children(self):
        return {"net": self.net}

    def forward(self, x):
        return self.net(x)


def factor_dvae_loss(model: TrainedModel, discriminator: Discriminator, images, gamma: float, rng,
                     scale: float = 1.0, noise=None):
    """Negative ELBO plus gamma times the density-ratio estimate of total correlation."""
    terms = elbo_loss(model, images, rng, scale=scale, noise=noise)
    logits = discriminator(terms.latents)
    ratio = apply("sub", apply("slice", logits, start=0, stop=1, axis=1), apply("slice", logits, start=1, stop=2, axis=1))
    tc_part = apply("mul", apply("mean", ratio), float(gamma))
    return apply("add", terms.negative_elbo, tc_part), terms, tc_part


def discriminator_step(discriminator: Discriminator, real, permuted) -> float:
    """One Adam update on 2-class cross entropy; returns the loss before the update."""
    real = np.asarray(real, dtype=np.float64)
    permuted = np.asarray(permuted, dtype=np.float64)
    if real.shape != permuted.shape:
        raise ShapeError(f"real {real.shape} and permuted {permuted.shape} latents differ in shape")
    params = discriminator.parameters()
    zero_grad(params)
    lp_real = apply("log_softmax", discriminator(Tensor(real)))
    lp_perm = apply("log_softmax", discriminator(Tensor(permuted)))
    ce_real = apply("mean", apply("slice", lp_real, start=0, stop=1, axis=1))
    ce_perm = apply("mean", apply("slice", lp_perm, start=1, stop=2, axis=1))
    loss = apply("mul", apply("add", ce_real, ce_perm), -0.5)
    backward(loss)
    adam_step(params, gradients(params), discriminator.state)
    return loss.item()


# ===== Semi-supervision =====
def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def label_bins(spec, factors, m: int) -> np.ndarray:
    """0-based target category per (sample, factor): 1 + round((v-1)(m-1)/(c-1)) in 1-based terms.

    Discrete factors with 2 <= c <= m land exactly on the active categories of
    a J(m, c) mask.
    """
    factors = spec.check(factors)
    out = np.zeros(factors.shape, dtype=np.int64)
    for i, f in enumerate(spec.factors):
        if f.discrete and 2 <= f.cardinality <= m:
            out[:, i] = active_categories(m, f.cardinality)[factors[:, i].astype(np.int64) - 1] - 1
        else:
            out[:, i] = round_half_up(f.unit(factors[:, i]) * (m - 1))
    return out


def label_mask_sizes(spec, n: int, m: int) -> list:
    """m' per latent dimension: the cardinality of the factor it supervises."""
    sizes = [None] * n
    for i, f in enumerate(spec.factors[:n]):
        if f.discrete and f.cardinality >= 2:
            sizes[i] = min(f.cardinality, m)
    return sizes


def supervised_term(model: TrainedModel, images, factors, spec, mask=None) -> Tensor:
    """Batch-mean penalty tying latent dimension i to factor i."""
    c = model.config
    if spec.k > c.n:
        raise FactorError(f"{spec.k} factors cannot supervise {c.n} latent dimensions")
    params = model.encode(images, mask=mask)
    b = len(images)
    if model.discrete:
        bins = label_bins(spec, factors, c.m)
        onehot = np.zeros((b, c.n, c.m))
        for i in range(spec.k):
            onehot[np.arange(b), i, bins[:, i]] = 1.0
        picked = apply("sum", apply("mul", apply("log_softmax", params.log_alpha), onehot))
        return apply("mul", picked, -1.0 / b)
    factors = spec.check(factors)
    units = np.stack([f.unit(factors[:, i]) for i, f in enumerate(spec.factors)], axis=1)
    mu = apply("slice", params.mu, start=0, stop=spec.k, axis=1)
    if c.gaussian_rs == "l2":
        diff = apply("sub", mu, units)
        per = apply("mul", diff, diff)
    else:
        per = apply("sub", apply("softplus", mu), apply("mul", mu, units))
    return apply("mul", apply("sum", per), 1.0 / b)


def semi_sup_loss(model: TrainedModel, images, factors, spec, omega: float, rng, masked: bool = False,
                  scale: float = 1.0, base: Tensor | None = None):
    """Unsupervised loss plus omega times the supervised penalty on a labeled batch.

    ``base`` defaults to the negative ELBO of the labeled batch; training passes
    the loss of its unlabeled batch instead, and ``terms`` is then None.
    """
    if omega < 0:
        raise ConfigError(f"omega must be nonnegative, got {omega}", key="omega")
    mask = None
    if masked and model.discrete and model.mask is None:
        mask = category_mask(model.config.n, model.config.m, label_mask_sizes(spec, model.config.n, model.config.m))
    terms = None
    if base is None:
        terms = elbo_loss(model, images, rng, scale=scale, mask=mask)
        base = terms.negative_elbo
    sup = supervised_term(model, images, factors, spec, mask=mask)
    return apply("add", base, apply("mul", sup, float(omega))), terms, sup


# ===== Training =====
def _probe_losses(model, probe, rng) -> dict:
    with no_grad():
        terms = elbo_loss(model, probe, rng, mode="eval")
    out = {"recon": terms.recon.item(), "kl": terms.kl.item(), "neg_elbo": terms.negative_elbo.item()}
    out["st_gap"] = st_gap(model, probe, rng) if model.discrete else float("nan")
    return out


def train(config: ModelConfig, dataset, rng=None):
    """Fit ``config`` on ``dataset``; returns the model and its per-step log."""
    config.validate()
    if dataset.image_shape != (config.image_size, config.image_size, config.channels):
        raise ConfigError(f"dataset images {dataset.image_shape} do not fit image_size={config.image_size}, "
                          f"channels={config.channels}", key="image_size")
    spec = dataset.spec
    if config.uses_semi and spec.k > config.n:
        raise ConfigError(f"{spec.k} factors need n >= {spec.k} for semi-supervision", key="n")
    if config.masked and config.latent_kind == "discrete":
        config = replace(config, mask_sizes=label_mask_sizes(spec, config.n, config.m))

    rng = rng if rng is not None else np.random.default_rng(config.seed)
    init_rng, data_rng, noise_rng, disc_rng, label_rng, probe_rng = rng.spawn(6)
    model = build_model(config, init_rng)
    params = model.parameters()
    state = AdamState(lr=config.lr)
    schedule = config.schedule()
    probe, _ = dataset.sample_batch(settings.PROBE_BATCH, probe_rng)

    disc = None
    if config.uses_factor:
        disc = Discriminator(config.n, disc_rng, config.disc_width, config.disc_depth, config.disc_lr)

    pool = val = None
    if config.uses_semi:
        images, factors = dataset.sample_batch(config.num_labels, label_rng)
        cut = int(round(settings.LABEL_TRAIN_SPLIT * config.num_labels))
        pool, val = (images[:cut], factors[:cut]), (images[cut:], factors[cut:])

    rows = []
    for step in trange(config.steps, desc="train", disable=not settings.PROGRESS):
        scale = anneal_scale(schedule, step)
        images, _ = dataset.sample_batch(config.batch_size, data_rng)
        zero_grad(params)
        if disc is not None:
            total, terms, tc = factor_dvae_loss(model, disc, images, config.gamma, noise_rng, scale)
        else:
            terms = elbo_loss(model, images, noise_rng, scale=scale)
            total, tc = terms.negative_elbo, Tensor(0.0)
        sup = Tensor(0.0)
        if pool is not None:
            idx = label_rng.integers(0, len(pool[0]), size=config.batch_size)
            total, _, sup = semi_sup_loss(model, pool[0][idx], pool[1][idx], spec, config.omega, noise_rng,
                                          masked=config.masked, scale=scale, base=total)
        if not np.isfinite(total.data).all():
            raise DivergenceError(step, total.item())
        backward(total)
        adam_step(params, gradients(params), state)
        if disc is not None:
            real = terms.latents.data
            discriminator_step(disc, real, permute_dims(real, noise_rng))
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            gap = st_gap(model, probe, np.random.default_rng(config.seed)) if model.discrete else float("nan")
            rows.append({"step": step + 1, "recon": terms.recon.item(), "kl": terms.kl.item(),
                         "tc": tc.item(), "sup": sup.item(), "st_gap": gap})
            logger.debug("step %d: %s", step + 1, rows[-1])

    model.steps = config.steps
    model.losses = _probe_losses(model, probe, np.random.default_rng(config.seed))
    if val is not None:
        with no_grad():
            model.losses["sup_val"] = supervised_term(model, val[0], val[1], spec).item()
    logger.info("trained %s/%s for %d steps: %s", config.latent_kind, config.objective, config.steps, model.losses)
    return model, pd.DataFrame(rows, columns=LOG_COLUMNS)
