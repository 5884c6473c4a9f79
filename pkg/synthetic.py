"""
Synthetic MIL data with known instance labels.

Negative instances come from a g-component Gaussian mixture ("phenotypes")
whose means sit on a sphere; positive instances are drawn from the same
mixture and displaced by one shared vector. The optional entangled mode
mixes every feature through a random ill-conditioned matrix and appends
pure-noise dimensions.

Randomness is split into independent child streams of
SeedSequence(seed) so that switching `entangle` or `distractor_dims` never
changes which instances are positive.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from errors import DimensionMismatchError
from mil_dataset import BagTable, Dataset, DatasetSplit, InstanceSet

logger = logging.getLogger(__name__)

# child stream indices under SeedSequence(config.seed)
_PARAMETERS, _ENTANGLE, _STRUCTURE, _NOISE, _DISTRACTORS = range(5)


class SyntheticConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    d: int = Field(32, ge=1)
    g: int = Field(10, ge=1)
    n_neg_bags: int = Field(50, ge=1)
    n_pos_bags: int = Field(50, ge=1)
    n_test_neg_bags: Optional[int] = Field(None, ge=1)
    n_test_pos_bags: Optional[int] = Field(None, ge=1)
    bag_size: int = Field(200, ge=1)
    witness_rate: float = Field(0.05, gt=0, le=1)
    separation: float = Field(8.0, ge=0)
    phenotype_spread: float = Field(10.0, ge=0)
    entangle: bool = False
    distractor_dims: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _entangle_needs_two_dims(self) -> "SyntheticConfig":
        if self.entangle and self.d < 2:
            raise ValueError("entangle requires d >= 2 (the mixing matrix needs a condition number >= 10)")
        return self

    @property
    def emitted_dim(self) -> int:
        return self.d + self.distractor_dims

    @property
    def positives_per_bag(self) -> int:
        return max(1, int(np.floor(self.witness_rate * self.bag_size + 0.5)))

    @property
    def test_bag_counts(self) -> Tuple[int, int]:
        return (self.n_test_neg_bags or self.n_neg_bags, self.n_test_pos_bags or self.n_pos_bags)


@dataclass(frozen=True)
class GenerativeModel:
    """The stored parameters behind a SyntheticConfig."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    shift: np.ndarray
    sigma_bar: float
    mixing: Optional[np.ndarray]
    distractor_scale: float

    @property
    def positive_means(self) -> np.ndarray:
        return self.means + self.shift


def _streams(seed: int) -> list:
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(5)]


def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _mixing_matrix(rng: np.random.Generator, d: int) -> np.ndarray:
    kappa = 10.0 ** rng.uniform(1.0, 2.0)
    log_s = rng.uniform(0.0, np.log(kappa), d)
    log_s[0], log_s[-1] = 0.0, np.log(kappa)
    s = np.exp(log_s - log_s.mean())  # unit geometric mean
    return (_random_rotation(rng, d) * s) @ _random_rotation(rng, d).T


def build_generative_model(config: SyntheticConfig) -> GenerativeModel:
    streams = _streams(config.seed)
    rng = streams[_PARAMETERS]
    d, g = config.d, config.g

    covariances = np.empty((g, d, d))
    for k in range(g):
        q = _random_rotation(rng, d)
        eigenvalues = 10.0 ** rng.uniform(0.0, 1.0, d)
        cov = (q * eigenvalues) @ q.T
        covariances[k] = (cov + cov.T) / 2
    sigma_bar = float(np.sqrt(np.trace(covariances, axis1=1, axis2=2).mean() / d))

    means = config.phenotype_spread * sigma_bar * _unit(rng, (g, d))
    shift = config.separation * sigma_bar * _unit(rng, d)
    weights = np.full(g, 1.0 / g)

    mixing = _mixing_matrix(streams[_ENTANGLE], d) if config.entangle else None

    distractor_scale = 0.0
    if config.distractor_dims:
        centred = means - weights @ means
        mixture_cov = np.tensordot(weights, covariances, axes=1) + (centred.T * weights) @ centred
        a = mixing if mixing is not None else np.eye(d)
        distractor_scale = float(np.sqrt(np.trace(a @ mixture_cov @ a.T) / d))

    return GenerativeModel(weights, means, covariances, shift, sigma_bar, mixing, distractor_scale)


def _sample_split(config: SyntheticConfig, model: GenerativeModel, n_neg: int, n_pos: int,
                  first_bag_id: int, streams: list) -> Dataset:
    structure = streams[_STRUCTURE]
    n_bags = n_neg + n_pos
    bag_labels = structure.permutation(np.repeat([0, 1], [n_neg, n_pos]))
    bag_of = np.repeat(np.arange(n_bags), config.bag_size)
    n = bag_of.size

    labels = np.zeros(n, dtype=np.int64)
    k_pos = config.positives_per_bag
    for b in np.flatnonzero(bag_labels == 1):
        chosen = structure.permutation(config.bag_size)[:k_pos]
        labels[b * config.bag_size + chosen] = 1
    components = structure.choice(config.g, size=n, p=model.weights)

    z = streams[_NOISE].standard_normal((n, config.d))
    features = np.empty((n, config.d))
    for k in range(config.g):
        rows = components == k
        factor = np.linalg.cholesky(model.covariances[k])
        features[rows] = model.means[k] + z[rows] @ factor.T
    features[labels == 1] += model.shift

    if model.mixing is not None:
        features = features @ model.mixing.T
    if config.distractor_dims:
        noise = streams[_DISTRACTORS].standard_normal((n, config.distractor_dims))
        features = np.hstack([features, model.distractor_scale * noise])

    # float32 values so DGMF round trips are exact
    features = features.astype(np.float32).astype(np.float64)

    bag_ids = np.arange(first_bag_id, first_bag_id + n_bags)
    instances = InstanceSet(features, bag_of, labels)
    return Dataset(instances, BagTable.from_membership(bag_ids, bag_labels, bag_of))


def generate(config: SyntheticConfig) -> DatasetSplit:
    """Draw a train/test split; a pure function of `config`."""
    model = build_generative_model(config)
    streams = _streams(config.seed)
    train = _sample_split(config, model, config.n_neg_bags, config.n_pos_bags, 0, streams)
    n_test_neg, n_test_pos = config.test_bag_counts
    test = _sample_split(config, model, n_test_neg, n_test_pos, len(train.bags), streams)
    logger.debug("generated %d train / %d test instances, dim %d",
                 train.instances.n, test.instances.n, config.emitted_dim)
    return DatasetSplit(train, test)


def _mixture_logpdf(z: np.ndarray, weights: np.ndarray, means: np.ndarray, covariances: np.ndarray) -> np.ndarray:
    per_component = np.stack([
        np.atleast_1d(multivariate_normal.logpdf(z, mean=mean, cov=cov)) + np.log(w)
        for w, mean, cov in zip(weights, means, covariances)
    ])
    return logsumexp(per_component, axis=0)


def bayes_scores(config: SyntheticConfig, instances: InstanceSet) -> np.ndarray:
    """log p_pos(z) - log p_neg(z) under the generator's own parameters."""
    if instances.d != config.emitted_dim:
        raise DimensionMismatchError(
            f"instances have d={instances.d}, config emits {config.emitted_dim} dimensions")
    model = build_generative_model(config)
    # distractors are class-independent and cancel in the ratio
    z = instances.features[:, :config.d]
    if model.mixing is not None:
        z = np.linalg.solve(model.mixing, z.T).T
    log_pos = _mixture_logpdf(z, model.weights, model.positive_means, model.covariances)
    log_neg = _mixture_logpdf(z, model.weights, model.means, model.covariances)
    return log_pos - log_neg
