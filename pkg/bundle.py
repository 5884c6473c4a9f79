"""
Model bundle: everything `eval` needs to score new data, as one JSON document.

Floats are written with Python's shortest round-trip repr, so a reloaded
bundle reproduces the trained model bit for bit and identical runs produce
identical files.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from distribution import ClusterModel
from errors import BundleError, DimensionMismatchError, DGMILError
from refinement import HeadParams, RefinementState, collapse, remap_features
from reporting import PathLike, write_json
from run_config import ARTIFACT_VERSION

logger = logging.getLogger(__name__)


class HeadRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    projection_weight: List[List[float]]
    projection_bias: List[float]
    classifier_weight: List[float]
    classifier_bias: float

    @classmethod
    def from_params(cls, params: HeadParams) -> "HeadRecord":
        return cls(
            projection_weight=params.projection_weight.tolist(),
            projection_bias=params.projection_bias.tolist(),
            classifier_weight=params.classifier_weight.tolist(),
            classifier_bias=params.classifier_bias,
        )

    def to_params(self) -> HeadParams:
        return HeadParams(np.array(self.projection_weight), np.array(self.projection_bias),
                          np.array(self.classifier_weight), self.classifier_bias)


class ClusterRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mean: List[float]
    covariance: List[List[float]]
    member_count: int
    epsilon: float


class ModelBundle(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    version: str
    config: Dict[str, Any]
    rounds: List[HeadRecord]
    collapsed: HeadRecord
    clusters: List[ClusterRecord]
    anchors: Tuple[float, float]
    threshold: float
    train_instance_auc: Optional[float]
    train_bag_auc: float
    converged: bool

    @classmethod
    def from_state(cls, state: RefinementState, config: Dict[str, Any]) -> "ModelBundle":
        model = state.cluster_model
        clusters = [
            ClusterRecord(mean=model.means[m].tolist(), covariance=model.covariances[m].tolist(),
                          member_count=int(model.counts[m]), epsilon=float(model.epsilons[m]))
            for m in range(model.M)
        ]
        return cls(
            version=ARTIFACT_VERSION,
            config=config,
            rounds=[HeadRecord.from_params(h) for h in state.heads],
            collapsed=HeadRecord.from_params(state.collapsed()),
            clusters=clusters,
            anchors=state.anchors,
            threshold=state.threshold,
            train_instance_auc=state.final_instance_auc,
            train_bag_auc=state.final_bag_auc,
            converged=state.converged,
        )

    def to_model(self) -> "BundledModel":
        try:
            cluster_model = ClusterModel.from_statistics(
                [c.mean for c in self.clusters],
                [c.covariance for c in self.clusters],
                [c.member_count for c in self.clusters],
                [c.epsilon for c in self.clusters],
            )
            heads = tuple(record.to_params() for record in self.rounds)
            stored = self.collapsed.to_params()
        except DGMILError as exc:
            raise BundleError(f"bundle is inconsistent: {exc}") from exc
        if any(h.d != cluster_model.d for h in heads + (stored,)):
            raise BundleError("projection heads and cluster model disagree on the feature dimension")
        composed = collapse(heads, cluster_model.d)
        if not all(np.allclose(a, b, rtol=1e-9, atol=1e-12) for a, b in zip(composed.arrays(), stored.arrays())):
            raise BundleError("collapsed projection does not match the per-round heads")
        return BundledModel(heads, cluster_model, tuple(self.anchors), self.threshold)


class BundledModel:
    """A trained pipeline rebuilt from a bundle; usable wherever a RefinementState is evaluated."""

    def __init__(self, heads: Tuple[HeadParams, ...], cluster_model: ClusterModel,
                 anchors: Tuple[float, float], threshold: float):
        self.heads = heads
        self.cluster_model = cluster_model
        self.anchors = anchors
        self.threshold = threshold

    def transform(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != self.cluster_model.d:
            raise DimensionMismatchError(
                f"bundle expects d={self.cluster_model.d}, features have d={features.shape[1]}")
        for heads in self.heads:
            features = remap_features(features, heads)
        return np.asarray(features, dtype=np.float64)

    def collapsed(self) -> HeadParams:
        return collapse(self.heads, self.cluster_model.d)


def save_bundle(bundle: ModelBundle, path: PathLike) -> None:
    write_json(path, bundle.model_dump(mode="json"))
    logger.debug("wrote bundle %s (%d rounds, %d clusters)", path, len(bundle.rounds), len(bundle.clusters))


def load_bundle(path: PathLike) -> ModelBundle:
    try:
        document = json.loads(Path(path).read_bytes().decode("utf-8"))
    except OSError as exc:
        raise BundleError(f"cannot read bundle {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise BundleError(f"{path} is not a JSON model bundle: not UTF-8 text at byte {exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path} is not a JSON model bundle: {exc}") from exc
    try:
        bundle = ModelBundle.model_validate(document)
    except ValidationError as exc:
        raise BundleError(f"{path} is not a valid model bundle: {exc.error_count()} schema errors") from exc
    if bundle.version != ARTIFACT_VERSION:
        logger.warning("bundle %s was written by version %s (this is %s)", path, bundle.version, ARTIFACT_VERSION)
    return bundle
