"""Thing-graph and stuff-graph node construction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Mat, ShapeError, matmul, softmax_axis, transpose


@dataclass
class Proposal:
    feature: np.ndarray
    score: float
    class_id: Optional[int] = None
    mask: Optional[np.ndarray] = None


@dataclass
class RegionSet:
    proposals: list[Proposal] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.proposals)


@dataclass
class FeatureMap:
    """Backbone features, channels x height x width."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError(f"FeatureMap needs a non-empty N x H x W array, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("FeatureMap values must be finite")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.values.shape[1:]


@dataclass
class ScoreMap:
    """Per-stuff-class logits, classes x height x width."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError(f"ScoreMap needs a non-empty C x H x W array, got {self.values.shape}")

    @property
    def classes(self) -> int:
        return self.values.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.values.shape[1:]


@dataclass
class StuffNodeSet:
    features: Mat
    names: list[str]


def feature_matrix(F) -> Mat:
    """N x HW view of a feature map (a Mat is passed through)."""
    if isinstance(F, Mat):
        return F
    return Mat(F.values.reshape(F.channels, -1))


def score_matrix(S) -> Mat:
    """HW x C view of a score map (a C x HW Mat is transposed)."""
    if isinstance(S, Mat):
        return transpose(S)
    return Mat(S.values.reshape(S.classes, -1).T)


def build_thing_nodes(regions: RegionSet | Sequence[Proposal]) -> Mat:
    proposals = regions.proposals if isinstance(regions, RegionSet) else list(regions)
    if not proposals:
        raise ShapeError("build_thing_nodes: empty region set (run the stuff-only path instead)")
    feats = [np.asarray(p.feature, dtype=np.float64).ravel() for p in proposals]
    n = feats[0].size
    for i, f in enumerate(feats):
        if f.size != n:
            raise ShapeError(f"proposal {i} has feature length {f.size}, expected {n}")
    return Mat(np.stack(feats))


def stuff_weights(S) -> Mat:
    """HW x C soft assignment: each class column is a softmax over all pixels."""
    return softmax_axis(score_matrix(S), axis="cols")


def extract_class_centers(F, S, names: Sequence[str] | None = None) -> StuffNodeSet:
    """Class-center node features, (F_flat @ softmax_HW(S_flat))^T.

    ``F`` is a FeatureMap or an N x HW Mat, ``S`` a ScoreMap or a C x HW Mat.
    Each center is a convex combination of pixel features.
    """
    if isinstance(F, FeatureMap) and isinstance(S, ScoreMap) and F.hw != S.hw:
        raise ShapeError(f"feature map is {F.hw} but score map is {S.hw}")
    Fm = feature_matrix(F)
    W = stuff_weights(S)
    if Fm.cols != W.rows:
        raise ShapeError(f"feature map has {Fm.cols} pixels, score map {W.rows}")
    X = transpose(matmul(Fm, W))
    if names is None:
        names = [f"stuff{i}" for i in range(X.rows)]
    return StuffNodeSet(X, list(names))


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between rows of a and rows of b; zero-norm rows give 0."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return np.clip(an @ bn.T, -1.0, 1.0)


def center_similarity_map(F: FeatureMap, centers: StuffNodeSet | Mat, class_id: int) -> np.ndarray:
    """H x W cosine similarity between every pixel feature and one class center."""
    X = centers.features if isinstance(centers, StuffNodeSet) else centers
    if not 0 <= class_id < X.rows:
        raise IndexError(f"class_id {class_id} outside [0, {X.rows})")
    h, w = F.hw
    pix = F.values.reshape(F.channels, -1).T
    return _cosine(pix, X.data[class_id : class_id + 1])[:, 0].reshape(h, w)


def cosine_adjacency(embeddings: np.ndarray) -> np.ndarray:
    """Row-stochastic adjacency from clamped pairwise cosine similarity."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 1:
        raise ShapeError(f"cosine_adjacency needs n >= 1 embedding rows, got {E.shape}")
    A = np.maximum(_cosine(E, E), 0.0)
    s = A.sum(axis=1, keepdims=True)
    n = E.shape[0]
    return np.where(s > 0, A / np.where(s > 0, s, 1.0), 1.0 / n)
