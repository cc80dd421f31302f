"""Project reasoned node features back onto proposals and pixels, then classify."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import FeatureMap, ScoreMap, feature_matrix, stuff_weights
from .tensor import Mat, ShapeError, add_row, concat_cols, matmul, transpose


@dataclass
class ProjectionParams:
    W_intra_th: Mat  # (N + T*D0) x D1
    W_intra_st: Mat  # (N + T*D0) x D2
    W_cls_th: Mat  # (N + D1) x C_th
    b_cls_th: Mat  # 1 x C_th
    W_cls_st: Mat  # (N + D2) x C_st
    b_cls_st: Mat  # 1 x C_st

    def named(self) -> dict[str, Mat]:
        return {
            "W_intra_th": self.W_intra_th,
            "W_intra_st": self.W_intra_st,
            "W_cls_th": self.W_cls_th,
            "b_cls_th": self.b_cls_th,
            "W_cls_st": self.W_cls_st,
            "b_cls_st": self.b_cls_st,
        }

    @classmethod
    def from_named(cls, named: dict[str, Mat]) -> "ProjectionParams":
        return cls(**{k: named[k] for k in cls.__dataclass_fields__})

    @classmethod
    def init(
        cls, rng: np.random.Generator, N: int, width: int, D1: int, D2: int, n_thing_classes: int, n_stuff_classes: int
    ) -> "ProjectionParams":
        def w(r, c):
            return Mat(rng.normal(0.0, 1.0 / np.sqrt(r), (r, c)), requires_grad=True)

        def small(r, c):
            return Mat(rng.normal(0.0, 0.1 / np.sqrt(r), (r, c)), requires_grad=True)

        return cls(
            W_intra_th=w(width, D1),
            W_intra_st=w(width, D2),
            W_cls_th=small(N + D1, n_thing_classes),
            b_cls_th=Mat.zeros(1, n_thing_classes, requires_grad=True),
            W_cls_st=small(N + D2, n_stuff_classes),
            b_cls_st=Mat.zeros(1, n_stuff_classes, requires_grad=True),
        )


def project_things(X_th: Mat, A_th: Mat, params: ProjectionParams) -> Mat:
    """Proposal-level graph features, A_th X_th W_intra_th."""
    return matmul(matmul(A_th, X_th), params.W_intra_th)


def classify_regions(region_features: Mat, f_th: Mat, params: ProjectionParams) -> Mat:
    """Thing-class logits from [visual features || graph features]."""
    if region_features.rows != f_th.rows:
        raise ShapeError(f"{region_features.rows} regions but {f_th.rows} graph feature rows")
    return add_row(matmul(concat_cols(region_features, f_th), params.W_cls_th), params.b_cls_th)


def project_stuff(X_st: Mat, S, params: ProjectionParams) -> Mat:
    """Pixel-level graph features as an HW x D2 matrix (pixel-major).

    Uses the same softmax-over-pixels weights as class-center extraction.
    """
    W = stuff_weights(S)
    if W.cols != X_st.rows:
        raise ShapeError(f"score map has {W.cols} classes, graph has {X_st.rows} stuff nodes")
    return matmul(matmul(W, X_st), params.W_intra_st)


def segment_pixels(F, f_st: Mat, params: ProjectionParams) -> Mat:
    """Per-pixel (1x1 conv) stuff logits over [F || f_st]; HW x C_st."""
    pix = transpose(feature_matrix(F))
    if pix.rows != f_st.rows:
        raise ShapeError(f"feature map has {pix.rows} pixels, f_st has {f_st.rows}")
    return add_row(matmul(concat_cols(pix, f_st), params.W_cls_st), params.b_cls_st)


def pixels_to_raster(m: Mat | np.ndarray, height: int, width: int) -> np.ndarray:
    """HW x C pixel-major matrix -> C x H x W array."""
    arr = m.data if isinstance(m, Mat) else np.asarray(m)
    return arr.T.reshape(arr.shape[1], height, width)


def refined_score_map(logits: Mat, like: FeatureMap | ScoreMap) -> ScoreMap:
    h, w = like.hw
    return ScoreMap(pixels_to_raster(logits, h, w))
