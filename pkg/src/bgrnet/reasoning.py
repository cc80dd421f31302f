"""Joint thing/stuff graph reasoning.

Nodes from both graphs are stacked into one matrix (things first). A fully
connected multi-head attention produces the row-stochastic joint adjacency,
whose off-diagonal blocks carry information across branches. Each reasoning
layer appends ``relu(A @ [X_th W_th; X_st W_st])`` to the node features.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import formats
from .graphs import cosine_adjacency
from .tensor import (
    ConfigError,
    Mat,
    ShapeError,
    concat_cols,
    concat_rows,
    leaky_relu,
    matmul,
    mean_of,
    outer_add,
    relu,
    slice_cols,
    slice_rows,
    softmax_axis,
    transpose,
)

logger = logging.getLogger(__name__)

MODES = ("bidirectional", "thing-to-stuff", "stuff-to-thing", "disconnected", "cosine")


@dataclass
class AttentionHead:
    W_pair: Mat  # 1 x 2d, applied to [x_i || x_j]


@dataclass
class ReasoningLayerParams:
    W_th: Mat
    W_st: Mat
    heads: list[AttentionHead]

    def __post_init__(self):
        if self.W_th.shape != self.W_st.shape:
            raise ShapeError(f"W_th {self.W_th.shape} and W_st {self.W_st.shape} must match")

    @property
    def d_in(self) -> int:
        return self.W_th.rows

    @property
    def d_out(self) -> int:
        return self.W_th.cols


@dataclass
class JointGraph:
    X: Mat
    n_thing: int
    n_stuff: int
    A: Mat

    def __post_init__(self):
        n = self.n_thing + self.n_stuff
        if self.X.rows != n or self.A.shape != (n, n):
            raise ShapeError(f"joint graph with {n} nodes got X {self.X.shape}, A {self.A.shape}")


@dataclass
class ReasoningOutput:
    X_th: Mat
    X_st: Mat
    A_th: Mat
    adjacencies: list[Mat]


def direction_mask(n_thing: int, n_stuff: int, mode: str) -> np.ndarray:
    """Admissible edges (row receives from column) of the joint graph."""
    if mode not in MODES:
        raise ConfigError(f"unknown reasoning mode {mode!r}")
    n = n_thing + n_stuff
    mask = np.ones((n, n), dtype=bool)
    if mode in ("thing-to-stuff", "disconnected"):
        mask[:n_thing, n_thing:] = False
    if mode in ("stuff-to-thing", "disconnected"):
        mask[n_thing:, :n_thing] = False
    return mask


def pair_logits(X: Mat, head: AttentionHead, slope: float = 0.2) -> Mat:
    """LeakyReLU(W [x_i || x_j]) for all i, j; the pair term splits into source + target parts."""
    d = X.cols
    if head.W_pair.shape != (1, 2 * d):
        raise ShapeError(f"attention head expects width {head.W_pair.cols // 2}, nodes have {d}")
    src = matmul(X, transpose(slice_cols(head.W_pair, 0, d)))
    dst = transpose(matmul(X, transpose(slice_cols(head.W_pair, d, 2 * d))))
    return leaky_relu(outer_add(src, dst), slope)


def attention_adjacency(
    X: Mat,
    heads: Sequence[AttentionHead],
    mask: Optional[np.ndarray] = None,
    slope: float = 0.2,
) -> Mat:
    """Head-averaged row-softmax attention over a fully connected graph."""
    if X.rows < 1:
        raise ShapeError("attention_adjacency needs at least one node")
    if not heads:
        raise ConfigError("at least one attention head is required")
    return mean_of(softmax_axis(pair_logits(X, h, slope), "rows", mask) for h in heads)


def split_blocks(g: JointGraph) -> tuple[Mat, Mat, Mat, Mat]:
    """(A_th, A_s-t, A_t-s, A_st): top-left, top-right, bottom-left, bottom-right."""
    k, n = g.n_thing, g.n_thing + g.n_stuff
    top = slice_rows(g.A, 0, k)
    bottom = slice_rows(g.A, k, n)
    return slice_cols(top, 0, k), slice_cols(top, k, n), slice_cols(bottom, 0, k), slice_cols(bottom, k, n)


def assemble_blocks(A_th: Mat, A_s_t: Mat, A_t_s: Mat, A_st: Mat) -> Mat:
    return concat_rows(concat_cols(A_th, A_s_t), concat_cols(A_t_s, A_st))


def connect_thing_to_stuff(X_th: Mat, A_t_s: Mat, W_st: Mat) -> Mat:
    """Thing features carried onto stuff nodes: A_t-s X_th W_st."""
    return matmul(matmul(A_t_s, X_th), W_st)


def reasoning_layer(g: JointGraph, p: ReasoningLayerParams) -> Mat:
    """X ++ relu(A [X_th W_th; X_st W_st])."""
    if p.d_in != g.X.cols:
        raise ShapeError(f"layer expects width {p.d_in}, graph nodes have {g.X.cols}")
    k, n = g.n_thing, g.n_thing + g.n_stuff
    proj = concat_rows(
        matmul(slice_rows(g.X, 0, k), p.W_th),
        matmul(slice_rows(g.X, k, n), p.W_st),
    )
    return concat_cols(g.X, relu(matmul(g.A, proj)))


def run_reasoning(
    X_th: Mat,
    X_st: Mat,
    params: Sequence[ReasoningLayerParams],
    mode: str = "bidirectional",
    embeddings: Optional[np.ndarray] = None,
    slope: float = 0.2,
) -> ReasoningOutput:
    """Stack T reasoning layers over the joint graph.

    Attention is recomputed from the current node features at every layer.
    ``embeddings`` (one row per node, things first) is required in cosine mode.
    """
    if len(params) < 1:
        raise ConfigError("run_reasoning needs T >= 1 layers")
    if mode not in MODES:
        raise ConfigError(f"unknown reasoning mode {mode!r}")
    if X_th.cols != X_st.cols:
        raise ShapeError(f"thing width {X_th.cols} != stuff width {X_st.cols}")
    k, m = X_th.rows, X_st.rows
    n = k + m
    if n < 1:
        raise ShapeError("run_reasoning needs at least one node")

    fixed_A = None
    if mode == "cosine":
        if embeddings is None:
            raise ConfigError("cosine mode needs per-node embeddings")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[0] != n:
            raise ConfigError(f"cosine mode needs {n} embedding rows, got {embeddings.shape}")
        fixed_A = Mat(cosine_adjacency(embeddings))
    mask = direction_mask(k, m, mode) if mode in ("thing-to-stuff", "stuff-to-thing", "disconnected") else None

    X = concat_rows(X_th, X_st)
    adjacencies = []
    A = None
    for p in params:
        A = fixed_A if fixed_A is not None else attention_adjacency(X, p.heads, mask, slope)
        adjacencies.append(A)
        X = reasoning_layer(JointGraph(X, k, m, A), p)
    A_th = slice_cols(slice_rows(A, 0, k), 0, k)
    return ReasoningOutput(slice_rows(X, 0, k), slice_rows(X, k, n), A_th, adjacencies)


def init_layers(
    rng: np.random.Generator, N: int, D0: int, T: int, n_heads: int = 3, attn_scale: float = 0.1
) -> list[ReasoningLayerParams]:
    layers = []
    for t in range(T):
        d = N + t * D0
        layers.append(
            ReasoningLayerParams(
                W_th=Mat(rng.normal(0.0, 1.0 / np.sqrt(d), (d, D0)), requires_grad=True),
                W_st=Mat(rng.normal(0.0, 1.0 / np.sqrt(d), (d, D0)), requires_grad=True),
                heads=[
                    AttentionHead(Mat(rng.normal(0.0, attn_scale / np.sqrt(d), (1, 2 * d)), requires_grad=True))
                    for _ in range(n_heads)
                ],
            )
        )
    return layers


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(
    directory,
    layers: Sequence[ReasoningLayerParams],
    extra: dict[str, Mat],
    meta: dict,
) -> Path:
    """Write every parameter as BGRM plus ``manifest.json``.

    The manifest maps layer index -> parameter name -> file, and carries
    ``extra`` (non-layer parameters) under ``"projection"``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_layers: dict[str, dict[str, str]] = {}
    for t, p in enumerate(layers):
        entry = {}
        named = {"W_th": p.W_th, "W_st": p.W_st}
        named.update({f"head{h}": head.W_pair for h, head in enumerate(p.heads)})
        for name, mat in named.items():
            fname = f"layer{t}.{name}.bgrm"
            formats.write_bgrm(directory / fname, mat.data)
            entry[name] = fname
        manifest_layers[str(t)] = entry
    manifest_extra = {}
    for name, mat in extra.items():
        fname = f"{name}.bgrm"
        formats.write_bgrm(directory / fname, mat.data)
        manifest_extra[name] = fname
    manifest = dict(meta)
    manifest["T"] = len(layers)
    manifest["heads"] = len(layers[0].heads) if layers else 0
    manifest["layers"] = manifest_layers
    manifest["projection"] = manifest_extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[list[ReasoningLayerParams], dict[str, Mat], dict]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    layers = []
    for t in range(manifest["T"]):
        entry = manifest["layers"][str(t)]

        def load(name):
            return Mat(formats.read_bgrm(directory / entry[name]), requires_grad=True)

        layers.append(
            ReasoningLayerParams(
                W_th=load("W_th"),
                W_st=load("W_st"),
                heads=[AttentionHead(load(f"head{h}")) for h in range(manifest["heads"])],
            )
        )
    extra = {
        name: Mat(formats.read_bgrm(directory / fname), requires_grad=True)
        for name, fname in manifest["projection"].items()
    }
    return layers, extra, manifest
