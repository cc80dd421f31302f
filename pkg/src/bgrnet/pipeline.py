"""Full forward pass: nodes -> joint reasoning -> projection -> both heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .graphs import FeatureMap, RegionSet, ScoreMap, build_thing_nodes, extract_class_centers
from .projection import ProjectionParams, classify_regions, project_stuff, project_things, segment_pixels
from .reasoning import (
    MODES as REASONING_MODES,
    AttentionHead,
    ReasoningLayerParams,
    init_layers,
    load_checkpoint,
    run_reasoning,
    save_checkpoint,
)
from .tensor import ConfigError, Mat, cross_entropy, scale_add

# Reasoning modes plus the single-graph and no-graph variants.
PIPELINE_MODES = REASONING_MODES + ("thing-only", "stuff-only", "baseline")
ABLATION_MODES = (
    "bidirectional",
    "thing-to-stuff",
    "stuff-to-thing",
    "disconnected",
    "thing-only",
    "stuff-only",
    "cosine",
)


@dataclass
class ModelConfig:
    N: int = 16
    D0: int = 16
    D1: int = 16
    D2: int = 16
    T: int = 2
    heads: int = 3
    n_thing_classes: int = 3
    n_stuff_classes: int = 4
    mode: str = "bidirectional"
    slope: float = 0.2

    def __post_init__(self):
        if self.mode not in PIPELINE_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {PIPELINE_MODES}")
        if self.T < 1 or self.heads < 1:
            raise ConfigError("T and heads must be >= 1")
        if min(self.N, self.D0, self.D1, self.D2) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def graph_width(self) -> int:
        return self.N + self.T * self.D0


class Model:
    """Parameters held as a name -> Mat map; SGD swaps in new Mats."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Mat]):
        self.cfg = cfg
        self.params = dict(params)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        layers = init_layers(rng, cfg.N, cfg.D0, cfg.T, cfg.heads)
        proj = ProjectionParams.init(
            rng, cfg.N, cfg.graph_width, cfg.D1, cfg.D2, cfg.n_thing_classes, cfg.n_stuff_classes
        )
        params = {}
        for t, p in enumerate(layers):
            params[f"layer{t}.W_th"] = p.W_th
            params[f"layer{t}.W_st"] = p.W_st
            for h, head in enumerate(p.heads):
                params[f"layer{t}.head{h}"] = head.W_pair
        params.update(proj.named())
        return cls(cfg, params)

    @property
    def layers(self) -> list[ReasoningLayerParams]:
        return [
            ReasoningLayerParams(
                W_th=self.params[f"layer{t}.W_th"],
                W_st=self.params[f"layer{t}.W_st"],
                heads=[AttentionHead(self.params[f"layer{t}.head{h}"]) for h in range(self.cfg.heads)],
            )
            for t in range(self.cfg.T)
        ]

    @property
    def projection(self) -> ProjectionParams:
        return ProjectionParams.from_named(self.params)

    def with_params(self, params: dict[str, Mat]) -> "Model":
        return Model(self.cfg, params)

    def save(self, directory, extra_meta: Optional[dict] = None):
        meta = {"model": asdict(self.cfg), "mode": self.cfg.mode, "D0": self.cfg.D0}
        meta.update(extra_meta or {})
        return save_checkpoint(directory, self.layers, self.projection.named(), meta)

    @classmethod
    def load(cls, directory) -> tuple["Model", dict]:
        layers, extra, manifest = load_checkpoint(directory)
        cfg = ModelConfig(**manifest["model"])
        if len(layers) != cfg.T or manifest["heads"] != cfg.heads:
            raise ConfigError("checkpoint manifest disagrees with its model config")
        params = {}
        for t, p in enumerate(layers):
            params[f"layer{t}.W_th"] = p.W_th
            params[f"layer{t}.W_st"] = p.W_st
            for h, head in enumerate(p.heads):
                params[f"layer{t}.head{h}"] = head.W_pair
        params.update(extra)
        return cls(cfg, params), manifest


@dataclass
class ForwardOutput:
    thing_logits: Mat  # n_proposals x C_th
    stuff_logits: Mat  # HW x C_st
    f_th: Mat
    f_st: Mat


def uses_thing_graph(mode: str) -> bool:
    return mode not in ("stuff-only", "baseline")


def uses_stuff_graph(mode: str) -> bool:
    return mode not in ("thing-only", "baseline")


def forward_mats(
    model: Model,
    regions: Mat,
    features: Mat,
    scores: Mat,
    embeddings: Optional[np.ndarray] = None,
    mode: Optional[str] = None,
) -> ForwardOutput:
    """Forward pass on raw matrices.

    ``regions`` is n x N (n may be 0), ``features`` N x HW, ``scores`` C_st x HW.
    ``embeddings`` gives one row per reasoning node (things first) in cosine mode.
    """
    cfg = model.cfg
    mode = mode or cfg.mode
    proj = model.projection
    n_th, hw = regions.rows, features.cols
    thing_graph = uses_thing_graph(mode) and n_th > 0
    stuff_graph = uses_stuff_graph(mode)

    X_th = regions if thing_graph else Mat.zeros(0, cfg.N)
    X_st = extract_class_centers(features, scores).features if stuff_graph else Mat.zeros(0, cfg.N)

    f_th = Mat.zeros(n_th, cfg.D1)
    f_st = Mat.zeros(hw, cfg.D2)
    if thing_graph or stuff_graph:
        r_mode = mode if mode in REASONING_MODES else "bidirectional"
        out = run_reasoning(X_th, X_st, model.layers, r_mode, embeddings, cfg.slope)
        if thing_graph:
            f_th = project_things(out.X_th, out.A_th, proj)
        if stuff_graph:
            f_st = project_stuff(out.X_st, scores, proj)
    return ForwardOutput(
        thing_logits=classify_regions(regions, f_th, proj),
        stuff_logits=segment_pixels(features, f_st, proj),
        f_th=f_th,
        f_st=f_st,
    )


def scene_mats(features: FeatureMap, scores: ScoreMap, regions: RegionSet, N: int) -> tuple[Mat, Mat, Mat]:
    R = build_thing_nodes(regions) if len(regions) else Mat.zeros(0, N)
    Fm = Mat(features.values.reshape(features.channels, -1))
    Sm = Mat(scores.values.reshape(scores.classes, -1))
    return R, Fm, Sm


def node_embeddings(table: dict, regions: RegionSet, n_stuff: int) -> np.ndarray:
    """Per-node class embeddings (things by detector class guess, then stuff classes)."""
    things = np.asarray(table["things"], dtype=np.float64)
    stuff = np.asarray(table["stuff"], dtype=np.float64)
    if stuff.shape[0] != n_stuff:
        raise ConfigError(f"embedding table has {stuff.shape[0]} stuff rows, model has {n_stuff}")
    rows = []
    for i, p in enumerate(regions.proposals):
        if p.class_id is None:
            raise ConfigError(f"proposal {i} has no class guess for cosine mode")
        rows.append(things[p.class_id])
    rows.extend(stuff)
    return np.vstack(rows)


def losses(out: ForwardOutput, thing_labels, stuff_labels) -> tuple[Mat, Mat]:
    lt = cross_entropy(out.thing_logits, thing_labels)
    ls = cross_entropy(out.stuff_logits, stuff_labels)
    return lt, ls


def combined_loss(lt: Mat, ls: Mat, w_thing: float = 1.0, w_stuff: float = 1.0) -> Mat:
    return scale_add(lt, ls, w_thing, w_stuff)
