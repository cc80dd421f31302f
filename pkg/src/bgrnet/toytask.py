"""Synthetic panoptic scenes and the desk-scale training / evaluation loop.

Scenes are horizontal stuff bands with small things (rectangles or discs)
placed on them. Every thing class lives on exactly one stuff class, so the
context carried by the joint graph is informative.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .fusion import FusionConfig, InstancePrediction, PanopticMap, Segment, fuse
from .graphs import FeatureMap, Proposal, RegionSet, ScoreMap
from .metrics import PQResult, accumulate, panoptic_quality
from .pipeline import (
    Model,
    ModelConfig,
    combined_loss,
    forward_mats,
    losses,
    node_embeddings,
    scene_mats,
)
from .tensor import ConfigError, Mat, NonFiniteError, backward, scale

logger = logging.getLogger(__name__)


@dataclass
class GenConfig:
    height: int = 12
    width: int = 12
    n_stuff: int = 4
    n_thing: int = 3
    channels: int = 16
    # thing class k only ever sits on stuff class rules[k]
    rules: tuple[int, ...] = (0, 1, 2)
    max_things: int = 3
    min_band: int = 4
    duplicates: int = 1
    noise: float = 2.0
    thing_gain: float = 0.4
    score_gain: float = 3.0
    score_noise: float = 2.0
    proposal_noise: float = 0.8
    embed_seed: int = 1234

    def __post_init__(self):
        self.rules = tuple(int(r) for r in self.rules)
        if self.height < self.min_band or self.width < 4 or self.channels < 1:
            raise ConfigError(f"degenerate scene dims {self.height}x{self.width}x{self.channels}")
        if self.n_stuff < 1 or self.n_thing < 1:
            raise ConfigError("need at least one stuff and one thing class")
        if len(self.rules) != self.n_thing or not all(0 <= r < self.n_stuff for r in self.rules):
            raise ConfigError(f"rules must map each of {self.n_thing} thing classes to a stuff class")

    def class_table(self) -> dict[int, bool]:
        """Unified ids: stuff 0..S-1, things S..S+K-1."""
        table = {s: False for s in range(self.n_stuff)}
        table.update({self.n_stuff + k: True for k in range(self.n_thing)})
        return table


@dataclass
class ToyScene:
    features: FeatureMap
    scores: ScoreMap
    regions: RegionSet
    proposal_labels: np.ndarray  # thing class index per proposal
    stuff_gt: np.ndarray  # H x W stuff class under every pixel
    thing_masks: list[np.ndarray]
    thing_classes: list[int]
    gt: PanopticMap


def embeddings_for(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed class embedding matrices (channels x classes) shared by all scenes."""
    rng = np.random.default_rng(cfg.embed_seed)
    return (
        rng.standard_normal((cfg.channels, cfg.n_stuff)),
        rng.standard_normal((cfg.channels, cfg.n_thing)),
    )


def _bands(rng, cfg: GenConfig) -> list[tuple[int, int, int]]:
    max_bands = min(cfg.n_stuff, cfg.height // cfg.min_band)
    n = int(rng.integers(1, max_bands + 1)) if max_bands > 1 else 1
    slack = cfg.height - n * cfg.min_band
    extra = rng.multinomial(slack, np.ones(n) / n) if n else []
    classes = rng.choice(cfg.n_stuff, size=n, replace=False)
    out, r = [], 0
    for k in range(n):
        h = cfg.min_band + int(extra[k])
        out.append((r, r + h, int(classes[k])))
        r += h
    return out


def _shape_mask(rng, cfg: GenConfig, r0: int, r1: int) -> np.ndarray:
    mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    if rng.random() < 0.5:
        h = int(rng.integers(2, min(3, r1 - r0) + 1))
        w = int(rng.integers(2, 5))
        top = int(rng.integers(r0, r1 - h + 1))
        left = int(rng.integers(0, cfg.width - w + 1))
        mask[top : top + h, left : left + w] = True
    else:
        radius = 1.5 if r1 - r0 < 5 else float(rng.choice([1.5, 2.0]))
        k = int(np.floor(radius))
        cr = int(rng.integers(r0 + k, r1 - k))
        cc = int(rng.integers(k, cfg.width - k))
        yy, xx = np.mgrid[: cfg.height, : cfg.width]
        mask = (yy - cr) ** 2 + (xx - cc) ** 2 <= radius**2
    return mask


def _shift(mask: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    src = mask[max(0, -dr) : h - max(0, dr), max(0, -dc) : w - max(0, dc)]
    out[max(0, dr) : max(0, dr) + src.shape[0], max(0, dc) : max(0, dc) + src.shape[1]] = src
    return out


def generate_scene(cfg: GenConfig, seed: int) -> ToyScene:
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    E_st, E_th = embeddings_for(cfg)

    bands = _bands(rng, cfg)
    stuff = np.zeros((H, W), dtype=np.int64)
    for r0, r1, c in bands:
        stuff[r0:r1] = c

    thing_masks: list[np.ndarray] = []
    thing_classes: list[int] = []
    occupied = np.zeros((H, W), dtype=bool)
    hosts = [b for b in bands if b[2] in cfg.rules]
    for _ in range(int(rng.integers(0, cfg.max_things + 1)) if hosts else 0):
        r0, r1, s = hosts[int(rng.integers(len(hosts)))]
        candidates = [k for k, rs in enumerate(cfg.rules) if rs == s]
        k = int(candidates[int(rng.integers(len(candidates)))])
        for _attempt in range(10):
            m = _shape_mask(rng, cfg, r0, r1)
            if not (m & occupied).any():
                thing_masks.append(m)
                thing_classes.append(k)
                occupied |= m
                break

    thing_map = np.full((H, W), -1, dtype=np.int64)
    for m, k in zip(thing_masks, thing_classes):
        thing_map[m] = k

    F = E_st[:, stuff]  # N x H x W
    F = F + cfg.thing_gain * np.where(thing_map >= 0, E_th[:, np.maximum(thing_map, 0)], 0.0)
    F = F + cfg.noise * rng.standard_normal(F.shape)

    onehot = (stuff[None] == np.arange(cfg.n_stuff)[:, None, None]).astype(np.float64)
    blurred = np.stack([uniform_filter(ch, size=3, mode="nearest") for ch in onehot])
    S = cfg.score_gain * blurred + cfg.score_noise * rng.standard_normal(blurred.shape)

    proposals: list[Proposal] = []
    labels: list[int] = []
    for m, k in zip(thing_masks, thing_classes):
        masks = [(m, rng.uniform(0.8, 1.0))]
        for _ in range(cfg.duplicates):
            dr, dc = 0, 0
            while dr == 0 and dc == 0:
                dr, dc = (int(v) for v in rng.integers(-1, 2, size=2))
            dup = _shift(m, dr, dc)
            if dup.any():
                masks.append((dup, rng.uniform(0.3, 0.6)))
        for pm, objectness in masks:
            feat = F[:, pm].mean(axis=1) + cfg.proposal_noise * rng.standard_normal(cfg.channels)
            proposals.append(Proposal(feat, float(objectness), class_id=k, mask=pm))
            labels.append(k)
    order = rng.permutation(len(proposals))
    proposals = [proposals[i] for i in order]
    labels = [labels[i] for i in order]

    ids = np.zeros((H, W), dtype=np.uint32)
    segments = []
    for m, k in zip(thing_masks, thing_classes):
        sid = len(segments) + 1
        ids[m] = sid
        segments.append(Segment(sid, cfg.n_stuff + k, True, int(m.sum())))
    for c in sorted(set(stuff[~occupied].tolist())):
        region = (stuff == c) & ~occupied
        sid = len(segments) + 1
        ids[region] = sid
        segments.append(Segment(sid, int(c), False, int(region.sum())))

    return ToyScene(
        features=FeatureMap(F),
        scores=ScoreMap(S),
        regions=RegionSet(proposals),
        proposal_labels=np.asarray(labels, dtype=np.int64),
        stuff_gt=stuff,
        thing_masks=thing_masks,
        thing_classes=thing_classes,
        gt=PanopticMap(ids, segments),
    )


def toy_class_embeddings(cfg: GenConfig, dim: int = 8, seed: int = 7) -> dict:
    """Stand-in word embeddings: each thing class sits near the stuff class it co-occurs with."""
    rng = np.random.default_rng(seed)
    stuff = rng.standard_normal((cfg.n_stuff, dim))
    things = np.stack([stuff[r] + 0.5 * rng.standard_normal(dim) for r in cfg.rules])
    return {"things": things.tolist(), "stuff": stuff.tolist()}


# ---------------------------------------------------------------- optimisation


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: Optional[tuple[int, int]] = None  # None: 8/12 and 11/12 of the run
    iterations: int = 200
    batch_size: int = 8
    train_scenes: int = 32
    seed: int = 0
    mode: str = "bidirectional"
    T: int = 2
    N: int = 16
    D0: int = 16
    D1: int = 16
    D2: int = 16
    heads: int = 3
    slope: float = 0.2
    loss_weight_thing: float = 1.0
    loss_weight_stuff: float = 1.0
    eval_every: int = 50
    eval_scenes: int = 4
    gen: GenConfig = field(default_factory=GenConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    embeddings: Optional[dict] = None

    def __post_init__(self):
        if isinstance(self.gen, dict):
            self.gen = GenConfig(**self.gen)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        if self.schedule is not None:
            self.schedule = tuple(int(s) for s in self.schedule)
            if len(self.schedule) != 2:
                raise ConfigError("schedule needs exactly two lr drop iterations")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be non-negative (momentum < 1)")
        if self.iterations < 1 or self.batch_size < 1 or self.train_scenes < 1:
            raise ConfigError("iterations, batch_size and train_scenes must be positive")
        if self.gen.channels != self.N:
            self.gen = replace(self.gen, channels=self.N)
        self.model_config()  # validates mode and dims

    @property
    def drops(self) -> tuple[int, int]:
        if self.schedule is not None:
            return self.schedule
        return round(self.iterations * 8 / 12), round(self.iterations * 11 / 12)

    def lr_at(self, it: int) -> float:
        return self.lr / 10 ** sum(it >= d for d in self.drops)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            N=self.N,
            D0=self.D0,
            D1=self.D1,
            D2=self.D2,
            T=self.T,
            heads=self.heads,
            n_thing_classes=self.gen.n_thing,
            n_stuff_classes=self.gen.n_stuff,
            mode=self.mode,
            slope=self.slope,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["schedule"] = list(self.schedule) if self.schedule is not None else None
        d["gen"]["rules"] = list(self.gen.rules)
        return d


def sgd_step(
    params: dict[str, Mat],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[dict[str, Mat], dict[str, np.ndarray]]:
    """v <- mu v + (g + wd theta); theta <- theta - lr v. Missing grads count as zero."""
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"sgd_step[{name}]", tuple(int(i) for i in np.argwhere(~np.isfinite(g))[0]))
        v = momentum * state.get(name, np.zeros(p.shape)) + (g + weight_decay * p.data)
        new_state[name] = v
        new_params[name] = Mat(p.data - lr * v, requires_grad=True)
    return new_params, new_state


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, checkpoint: Optional[Path]):
        self.iteration = iteration
        self.checkpoint = checkpoint
        super().__init__(f"loss became non-finite at iteration {iteration}; last good checkpoint: {checkpoint}")


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    checkpoint: Optional[Path] = None


def scene_seed(seed: int, index: int) -> int:
    return seed + index


def scene_loss(model: Model, scene: ToyScene, cfg: TrainConfig) -> tuple[Mat, Mat]:
    R, Fm, Sm = scene_mats(scene.features, scene.scores, scene.regions, cfg.N)
    emb = None
    if model.cfg.mode == "cosine":
        table = cfg.embeddings or toy_class_embeddings(cfg.gen)
        emb = node_embeddings(table, scene.regions, cfg.gen.n_stuff)
    out = forward_mats(model, R, Fm, Sm, emb)
    return losses(out, scene.proposal_labels, scene.stuff_gt.ravel())


def train(
    cfg: TrainConfig,
    out_dir=None,
    on_log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Momentum SGD on the summed thing / stuff cross-entropies.

    Iteration ``t`` uses training scenes ``(t*B + b) mod train_scenes``; scene
    ``i`` is generated from ``seed + i``. Writes ``checkpoint/`` and
    ``log.jsonl`` under ``out_dir`` when given.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    model = Model.init(cfg.model_config(), cfg.seed)
    pool = [generate_scene(cfg.gen, scene_seed(cfg.seed, i)) for i in range(cfg.train_scenes)]
    state: dict[str, np.ndarray] = {}
    log: list[dict] = []
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "log.jsonl", "w")
    last_good = model
    try:
        for it in range(cfg.iterations):
            lr = cfg.lr_at(it)
            batch = [pool[(it * cfg.batch_size + b) % cfg.train_scenes] for b in range(cfg.batch_size)]
            try:
                total = None
                lt_sum = ls_sum = 0.0
                for scene in batch:
                    lt, ls = scene_loss(model, scene, cfg)
                    lt_sum += float(lt.data[0, 0])
                    ls_sum += float(ls.data[0, 0])
                    c = combined_loss(lt, ls, cfg.loss_weight_thing, cfg.loss_weight_stuff)
                    total = c if total is None else total + c
                total = scale(total, 1.0 / len(batch))
                grads = backward(total)
                named_grads = {n: grads[p] for n, p in model.params.items() if p in grads}
                params, state = sgd_step(model.params, named_grads, state, lr, cfg.momentum, cfg.weight_decay)
            except NonFiniteError as e:
                ckpt = None
                if out_dir is not None:
                    ckpt = last_good.save(out_dir / "checkpoint", {"train": cfg.to_json(), "iteration": it})
                logger.error("training diverged at iteration %d: %s", it, e)
                raise TrainingDiverged(it, ckpt) from e
            entry = {
                "iter": it,
                "loss_thing": lt_sum / len(batch),
                "loss_stuff": ls_sum / len(batch),
                "lr": lr,
            }
            last_good = model
            model = model.with_params(params)
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                entry["pq"] = evaluate_toy(
                    model, cfg.eval_scenes, cfg.seed + 100_000, cfg.gen, cfg.fusion, cfg.embeddings
                ).PQ
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            if on_log is not None:
                on_log(entry)
    finally:
        if log_file is not None:
            log_file.close()

    ckpt = None
    if out_dir is not None:
        ckpt = model.save(out_dir / "checkpoint", {"train": cfg.to_json(), "iteration": cfg.iterations})
    return TrainResult(model, log, ckpt)


def combined(entry: dict, cfg: TrainConfig | None = None) -> float:
    wt, ws = (cfg.loss_weight_thing, cfg.loss_weight_stuff) if cfg else (1.0, 1.0)
    return wt * entry["loss_thing"] + ws * entry["loss_stuff"]


# ---------------------------------------------------------------- evaluation


def predict_scene(
    model: Model,
    scene: ToyScene,
    gen: GenConfig,
    fusion_cfg: FusionConfig | None = None,
    embeddings: Optional[dict] = None,
) -> PanopticMap:
    R, Fm, Sm = scene_mats(scene.features, scene.scores, scene.regions, model.cfg.N)
    emb = None
    if model.cfg.mode == "cosine":
        emb = node_embeddings(embeddings or toy_class_embeddings(gen), scene.regions, gen.n_stuff)
    out = forward_mats(model, R, Fm, Sm, emb)

    instances = []
    if R.rows:
        z = out.thing_logits.data
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        for prop, probs in zip(scene.regions.proposals, p):
            k = int(np.argmax(probs))
            instances.append(InstancePrediction(prop.mask, gen.n_stuff + k, float(prop.score * probs[k])))
    semantic = np.argmax(out.stuff_logits.data, axis=1).reshape(gen.height, gen.width)
    return fuse(instances, semantic, fusion_cfg)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BGR_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_scenes(
    predict: Callable[[ToyScene], PanopticMap],
    n_scenes: int,
    seed: int,
    gen: GenConfig,
) -> list[PQResult]:
    """Per-scene PQ stats, scene i generated from ``seed + i``."""
    table = gen.class_table()

    def one(i: int) -> PQResult:
        scene = generate_scene(gen, scene_seed(seed, i))
        return panoptic_quality(predict(scene), scene.gt, table)

    workers = _threads()
    if workers == 1:
        return [one(i) for i in range(n_scenes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n_scenes)))


def evaluate_toy(
    model: Model | str | Path,
    n_scenes: int,
    seed: int,
    gen: GenConfig | None = None,
    fusion_cfg: FusionConfig | None = None,
    embeddings: Optional[dict] = None,
) -> PQResult:
    """Run the whole pipeline on ``n_scenes`` fresh scenes and reduce their PQ counts."""
    if not isinstance(model, Model):
        model, manifest = Model.load(model)
        train_cfg = manifest.get("train", {})
        if gen is None and "gen" in train_cfg:
            gen = GenConfig(**train_cfg["gen"])
        if fusion_cfg is None and "fusion" in train_cfg:
            fusion_cfg = FusionConfig(**train_cfg["fusion"])
        if embeddings is None:
            embeddings = train_cfg.get("embeddings")
    gen = gen or GenConfig(channels=model.cfg.N)
    if gen.channels != model.cfg.N or gen.n_thing != model.cfg.n_thing_classes or gen.n_stuff != model.cfg.n_stuff_classes:
        raise ConfigError("scene generator config does not match the checkpoint's model dimensions")
    return accumulate(
        evaluate_scenes(lambda s: predict_scene(model, s, gen, fusion_cfg, embeddings), n_scenes, seed, gen)
    )
