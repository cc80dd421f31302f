"""Greedy, score-ordered merge of instance masks and a semantic raster."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import formats


@dataclass
class InstancePrediction:
    mask: np.ndarray
    class_id: int
    score: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or not self.mask.any():
            raise ValueError("instance mask must be a non-empty 2-D raster")


@dataclass
class Segment:
    id: int
    class_id: int
    is_thing: bool
    area: int


@dataclass
class PanopticMap:
    ids: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def segment(self, seg_id: int) -> Segment:
        for s in self.segments:
            if s.id == seg_id:
                return s
        raise KeyError(seg_id)

    def validate(self) -> None:
        """Raise if the raster and segment table disagree."""
        table = {s.id: s for s in self.segments}
        if len(table) != len(self.segments):
            raise ValueError("duplicate segment ids in table")
        if sorted(table) != list(range(1, len(table) + 1)):
            raise ValueError(f"segment ids must be dense from 1, got {sorted(table)}")
        present, counts = np.unique(self.ids, return_counts=True)
        areas = dict(zip(present.tolist(), counts.tolist()))
        areas.pop(0, None)
        if set(areas) != set(table):
            raise ValueError(f"raster ids {sorted(areas)} != table ids {sorted(table)}")
        for sid, seg in table.items():
            if seg.area != areas[sid]:
                raise ValueError(f"segment {sid}: table area {seg.area} != raster area {areas[sid]}")

    def table_json(self) -> list[dict]:
        return [
            {"id": int(s.id), "class_id": int(s.class_id), "is_thing": bool(s.is_thing), "area": int(s.area)}
            for s in self.segments
        ]


@dataclass
class FusionConfig:
    score_thresh: float = 0.5
    keep_frac: float = 0.5
    min_stuff_area: Optional[float] = None  # None: 4096, or 1% of the image below 4096 pixels

    def stuff_area_floor(self, height: int, width: int) -> float:
        if self.min_stuff_area is not None:
            return self.min_stuff_area
        return 0.01 * height * width if height * width < 4096 else 4096.0


def instance_order(instances: Sequence[InstancePrediction]) -> list[int]:
    """Indices by descending score; exact ties fall back to mask content, then class."""
    return sorted(
        range(len(instances)),
        key=lambda i: (-instances[i].score, np.packbits(instances[i].mask).tobytes(), instances[i].class_id),
    )


def fuse(
    instances: Sequence[InstancePrediction],
    semantic: np.ndarray,
    cfg: FusionConfig | None = None,
    thing_classes: Iterable[int] = (),
) -> PanopticMap:
    """Combine instances and a per-pixel stuff raster into one panoptic map.

    ``semantic`` holds stuff class ids; negative values and any id in
    ``thing_classes`` count as void. Stuff forms one segment per class.
    """
    cfg = cfg or FusionConfig()
    semantic = np.asarray(semantic)
    if semantic.ndim != 2:
        raise ValueError(f"semantic raster must be 2-D, got shape {semantic.shape}")
    h, w = semantic.shape
    for i, inst in enumerate(instances):
        if inst.mask.shape != (h, w):
            raise ValueError(f"instance {i} mask {inst.mask.shape} != semantic raster {(h, w)}")

    ids = np.zeros((h, w), dtype=np.uint32)
    claimed = np.zeros((h, w), dtype=bool)
    segments: list[Segment] = []
    for i in instance_order(instances):
        inst = instances[i]
        if inst.score < cfg.score_thresh:
            continue
        fresh = inst.mask & ~claimed
        n_fresh = int(fresh.sum())
        if n_fresh == 0 or n_fresh / int(inst.mask.sum()) < cfg.keep_frac:
            continue
        sid = len(segments) + 1
        ids[fresh] = sid
        claimed |= fresh
        segments.append(Segment(sid, int(inst.class_id), True, n_fresh))

    floor = cfg.stuff_area_floor(h, w)
    things = set(int(c) for c in thing_classes)
    for cls in np.unique(semantic[~claimed]).tolist() if (~claimed).any() else []:
        if cls < 0 or cls in things:
            continue
        region = (semantic == cls) & ~claimed
        area = int(region.sum())
        if area < floor:
            continue
        sid = len(segments) + 1
        ids[region] = sid
        segments.append(Segment(sid, int(cls), False, area))
    return PanopticMap(ids, segments)


def write_panoptic(path, pmap: PanopticMap) -> None:
    path = Path(path)
    path.write_bytes(formats.encode_bgrp(pmap.ids))
    formats.sidecar_path(path).write_text(json.dumps(pmap.table_json(), indent=1))


def read_panoptic(path) -> PanopticMap:
    path = Path(path)
    ids = formats.decode_bgrp(path.read_bytes())
    try:
        table = json.loads(formats.sidecar_path(path).read_text())
    except FileNotFoundError as e:
        raise formats.FormatError(f"missing segment table {formats.sidecar_path(path)}") from e
    segs = [Segment(int(s["id"]), int(s["class_id"]), bool(s["is_thing"]), int(s["area"])) for s in table]
    pmap = PanopticMap(ids, segs)
    pmap.validate()
    return pmap


def instances_to_json(instances: Sequence[InstancePrediction], height: int, width: int) -> dict:
    return {
        "height": height,
        "width": width,
        "instances": [
            {"class_id": int(p.class_id), "score": float(p.score), "indices": np.flatnonzero(p.mask).tolist()}
            for p in instances
        ],
    }


def instances_from_json(doc: dict) -> tuple[list[InstancePrediction], tuple[int, int]]:
    h, w = int(doc["height"]), int(doc["width"])
    out = []
    for p in doc["instances"]:
        mask = np.zeros(h * w, dtype=bool)
        mask[np.asarray(p["indices"], dtype=np.int64)] = True
        out.append(InstancePrediction(mask.reshape(h, w), int(p["class_id"]), float(p["score"])))
    return out, (h, w)

