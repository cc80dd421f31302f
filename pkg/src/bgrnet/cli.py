"""Command-line entry point: ``bgr <command> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import formats, gradsuite
from .fusion import FusionConfig, InstancePrediction, fuse, instances_from_json, instances_to_json, read_panoptic, write_panoptic
from .graphs import FeatureMap, ScoreMap, center_similarity_map, extract_class_centers
from .metrics import display_json, panoptic_quality
from .pipeline import ABLATION_MODES, PIPELINE_MODES
from .tensor import ConfigError, ShapeError
from .toytask import (
    GenConfig,
    TrainConfig,
    TrainingDiverged,
    combined,
    evaluate_toy,
    generate_scene,
    toy_class_embeddings,
    train,
)

logger = logging.getLogger("bgrnet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PATH_KEYS = ("checkpoint_dir", "out_dir", "embedding_file")
EVAL_KEYS = ("eval_n", "eval_seed")


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    checkpoint_dir: Optional[Path] = None
    out_dir: Optional[Path] = None
    embedding_file: Optional[Path] = None
    eval_n: int = 20
    eval_seed: int = 1000


def load_run_config(path: Optional[str], seed: Optional[int] = None, mode: Optional[str] = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config {p} is not valid JSON: {e}") from e
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(doc) - train_fields - set(PATH_KEYS) - set(EVAL_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for sub, cls in (("gen", GenConfig), ("fusion", FusionConfig)):
        extra = set(doc.get(sub, {})) - {f.name for f in dataclasses.fields(cls)}
        if extra:
            raise UsageError(f"unknown {sub} config keys: {sorted(extra)}")
    tdoc = {k: v for k, v in doc.items() if k in train_fields}
    if seed is not None:
        tdoc["seed"] = seed
    if mode is not None:
        tdoc["mode"] = mode
    paths = {k: Path(doc[k]) if doc.get(k) is not None else None for k in PATH_KEYS}
    if paths["embedding_file"] is not None:
        if not paths["embedding_file"].is_file():
            raise UsageError(f"embedding file not found: {paths['embedding_file']}")
        tdoc["embeddings"] = json.loads(paths["embedding_file"].read_text())
    if paths["checkpoint_dir"] is not None and not (paths["checkpoint_dir"] / "manifest.json").is_file():
        raise UsageError(f"no checkpoint manifest in {paths['checkpoint_dir']}")
    try:
        cfg = TrainConfig(**tdoc)
    except (TypeError, ConfigError) as e:
        raise UsageError(str(e)) from e
    return RunConfig(cfg, **paths, **{k: doc[k] for k in EVAL_KEYS if k in doc})


def _out_dir(args, rc: RunConfig) -> Path:
    out = Path(args.out) if args.out else rc.out_dir
    if out is None:
        raise UsageError("an output directory is required (--out or out_dir in the config)")
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_gradcheck(args) -> int:
    patterns = [] if args.all else list(args.patterns)
    if not args.all and not patterns:
        raise UsageError("give op name patterns or --all")
    checks = gradsuite.select(patterns, args.seed)
    if not checks:
        print("no ops matched")
        return EXIT_USAGE
    failed = 0
    print(f"{'op':28s} {'max_rel_err':>12s}  result")
    for name, check in checks.items():
        report = check()
        failed += not report.passed
        print(f"{name:28s} {report.max_rel_err:12.3e}  {'ok' if report.passed else 'FAIL'}")
    print(f"{len(checks) - failed}/{len(checks)} passed (eps={gradsuite.EPS}, tol={gradsuite.TOL})")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.seed, args.mode)
    out = _out_dir(args, rc)
    cfg = rc.train
    _write_json_dir(out, "config.json", cfg.to_json())
    try:
        result = train(cfg, out)
    except TrainingDiverged as e:
        logger.error("%s", e)
        return EXIT_FAIL
    first, last = combined(result.log[0], cfg), combined(result.log[-1], cfg)
    print(f"trained {cfg.iterations} iterations in mode {cfg.mode}: loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _write_json_dir(out: Path, name: str, doc) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / name, doc)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise UsageError(f"no checkpoint manifest in {ckpt}")
    result = evaluate_toy(ckpt, args.n, args.seed)
    doc = result.to_json()
    doc["seed"] = args.seed
    doc["n_scenes"] = args.n
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps({**display_json(result), "seed": args.seed, "n_scenes": args.n}, indent=2, sort_keys=True))
    return EXIT_OK


def run_ablation(rc: RunConfig, modes: Sequence[str] = ABLATION_MODES, out: Optional[Path] = None) -> list[dict]:
    rows = []
    for mode in modes:
        cfg = dataclasses.replace(rc.train, mode=mode)
        result = train(cfg, out / mode if out else None)
        pq = evaluate_toy(result.model, rc.eval_n, rc.eval_seed, cfg.gen, cfg.fusion, cfg.embeddings)
        rows.append(
            {
                "mode": mode,
                "seed": cfg.seed,
                "eval_seed": rc.eval_seed,
                "PQ": pq.PQ,
                "PQ_th": pq.PQ_th,
                "PQ_st": pq.PQ_st,
                "final_loss": combined(result.log[-1], cfg),
            }
        )
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'mode':16s} {'seed':>5s} {'PQ':>7s} {'PQ_th':>7s} {'PQ_st':>7s} {'loss':>8s}"]
    for r in rows:
        lines.append(
            f"{r['mode']:16s} {r['seed']:5d} {100 * r['PQ']:7.2f} {100 * r['PQ_th']:7.2f} "
            f"{100 * r['PQ_st']:7.2f} {r['final_loss']:8.4f}"
        )
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config, args.seed)
    out = _out_dir(args, rc)
    rows = run_ablation(rc, ABLATION_MODES, out)
    _write_json_dir(out, "ablation.json", rows)
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_fuse(args) -> int:
    instances, (h, w) = instances_from_json(json.loads(Path(args.instances).read_text()))
    semantic = formats.read_bgrm(args.semantic)
    if semantic.shape != (h, w):
        raise UsageError(f"semantic raster is {semantic.shape}, instances declare {(h, w)}")
    cfg = FusionConfig()
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        extra = set(doc) - {f.name for f in dataclasses.fields(FusionConfig)}
        if extra:
            raise UsageError(f"unknown fusion config keys: {sorted(extra)}")
        cfg = FusionConfig(**doc)
    pmap = fuse(instances, np.rint(semantic).astype(np.int64), cfg)
    write_panoptic(args.out, pmap)
    print(f"{len(pmap.segments)} segments written to {args.out}")
    return EXIT_OK


def _class_table(path: Optional[str], *maps) -> dict[int, bool]:
    if path:
        return {int(k): bool(v) for k, v in json.loads(Path(path).read_text()).items()}
    table: dict[int, bool] = {}
    for m in maps:
        for s in m.segments:
            if table.setdefault(s.class_id, s.is_thing) != s.is_thing:
                raise UsageError(f"class {s.class_id} is both thing and stuff; pass --classes")
    return table


def cmd_pq(args) -> int:
    pred, gt = read_panoptic(args.pred), read_panoptic(args.gt)
    result = panoptic_quality(pred, gt, _class_table(args.classes, pred, gt))
    if args.out:
        _write_json(Path(args.out), result.to_json())
    print(json.dumps(display_json(result), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_centers(args) -> int:
    F = FeatureMap(formats.read_chw(args.features))
    S = ScoreMap(formats.read_chw(args.scores))
    if F.hw != S.hw:
        raise UsageError(f"feature map {F.hw} and score map {S.hw} differ spatially")
    if not 0 <= args.cls < S.classes:
        raise UsageError(f"class {args.cls} outside [0, {S.classes})")
    centers = extract_class_centers(F, S)
    sim = center_similarity_map(F, centers, args.cls)
    formats.write_bgrm(args.out, sim)
    print(f"similarity raster {sim.shape[0]}x{sim.shape[1]} for class {args.cls} written to {args.out}")
    return EXIT_OK


def cmd_scene(args) -> int:
    rc = load_run_config(args.config)
    gen = rc.train.gen
    if args.noise is not None:
        gen = dataclasses.replace(gen, noise=args.noise, score_noise=args.noise, proposal_noise=args.noise)
    scene = generate_scene(gen, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_chw(out / "features.bgrm", scene.features.values)
    formats.write_chw(out / "scores.bgrm", scene.scores.values)
    formats.write_bgrm(out / "semantic.bgrm", np.argmax(scene.scores.values, axis=0).astype(np.float64))
    formats.write_bgrm(out / "stuff_gt.bgrm", scene.stuff_gt.astype(np.float64))
    write_panoptic(out / "gt.bgrp", scene.gt)
    instances = [
        {"mask": p.mask, "class_id": gen.n_stuff + int(k), "score": p.score}
        for p, k in zip(scene.regions.proposals, scene.proposal_labels)
    ]
    preds = [InstancePrediction(**d) for d in instances]
    _write_json(out / "instances.json", instances_to_json(preds, gen.height, gen.width))
    _write_json(out / "classes.json", {str(k): v for k, v in gen.class_table().items()})
    print(f"scene {args.seed} written to {out}")
    return EXIT_OK


def cmd_embeddings(args) -> int:
    rc = load_run_config(args.config)
    _write_json(Path(args.out), toy_class_embeddings(rc.train.gen))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bgr", description="Bidirectional graph reasoning toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("patterns", nargs="*", help="glob patterns over op names")
    p.add_argument("--all", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic toy task")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=PIPELINE_MODES)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="panoptic quality of a checkpoint on fresh toy scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--out", help="write the full-precision JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every reasoning mode with identical seeds")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fuse", help="merge instances and a semantic raster into a panoptic map")
    p.add_argument("--instances", required=True)
    p.add_argument("--semantic", required=True, help="H x W BGRM of stuff class ids (negative = void)")
    p.add_argument("--config", help="JSON fusion config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("pq", help="panoptic quality between two BGRP maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", help="JSON {class_id: is_thing}; inferred from the maps if omitted")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pq)

    p = sub.add_parser("centers", help="cosine similarity of pixels to one extracted class center")
    p.add_argument("--features", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_centers)

    p = sub.add_parser("scene", help="write one synthetic scene as BGRM/BGRP/JSON files")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, help="override every noise level")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("embeddings", help="write the toy class-embedding file used by cosine mode")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embeddings)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError, formats.FormatError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
