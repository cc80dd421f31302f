import json

import numpy as np
import pytest

from bgrnet import cli, formats
from bgrnet import tensor as T
from bgrnet.fusion import read_panoptic
from bgrnet.pipeline import ABLATION_MODES
from bgrnet.toytask import TrainConfig, combined, evaluate_toy, train

TINY = {
    "iterations": 6,
    "batch_size": 4,
    "train_scenes": 8,
    "N": 8,
    "D0": 4,
    "D1": 4,
    "D2": 4,
    "eval_every": 0,
    "eval_n": 4,
    "gen": {"channels": 8},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "matmul", "softmax_*"]) == 0
    out = capsys.readouterr().out
    assert "softmax_masked" in out and "4/4 passed" in out
    assert cli.main(["gradcheck", "nothing_like_this"]) == 2
    assert cli.main(["gradcheck"]) == 2


def test_gradcheck_detects_corrupted_kernel(monkeypatch, capsys):
    real = T.matmul

    def corrupt(a, b):
        out = real(a, b)
        bw = out._backward
        out._backward = lambda g: tuple(x * 1.01 for x in bw(g))
        return out

    monkeypatch.setattr(T, "matmul", corrupt)
    assert cli.main(["gradcheck", "matmul"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_usage_errors(tmp_path, config):
    assert cli.main([]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"gen": {"colour": 1}}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--config", str(config)]) == 2  # no output dir
    assert cli.main(["eval", "--checkpoint", str(tmp_path)]) == 2


def test_train_then_eval_deterministic(tmp_path, config, capsys):
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path / "run")]) == 0
    ck = tmp_path / "run" / "checkpoint"
    assert (ck / "manifest.json").is_file()
    assert cli.main(["eval", "--checkpoint", str(ck), "--n", "3", "--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(["eval", "--checkpoint", str(ck), "--n", "3", "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    doc = json.loads((tmp_path / "a.json").read_text())
    assert {"PQ", "PQ_th", "PQ_st", "SQ", "RQ", "per_class", "seed"} <= set(doc)


def test_scene_fuse_pq_roundtrip(tmp_path, config, capsys):
    d = tmp_path / "scene"
    assert cli.main(["scene", "--config", str(config), "--seed", "4", "--out", str(d)]) == 0
    assert cli.main(["pq", "--pred", str(d / "gt.bgrp"), "--gt", str(d / "gt.bgrp")]) == 0
    assert json.loads(capsys.readouterr().out.split("\n", 1)[1])["PQ"] == 1.0
    assert cli.main(
        ["fuse", "--instances", str(d / "instances.json"), "--semantic", str(d / "semantic.bgrm"), "--out", str(tmp_path / "p.bgrp")]
    ) == 0
    read_panoptic(tmp_path / "p.bgrp").validate()
    assert cli.main(
        ["pq", "--pred", str(tmp_path / "p.bgrp"), "--gt", str(d / "gt.bgrp"), "--classes", str(d / "classes.json"), "--out", str(tmp_path / "pq.json")]
    ) == 0
    assert 0.0 <= json.loads((tmp_path / "pq.json").read_text())["PQ"] <= 1.0


def test_fuse_empty_instances_is_stuff_only(tmp_path):
    (tmp_path / "inst.json").write_text(json.dumps({"height": 4, "width": 4, "instances": []}))
    sem = np.zeros((4, 4))
    sem[2:] = 1
    formats.write_bgrm(tmp_path / "sem.bgrm", sem)
    assert cli.main(["fuse", "--instances", str(tmp_path / "inst.json"), "--semantic", str(tmp_path / "sem.bgrm"), "--out", str(tmp_path / "p.bgrp")]) == 0
    pm = read_panoptic(tmp_path / "p.bgrp")
    assert [(s.class_id, s.is_thing, s.area) for s in pm.segments] == [(0, False, 8), (1, False, 8)]


def test_fuse_shape_mismatch(tmp_path):
    (tmp_path / "inst.json").write_text(json.dumps({"height": 3, "width": 4, "instances": []}))
    formats.write_bgrm(tmp_path / "sem.bgrm", np.zeros((4, 4)))
    assert cli.main(["fuse", "--instances", str(tmp_path / "inst.json"), "--semantic", str(tmp_path / "sem.bgrm"), "--out", str(tmp_path / "p.bgrp")]) == 2


def test_centers_noiseless(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gen": {"noise": 0.0, "score_noise": 0.0, "proposal_noise": 0.0, "max_things": 0}}))
    d = tmp_path / "s"
    assert cli.main(["scene", "--config", str(cfg), "--seed", "1", "--out", str(d)]) == 0
    stuff = formats.read_bgrm(d / "stuff_gt.bgrm").astype(int)
    present = np.unique(stuff)
    sims = []
    for c in present:
        out = tmp_path / f"sim{c}.bgrm"
        args = ["centers", "--features", str(d / "features.bgrm"), "--scores", str(d / "scores.bgrm")]
        assert cli.main(args + ["--class", str(c), "--out", str(out)]) == 0
        sims.append(formats.read_bgrm(out))
    # every pixel is most similar to the center of its own class
    nearest = present[np.argmax(np.stack(sims), axis=0)]
    assert (nearest == stuff).mean() >= 0.99
    args = ["centers", "--features", str(d / "features.bgrm"), "--scores", str(d / "scores.bgrm")]
    assert cli.main(args + ["--class", "99", "--out", str(tmp_path / "x.bgrm")]) == 2


def test_ablate_table_and_disconnected_row(tmp_path, config, capsys):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(config), "--out", str(out)]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["mode"] for r in rows] == list(ABLATION_MODES)
    assert len((out / "ablation.txt").read_text().strip().splitlines()) == 8
    rc = cli.load_run_config(str(config))
    cfg = TrainConfig(**{**rc.train.__dict__, "mode": "disconnected"})
    res = train(cfg)
    pq = evaluate_toy(res.model, rc.eval_n, rc.eval_seed, cfg.gen, cfg.fusion)
    row = rows[ABLATION_MODES.index("disconnected")]
    assert row["PQ"] == pq.PQ and row["final_loss"] == combined(res.log[-1], cfg)


def test_embeddings_command(tmp_path):
    assert cli.main(["embeddings", "--out", str(tmp_path / "e.json")]) == 0
    doc = json.loads((tmp_path / "e.json").read_text())
    assert len(doc["things"]) == 3 and len(doc["stuff"]) == 4


def test_gradcheck_all(capsys):
    assert cli.main(["gradcheck", "--all"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.endswith(" ok")]
    assert len(lines) >= 26 and all(float(l.split()[1]) <= 1e-4 for l in lines)
