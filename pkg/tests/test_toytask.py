import dataclasses
import json

import numpy as np
import pytest

from bgrnet import toytask
from bgrnet.fusion import FusionConfig
from bgrnet.metrics import accumulate
from bgrnet.tensor import ConfigError, Mat, NonFiniteError
from bgrnet.toytask import (
    GenConfig,
    TrainConfig,
    TrainingDiverged,
    combined,
    evaluate_scenes,
    evaluate_toy,
    generate_scene,
    sgd_step,
    train,
)

from oracles import pq_bruteforce

GEN = GenConfig(channels=8)


def tiny(**kw):
    base = dict(iterations=12, batch_size=4, train_scenes=8, N=8, D0=4, D1=4, D2=4, eval_every=0, gen=GEN)
    base.update(kw)
    return TrainConfig(**base)


class TestScenes:
    def test_deterministic(self):
        a, b = generate_scene(GenConfig(), 5), generate_scene(GenConfig(), 5)
        assert np.array_equal(a.features.values, b.features.values)
        assert np.array_equal(a.scores.values, b.scores.values)
        assert np.array_equal(a.gt.ids, b.gt.ids)
        assert not np.array_equal(a.features.values, generate_scene(GenConfig(), 6).features.values)

    def test_cooccurrence_rule_100_scenes(self):
        cfg = GenConfig()
        seen = 0
        for seed in range(100):
            s = generate_scene(cfg, seed)
            s.gt.validate()
            for m, k in zip(s.thing_masks, s.thing_classes):
                assert set(np.unique(s.stuff_gt[m]).tolist()) == {cfg.rules[k]}
                seen += 1
            assert len(s.regions) == len(s.proposal_labels)
            for p, k in zip(s.regions.proposals, s.proposal_labels):
                assert p.class_id == k and p.mask.any() and 0 <= p.score <= 1
        assert seen > 50

    def test_gt_ids_layout(self):
        s = generate_scene(GenConfig(), 3)
        table = GenConfig().class_table()
        for seg in s.gt.segments:
            assert table[seg.class_id] == seg.is_thing
        assert (s.gt.ids > 0).all()  # no void in synthetic ground truth

    def test_noiseless_linear_probe(self):
        cfg = GenConfig(noise=0.0, score_noise=0.0, proposal_noise=0.0)
        X, y = [], []
        for seed in range(20):
            s = generate_scene(cfg, seed)
            X.append(s.features.values.reshape(cfg.channels, -1).T)
            y.append(s.stuff_gt.ravel())
        X, y = np.vstack(X), np.concatenate(y)
        W, *_ = np.linalg.lstsq(np.hstack([X, np.ones((len(X), 1))]), np.eye(cfg.n_stuff)[y], rcond=None)
        s = generate_scene(cfg, 999)
        Xt = s.features.values.reshape(cfg.channels, -1).T
        pred = np.argmax(np.hstack([Xt, np.ones((len(Xt), 1))]) @ W, axis=1)
        assert (pred == s.stuff_gt.ravel()).mean() >= 0.99

    def test_bad_rules(self):
        with pytest.raises(ConfigError):
            GenConfig(rules=(0, 1, 9))


class TestSGD:
    def test_worked_example(self):
        p = {"w": Mat([[1.0, -2.0]])}
        g = {"w": np.array([[0.5, 0.5]])}
        p1, s1 = sgd_step(p, g, {}, lr=0.1, momentum=0.9, weight_decay=0.1)
        # v = g + 0.1 w = [0.6, 0.3]; w' = w - 0.1 v
        np.testing.assert_allclose(s1["w"], [[0.6, 0.3]], atol=1e-15)
        np.testing.assert_allclose(p1["w"].data, [[0.94, -2.03]], atol=1e-15)
        p2, s2 = sgd_step(p1, g, s1, lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(s2["w"], [[0.9 * 0.6 + 0.5, 0.9 * 0.3 + 0.5]], atol=1e-15)

    def test_lr_zero_is_identity(self):
        p = {"w": Mat(np.random.default_rng(0).standard_normal((3, 3)))}
        p1, _ = sgd_step(p, {"w": np.ones((3, 3))}, {}, 0.0, 0.9, 5e-4)
        assert np.array_equal(p1["w"].data, p["w"].data)

    def test_weight_decay_shrinks_norm(self):
        p = {"w": Mat(np.random.default_rng(0).standard_normal((3, 3)))}
        state = {}
        norms = [np.linalg.norm(p["w"].data)]
        for _ in range(5):
            p, state = sgd_step(p, {}, state, 0.1, 0.9, 0.1)
            norms.append(np.linalg.norm(p["w"].data))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_non_finite_gradient(self):
        with pytest.raises(NonFiniteError, match="w"):
            sgd_step({"w": Mat([[1.0]])}, {"w": np.array([[np.inf]])}, {}, 0.1, 0.9, 0.0)


class TestSchedule:
    def test_default_drops(self):
        cfg = TrainConfig(iterations=12)
        assert cfg.drops == (8, 11)
        assert [cfg.lr_at(i) for i in (0, 7, 8, 10, 11)] == pytest.approx([0.02, 0.02, 0.002, 0.002, 0.0002])

    def test_explicit(self):
        assert TrainConfig(schedule=[5, 6]).drops == (5, 6)
        with pytest.raises(ConfigError):
            TrainConfig(schedule=[1, 2, 3])


class TestTrain:
    def test_lr_zero_constant_loss(self):
        cfg = tiny(lr=0.0, train_scenes=4, batch_size=4, iterations=4)
        log = train(cfg).log
        assert len({combined(e) for e in log}) == 1

    def test_deterministic_checkpoint(self, tmp_path):
        cfg = tiny()
        a = train(cfg, tmp_path / "a")
        b = train(cfg, tmp_path / "b")
        assert a.log == b.log
        for f in sorted((tmp_path / "a" / "checkpoint").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "checkpoint" / f.name).read_bytes()
        assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()

    def test_loss_decreases(self):
        log = train(tiny(iterations=30)).log
        assert combined(log[-1]) < combined(log[0])

    def test_log_fields(self, tmp_path):
        cfg = tiny(eval_every=6, eval_scenes=2)
        train(cfg, tmp_path)
        lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert len(lines) == cfg.iterations
        assert set(lines[0]) == {"iter", "loss_thing", "loss_stuff", "lr"}
        assert "pq" in lines[5] and 0.0 <= lines[5]["pq"] <= 1.0

    def test_divergence_saves_last_good(self, tmp_path, monkeypatch):
        real = toytask.backward
        calls = {"n": 0}

        def flaky(out, seed=None):
            calls["n"] += 1
            grads = real(out, seed)
            if calls["n"] == 3:
                grads = {k: np.full_like(v, np.nan) for k, v in grads.items()}
            return grads

        monkeypatch.setattr(toytask, "backward", flaky)
        with pytest.raises(TrainingDiverged) as info:
            train(tiny(), tmp_path)
        assert info.value.iteration == 2
        manifest = json.loads((tmp_path / "checkpoint" / "manifest.json").read_text())
        assert manifest["iteration"] == 2

    @pytest.mark.parametrize("mode", ["cosine", "baseline", "stuff-to-thing"])
    def test_other_modes_train(self, mode):
        log = train(tiny(mode=mode, iterations=3)).log
        assert all(np.isfinite(combined(e)) for e in log)


class TestEvaluation:
    def test_ground_truth_scores_one(self):
        gen = GenConfig()
        r = accumulate(evaluate_scenes(lambda s: s.gt, 10, 0, gen))
        assert r.PQ == 1.0 and r.PQ_th == 1.0 and r.PQ_st == 1.0

    def test_reduction_matches_bruteforce_sum(self):
        gen = GenConfig(channels=8)
        model = train(tiny(iterations=4)).model
        table = gen.class_table()
        totals = {c: {"tp": 0, "fp": 0, "fn": 0, "iou_sum": 0.0} for c in table}
        for i in range(20):
            s = generate_scene(gen, 500 + i)
            pred = toytask.predict_scene(model, s, gen)
            ref = pq_bruteforce(
                pred.ids, {x.id: x.class_id for x in pred.segments}, s.gt.ids, {x.id: x.class_id for x in s.gt.segments}, table
            )
            for c in table:
                for k in ("tp", "fp", "fn", "iou_sum"):
                    totals[c][k] += ref[c][k]
        r = evaluate_toy(model, 20, 500, gen)
        for c in table:
            st = r.per_class[c]
            assert (st.tp, st.fp, st.fn) == (totals[c]["tp"], totals[c]["fp"], totals[c]["fn"])
            assert abs(st.iou_sum - totals[c]["iou_sum"]) <= 1e-12

    def test_threads_do_not_change_result(self, monkeypatch):
        model = train(tiny(iterations=2)).model
        a = evaluate_toy(model, 6, 10, GEN).to_json()
        monkeypatch.setenv("BGR_THREADS", "3")
        assert evaluate_toy(model, 6, 10, GEN).to_json() == a

    def test_checkpoint_eval_uses_stored_config(self, tmp_path):
        cfg = tiny(iterations=2, fusion=FusionConfig(score_thresh=0.3))
        res = train(cfg, tmp_path)
        direct = evaluate_toy(res.model, 5, 1, cfg.gen, cfg.fusion)
        loaded = evaluate_toy(res.checkpoint, 5, 1)
        assert direct.to_json() == loaded.to_json()

    def test_generator_mismatch(self):
        model = train(tiny(iterations=1)).model
        with pytest.raises(ConfigError):
            evaluate_toy(model, 1, 0, dataclasses.replace(GEN, channels=5))


def test_sgd_quadratic_recurrence():
    # f(w) = 0.5 * a * w^2, g = a w; hand-simulated v/w recurrence for two steps
    a, lr, mu, wd = 3.0, 0.1, 0.9, 0.01
    w, v = 2.0, 0.0
    params, state = {"w": Mat([[w]])}, {}
    for _ in range(2):
        g = a * w
        v = mu * v + g + wd * w
        w = w - lr * v
        params, state = sgd_step(params, {"w": np.array([[a * params["w"].data[0, 0]]])}, state, lr, mu, wd)
        assert params["w"].data[0, 0] == pytest.approx(w, abs=1e-15)
    assert w == pytest.approx(2.0 - 0.1 * 6.02 - 0.1 * (0.9 * 6.02 + 3 * 1.398 + 0.01 * 1.398), abs=1e-12)


def test_one_step_moves_every_module():
    cfg = tiny(iterations=1)
    before = toytask.Model.init(cfg.model_config(), cfg.seed)
    after = train(cfg).model
    groups = {"head": [], "W_th": [], "W_st": [], "W_intra": [], "W_cls": [], "b_cls": []}
    for name in before.params:
        for key in groups:
            if key in name:
                groups[key].append(not np.array_equal(before.params[name].data, after.params[name].data))
    for key, changed in groups.items():
        assert changed and any(changed), key
