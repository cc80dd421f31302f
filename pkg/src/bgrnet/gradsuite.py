"""Named finite-difference checks over every differentiable op and the full pipeline."""

from __future__ import annotations

import fnmatch
from typing import Callable

import numpy as np

from . import tensor as T
from .graphs import extract_class_centers
from .pipeline import Model, ModelConfig, forward_mats, losses
from .reasoning import AttentionHead, JointGraph, ReasoningLayerParams, attention_adjacency, reasoning_layer, run_reasoning

EPS = 1e-5
TOL = 1e-4


def away_from_kink(x: np.ndarray, rng: np.random.Generator, gap: float = 1e-3) -> np.ndarray:
    """Resample entries with |x| < gap so ReLU-family checks avoid the kink."""
    x = np.array(x, dtype=np.float64)
    bad = np.abs(x) < gap
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) < gap
    return x


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _elementary(seed: int) -> dict[str, Callable[[], T.GradCheckReport]]:
    rng = np.random.default_rng(seed)
    r = lambda *s: _rand(rng, *s)  # noqa: E731
    mask = rng.random((4, 4)) < 0.6
    np.fill_diagonal(mask, True)
    labels = rng.integers(0, 3, 5)
    checks = {
        "matmul": (lambda a, b: T.matmul(a, b), [r(4, 5), r(5, 3)]),
        "transpose": (lambda a: T.transpose(a), [r(3, 4)]),
        "scale_add": (lambda a, b: T.scale_add(a, b, 2.0, -3.0), [r(3, 4), r(3, 4)]),
        "scale": (lambda a: T.scale(a, 0.7), [r(2, 3)]),
        "hadamard": (lambda a, b: T.hadamard(a, b), [r(3, 3), r(3, 3)]),
        "add_row": (lambda a, b: T.add_row(a, b), [r(4, 3), r(1, 3)]),
        "outer_add": (lambda a, b: T.outer_add(a, b), [r(4, 1), r(1, 5)]),
        "relu": (lambda a: T.relu(a), [away_from_kink(r(3, 3), rng)]),
        "leaky_relu": (lambda a: T.leaky_relu(a, 0.2), [away_from_kink(r(3, 4), rng)]),
        "softmax_rows": (lambda a: T.softmax_axis(a, "rows"), [r(3, 4)]),
        "softmax_cols": (lambda a: T.softmax_axis(a, "cols"), [r(3, 4)]),
        "softmax_masked": (lambda a: T.softmax_axis(a, "rows", mask), [r(4, 4)]),
        "concat_cols": (lambda a, b: T.concat_cols(a, b), [r(3, 2), r(3, 4)]),
        "concat_rows": (lambda a, b: T.concat_rows(a, b), [r(2, 3), r(4, 3)]),
        "slice_rows": (lambda a: T.slice_rows(a, 1, 3), [r(4, 3)]),
        "slice_cols": (lambda a: T.slice_cols(a, 1, 3), [r(3, 4)]),
        "reshape": (lambda a: T.reshape(a, 2, 6), [r(3, 4)]),
        "sum_all": (lambda a: T.sum_all(a), [r(3, 4)]),
        "cross_entropy": (lambda a: T.cross_entropy(a, labels), [r(5, 3)]),
    }
    return {
        name: (lambda op=op, xs=xs: T.grad_check(op, xs, EPS, TOL, seed)) for name, (op, xs) in checks.items()
    }


def _param_op(model: Model, names: list[str], fn):
    """Wrap ``fn(model, *inputs)`` as an op over (inputs..., parameters...)."""

    def op(*mats):
        n_in = len(mats) - len(names)
        m = model.with_params({**model.params, **dict(zip(names, mats[n_in:]))})
        return fn(m, *mats[:n_in])

    return op


def pipeline_check(n_thing: int, n_stuff: int, hw: int = 6, seed: int = 0, mode: str = "bidirectional"):
    """Gradcheck of thing + stuff logit sums wrt raw inputs and every parameter."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(N=4, D0=3, D1=3, D2=3, T=2, heads=3, n_thing_classes=3, n_stuff_classes=n_stuff, mode=mode)
    model = Model.init(cfg, seed)
    names = sorted(model.params)
    inputs = [_rand(rng, n_thing, 4), _rand(rng, 4, hw * hw), _rand(rng, n_stuff, hw * hw)]
    emb = rng.standard_normal((n_thing + n_stuff, 5)) if mode == "cosine" else None

    def fn(m, R, F, S):
        out = forward_mats(m, R, F, S, emb)
        return T.concat_cols(T.sum_all(out.thing_logits), T.sum_all(out.stuff_logits))

    xs = inputs + [model.params[n].data for n in names]
    return T.grad_check(_param_op(model, names, fn), xs, EPS, TOL, seed)


def loss_check(seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(N=4, D0=3, D1=3, D2=3, T=2, heads=3, n_thing_classes=3, n_stuff_classes=2)
    model = Model.init(cfg, seed)
    names = sorted(model.params)
    thing_labels = rng.integers(0, 3, 3)
    stuff_labels = rng.integers(0, 2, 16)

    def fn(m, R, F, S):
        lt, ls = losses(forward_mats(m, R, F, S), thing_labels, stuff_labels)
        return T.concat_cols(lt, ls)

    xs = [_rand(rng, 3, 4), _rand(rng, 4, 16), _rand(rng, 2, 16)] + [model.params[n].data for n in names]
    return T.grad_check(_param_op(model, names, fn), xs, EPS, TOL, seed)


def _graph_checks(seed: int) -> dict[str, Callable[[], T.GradCheckReport]]:
    rng = np.random.default_rng(seed + 1)

    def centers():
        return T.grad_check(
            lambda F, S: extract_class_centers(F, S).features, [_rand(rng, 3, 20), _rand(rng, 4, 20)], EPS, TOL, seed
        )

    def attention():
        xs = [_rand(rng, 5, 3)] + [_rand(rng, 1, 6) for _ in range(3)]
        return T.grad_check(lambda X, *w: attention_adjacency(X, [AttentionHead(h) for h in w]), xs, EPS, TOL, seed)

    def layer():
        X, A = _rand(rng, 5, 3), rng.random((5, 5))
        A /= A.sum(axis=1, keepdims=True)

        def op(X, A, Wt, Ws):
            return reasoning_layer(JointGraph(X, 3, 2, A), ReasoningLayerParams(Wt, Ws, []))

        return T.grad_check(op, [X, A, _rand(rng, 3, 2), _rand(rng, 3, 2)], EPS, TOL, seed)

    def reasoning():
        # 3 thing nodes, 2 stuff nodes, T=2, 3 heads; every input and parameter checked.
        N, D0 = 3, 2
        shapes = []
        for t in range(2):
            d = N + t * D0
            shapes += [(d, D0), (d, D0)] + [(1, 2 * d)] * 3

        def op(Xt, Xs, *flat):
            params = []
            for t in range(2):
                w = flat[5 * t : 5 * t + 5]
                params.append(ReasoningLayerParams(w[0], w[1], [AttentionHead(h) for h in w[2:]]))
            out = run_reasoning(Xt, Xs, params)
            return T.concat_rows(T.concat_rows(out.X_th, out.X_st), T.concat_cols(out.A_th, T.Mat.zeros(3, 4)))

        xs = [_rand(rng, 3, N), _rand(rng, 2, N)] + [_rand(rng, *s) for s in shapes]
        return T.grad_check(op, xs, EPS, TOL, seed)

    return {
        "extract_class_centers": centers,
        "attention_adjacency": attention,
        "reasoning_layer": layer,
        "run_reasoning_3x2": reasoning,
        "pipeline_3thing_2stuff": lambda: pipeline_check(3, 2, 6, seed),
        "pipeline_3thing_4stuff": lambda: pipeline_check(3, 4, 6, seed),
        "pipeline_loss": lambda: loss_check(seed),
    }


def suite(seed: int = 0) -> dict[str, Callable[[], T.GradCheckReport]]:
    checks = _elementary(seed)
    checks.update(_graph_checks(seed))
    return checks


def select(patterns: list[str], seed: int = 0) -> dict[str, Callable[[], T.GradCheckReport]]:
    checks = suite(seed)
    if not patterns:
        return checks
    return {n: c for n, c in checks.items() if any(fnmatch.fnmatchcase(n, p) for p in patterns)}
