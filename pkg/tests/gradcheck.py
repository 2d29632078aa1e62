"""Finite-difference gradient checking shared by unit and acceptance tests.

Each case scalarizes an op through a fixed random linear functional (matmul
with a constant weight, then reduce_sum), runs the tape backward, and
compares against central differences coordinate by coordinate using
relative error with denominator max(|a|, |b|, 1e-8).
"""

from __future__ import annotations

import numpy as np

from mbcdlab import tensor as T

FD_H = 1e-5
REL_TOL = 1e-4
DENOM_FLOOR = 1e-8


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), DENOM_FLOOR)
    return float((np.abs(a - b) / denom).max())


def check_against_fd(build_loss, inputs: list[np.ndarray], h: float = FD_H,
                     tol: float = REL_TOL) -> float:
    """build_loss(list of Tensors) -> scalar Tensor. Checks the gradient of
    every input; returns the worst relative error seen."""
    with T.Tape() as tape:
        leaves = [tape.leaf(x) for x in inputs]
        loss = build_loss(leaves)
        grads = tape.gradients(loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = grads[leaf.node_id].values

        def f(p, i=i):
            probe_inputs = [T.constant(x) for x in inputs]
            probe_inputs[i] = p
            return build_loss(probe_inputs)

        fd = T.finite_difference_gradient(f, T.constant(inputs[i]), h).values
        err = rel_err(analytic, fd)
        assert err <= tol, f"gradient mismatch on input {i}: rel err {err:.3g} > {tol}"
        worst = max(worst, err)
    return worst


def _weights(rng: np.random.Generator, cols: int) -> np.ndarray:
    return rng.normal(size=(cols, 1))


def _scalarize(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return T.reduce_sum(T.matmul(out, T.constant(w)))


def _away_from_zero(x: np.ndarray, margin: float) -> np.ndarray:
    return x + margin * np.sign(x) + (x == 0) * margin


def _distinct_rows(x: np.ndarray, margin: float) -> np.ndarray:
    # spread each row's values so the row argmax cannot flip under +-h
    order = np.argsort(x, axis=1)
    spread = np.zeros_like(x)
    np.put_along_axis(spread, order, margin * np.arange(x.shape[1])[None, :], axis=1)
    return x + spread


def primitive_cases(rng: np.random.Generator, n: int, c: int):
    """Yield (name, build_loss, inputs) gradcheck cases for every primitive."""
    w_c = _weights(rng, c)
    w_n = _weights(rng, n)

    a = rng.normal(size=(n, c))
    b = rng.normal(size=(c, n))
    yield "matmul", lambda ts: _scalarize(T.matmul(ts[0], ts[1]), w_n), [a, b]

    x = rng.normal(size=(n, c))
    y2 = rng.normal(size=(n, c))
    yield "add", lambda ts: _scalarize(T.add(ts[0], ts[1]), w_c), [x, y2]
    yield "sub", lambda ts: _scalarize(T.sub(ts[0], ts[1]), w_c), [x, y2]
    s = rng.normal()
    yield "add_scalar", lambda ts: _scalarize(T.add(ts[0], ts[1]), w_c), [x, np.asarray(s)]
    cmul = float(rng.normal())
    yield "scalar_mul", lambda ts: _scalarize(T.scalar_mul(ts[0], cmul), w_c), [x]
    yield "masked_scale", lambda ts: _scalarize(T.masked_scale(ts[0], 1.0), w_c), [x]
    yield "masked_scale_zero", lambda ts: T.add(
        _scalarize(T.masked_scale(ts[0], 0.0), w_c), _scalarize(ts[0], w_c)), [x]

    xr = _away_from_zero(rng.normal(size=(n, c)), 0.05)
    yield "relu", lambda ts: _scalarize(T.relu(ts[0]), w_c), [xr]

    parts = [rng.normal(size=(n, c)), rng.normal(size=(n, 2))]
    w_cat = _weights(rng, c + 2)
    yield "concat_last_axis", lambda ts: _scalarize(T.concat_last_axis(*ts), w_cat), parts

    yield "reduce_mean", lambda ts: T.reduce_mean(ts[0]), [rng.normal(size=(n, c))]
    yield "reduce_sum", lambda ts: T.reduce_sum(ts[0]), [rng.normal(size=(n, c))]

    yield "softmax_last_axis", lambda ts: _scalarize(T.softmax_last_axis(ts[0]), w_c), \
        [rng.normal(size=(n, c))]
    yield "log_softmax_last_axis", lambda ts: _scalarize(T.log_softmax_last_axis(ts[0]), w_c), \
        [rng.normal(size=(n, c))]
    # layer_norm over 2-wide rows is piecewise constant (output is a fixed
    # +-1 pattern) with an exactly-zero gradient, so check 3-wide and up
    c_ln = max(c, 3)
    w_ln = _weights(rng, c_ln)
    yield "layer_norm_last_axis", lambda ts: _scalarize(
        T.layer_norm_last_axis(ts[0]), w_ln), [rng.normal(size=(n, c_ln))]

    xm = _distinct_rows(rng.normal(size=(n, c)), 0.01)
    yield "max_last_axis", lambda ts: T.reduce_sum(T.max_last_axis(ts[0])), [xm]

    labels = rng.integers(0, c, size=n)
    yield "cross_entropy", lambda ts: T.cross_entropy(ts[0], labels), [rng.normal(size=(n, c))]

    # mix with uniform to keep entries well away from 0, where the FD
    # truncation error of p*ln(p) blows up
    p = 0.9 * np.asarray(T.softmax_last_axis(T.constant(rng.normal(size=(n, c)))).values) + 0.1 / c
    q = 0.9 * np.asarray(T.softmax_last_axis(T.constant(rng.normal(size=(n, c)))).values) + 0.1 / c
    yield "kl_divergence", lambda ts: T.kl_divergence(ts[0], ts[1]), [p, q]


PRIMITIVE_NAMES = [name for name, _, _ in primitive_cases(np.random.default_rng(0), 3, 4)]


def run_primitive_gradchecks(cases_per_primitive: int, seed: int = 2024,
                             tol: float = REL_TOL) -> dict[str, float]:
    """Randomized shapes per case; returns worst error per primitive."""
    worst: dict[str, float] = {}
    for case in range(cases_per_primitive):
        rng = np.random.default_rng([seed, case])
        if case == 0:
            n, c = 8, 16  # the largest covered shape, pinned once
        else:
            n = int(rng.integers(1, 9))
            c = int(rng.integers(2, 17))
        for name, build, inputs in primitive_cases(rng, n, c):
            err = check_against_fd(build, inputs, tol=tol)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
