"""Central-finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import NonFiniteError, ParamSet, Tensor, grad


def check_grad(f, point: ParamSet, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` maps a ParamSet to a scalar Tensor.  Every coordinate of every
    parameter is perturbed by +/-h.  Pass float64 tensors: float32 finite
    differences are too noisy for the tolerances this is used at.

    The error per coordinate is |fd - analytic| / max(|fd|, |analytic|, 1),
    i.e. relative for large gradients and absolute near zero.
    """
    params = point.map(lambda _, t: Tensor(t.data.copy(), requires_grad=True))
    loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("check_grad: objective is non-finite at the base point")
    analytic = grad(loss, params, create_graph=False)

    worst = 0.0
    for name in params.names():
        base = params[name].data
        an = analytic[name].data
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(params).data)
            flat[i] = orig - h
            f_minus = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(
                    f"check_grad: objective non-finite near {name}[{i}]"
                )
            fd = (f_plus - f_minus) / (2.0 * h)
            an_i = float(an.reshape(-1)[i]) if an.ndim else float(an)
            err = abs(fd - an_i) / max(abs(fd), abs(an_i), 1.0)
            worst = max(worst, err)
    return worst


# -- standard verification suites ------------------------------------------------
#
# Every primitive (and both losses) gets checked at many random points in
# float64.  Seeds are fixed so a passing build passes deterministically.


@dataclass
class GradSuite:
    name: str
    runner: "Callable[[int], float]"  # points -> max relative error
    tolerance: float = 1e-5
    points: int = 100


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _point_suite(name, make_case, tolerance=1e-5, points=100):
    """Each point: fresh random ParamSet + objective; returns worst error."""

    def run(n_points: int) -> float:
        rng = np.random.default_rng(abs(hash(name)) % (2**32))
        worst = 0.0
        for _ in range(n_points):
            params, f = make_case(rng)
            worst = max(worst, check_grad(f, params, h=1e-5))
        return worst

    return GradSuite(name=name, runner=run, tolerance=tolerance, points=points)


def standard_suites() -> "list[GradSuite]":
    from . import ops
    from .objectives import SsimConfig, primary_loss, primary_loss_from_logits, ssim_loss
    from .tokens import TokenSequence

    def scalarize(t):
        return ops.sum_(ops.square(t))

    suites = []

    def simple(name, build):
        suites.append(_point_suite(name, build))

    simple("add", lambda r: (
        ParamSet({"a": _rand(r, 3, 4), "b": _rand(r, 3, 4)}),
        lambda p: scalarize(ops.add(p["a"], p["b"])),
    ))
    simple("add_broadcast", lambda r: (
        ParamSet({"a": _rand(r, 3, 4), "b": _rand(r, 4)}),
        lambda p: scalarize(ops.add(p["a"], p["b"])),
    ))
    simple("mul", lambda r: (
        ParamSet({"a": _rand(r, 3, 4), "b": _rand(r, 3, 4)}),
        lambda p: scalarize(ops.mul(p["a"], p["b"])),
    ))
    simple("pow_const", lambda r: (
        ParamSet({"a": Tensor(np.abs(r.normal(size=(3, 3))) + 0.5, requires_grad=True)}),
        lambda p: scalarize(ops.pow_const(p["a"], 1.7)),
    ))
    simple("exp", lambda r: (
        ParamSet({"a": _rand(r, 3, 3)}),
        lambda p: scalarize(ops.exp(p["a"])),
    ))
    simple("log", lambda r: (
        ParamSet({"a": Tensor(np.abs(r.normal(size=(3, 3))) + 0.5, requires_grad=True)}),
        lambda p: scalarize(ops.log(p["a"])),
    ))
    simple("matmul", lambda r: (
        ParamSet({"a": _rand(r, 3, 4), "b": _rand(r, 4, 2)}),
        lambda p: scalarize(ops.matmul(p["a"], p["b"])),
    ))
    simple("matmul_batched", lambda r: (
        ParamSet({"a": _rand(r, 2, 3, 4), "b": _rand(r, 2, 4, 2)}),
        lambda p: scalarize(ops.matmul(p["a"], p["b"])),
    ))
    simple("relu", lambda r: (
        ParamSet({"a": _rand(r, 4, 4)}),
        lambda p: scalarize(ops.relu(p["a"])),
    ))
    def softmax_case(r):
        weights = Tensor(r.normal(size=(3, 5)))
        return (
            ParamSet({"a": _rand(r, 3, 5)}),
            lambda p: ops.sum_(ops.mul(ops.softmax(p["a"], axis=-1), weights)),
        )

    suites.append(_point_suite("softmax", softmax_case))
    simple("sum", lambda r: (
        ParamSet({"a": _rand(r, 3, 4)}),
        lambda p: scalarize(ops.sum_(p["a"], axis=1)),
    ))
    simple("mean", lambda r: (
        ParamSet({"a": _rand(r, 3, 4)}),
        lambda p: scalarize(ops.mean(p["a"], axis=0)),
    ))
    simple("variance", lambda r: (
        ParamSet({"a": _rand(r, 3, 4)}),
        lambda p: scalarize(ops.variance(p["a"], axis=1)),
    ))
    simple("layer_norm", lambda r: (
        ParamSet({"x": _rand(r, 3, 6), "g": _rand(r, 6), "b": _rand(r, 6)}),
        lambda p: scalarize(ops.layer_norm(p["x"], p["g"], p["b"])),
    ))
    def embedding_case(r):
        ids = r.integers(0, 7, size=5)
        return (
            ParamSet({"e": _rand(r, 7, 4)}),
            lambda p: scalarize(ops.embed_rows(p["e"], ids)),
        )

    suites.append(_point_suite("embedding", embedding_case))

    def scatter_case(r):
        ids = r.integers(0, 7, size=5)
        return (
            ParamSet({"x": _rand(r, 5, 4)}),
            lambda p: scalarize(ops.scatter_rows(p["x"], ids, 7)),
        )

    suites.append(_point_suite("scatter_rows", scatter_case))
    simple("slice", lambda r: (
        ParamSet({"a": _rand(r, 4, 6)}),
        lambda p: scalarize(ops.slice_(p["a"], (slice(1, 3), slice(0, 6, 2)))),
    ))
    simple("unslice", lambda r: (
        ParamSet({"a": _rand(r, 2, 3)}),
        lambda p: scalarize(ops.unslice(p["a"], (4, 5), (slice(1, 3), slice(0, 3)))),
    ))
    simple("concat", lambda r: (
        ParamSet({"a": _rand(r, 2, 3), "b": _rand(r, 2, 3)}),
        lambda p: scalarize(ops.concat([p["a"], p["b"]], axis=0)),
    ))
    simple("reshape", lambda r: (
        ParamSet({"a": _rand(r, 3, 4)}),
        lambda p: scalarize(ops.reshape(p["a"], (2, 6))),
    ))
    simple("transpose", lambda r: (
        ParamSet({"a": _rand(r, 2, 3, 4)}),
        lambda p: scalarize(ops.transpose(p["a"], (2, 0, 1))),
    ))
    simple("unfold", lambda r: (
        ParamSet({"a": _rand(r, 2, 5, 6)}),
        lambda p: scalarize(ops.unfold(p["a"], (3, 3), (2, 1))),
    ))
    simple("fold", lambda r: (
        ParamSet({"a": _rand(r, 2 * 3 * 3, 2 * 4)}),
        lambda p: scalarize(ops.fold(p["a"], (2, 5, 6), (3, 3), (2, 1))),
    ))
    simple("conv2d", lambda r: (
        ParamSet({"x": _rand(r, 2, 6, 7), "k": _rand(r, 3, 2, 3, 3)}),
        lambda p: scalarize(ops.conv2d(p["x"], p["k"], stride=2, padding=1)),
    ))
    simple("conv2d_transpose", lambda r: (
        ParamSet({"x": _rand(r, 3, 3, 4), "k": _rand(r, 3, 2, 4, 4)}),
        lambda p: scalarize(ops.conv2d_transpose(p["x"], p["k"], stride=2, padding=1)),
    ))
    simple("sigmoid", lambda r: (
        ParamSet({"a": _rand(r, 3, 4)}),
        lambda p: scalarize(ops.sigmoid(p["a"])),
    ))
    def log_softmax_case(r):
        weights = Tensor(r.normal(size=(3, 5)))
        return (
            ParamSet({"a": _rand(r, 3, 5)}),
            lambda p: ops.sum_(ops.mul(ops.log_softmax(p["a"], axis=-1), weights)),
        )

    suites.append(_point_suite("log_softmax", log_softmax_case))

    def ssim_case(r):
        x = Tensor(r.uniform(0.05, 0.95, size=(8, 8)), requires_grad=True)
        y = Tensor(r.uniform(0.05, 0.95, size=(8, 8)), requires_grad=True)
        return (
            ParamSet({"x": x, "y": y}),
            lambda p: ssim_loss(p["x"], p["y"], SsimConfig()),
        )

    suites.append(_point_suite("ssim_loss", ssim_case))

    def primary_case(r):
        logits = _rand(r, 4, 6)
        target = TokenSequence([0, 2, 3, 4, 1])
        return (
            ParamSet({"l": logits}),
            lambda p: primary_loss_from_logits(p["l"], target),
        )

    suites.append(_point_suite("primary_loss_logits", primary_case))

    def primary_dist_case(r):
        logits = _rand(r, 4, 6)
        target = TokenSequence([0, 2, 3, 4, 1])

        def f(p):
            dists = ops.softmax(p["l"], axis=-1)
            return primary_loss(dists, target)

        return ParamSet({"l": logits}), f

    suites.append(_point_suite("primary_loss_dists", primary_dist_case))

    def hypergrad_case(r):
        w = _rand(r, 4)
        a_mat = Tensor(r.normal(size=(4, 4)))
        c_mat = Tensor(r.normal(size=(4, 4)))
        beta = 0.05

        def f(p):
            ww = p["w"]
            resid = ops.matmul(a_mat, ops.reshape(ww, (4, 1)))
            l_aux = ops.sum_(ops.square(resid))
            (g,) = grad(l_aux, [ww], create_graph=True)
            w_prime = ops.sub(ww, ops.mul(g, ops.as_tensor(beta, ww)))
            resid2 = ops.matmul(c_mat, ops.reshape(w_prime, (4, 1)))
            return ops.sum_(ops.square(resid2))

        return ParamSet({"w": w}), f

    suites.append(_point_suite("hypergradient", hypergrad_case, tolerance=1e-4, points=25))
    return suites


def run_suites(points: int | None = None, suites=None) -> "list[tuple[str, float, float, bool]]":
    """Run suites, returning (name, max_err, tolerance, passed) rows."""
    rows = []
    for suite in suites or standard_suites():
        n = points if points is not None else suite.points
        err = suite.runner(n)
        rows.append((suite.name, err, suite.tolerance, err < suite.tolerance))
    return rows
