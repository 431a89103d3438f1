"""Finite-difference verification of every gradient rule.

Each case builds a small random instance, evaluates it in a float64 shadow
graph and compares the analytic gradient of a scalar probe against central
differences.  Non-scalar outputs are contracted with a fixed random tensor so
every output element contributes.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import losses, ops
from .autodiff import GRAD_RULES, Graph, Var, stop_gradient
from .tensor import Rng

F64 = np.float64
EPS = 1e-3
RTOL = 1e-3
ATOL = 1e-5

Builder = Callable[[Graph, list[Var]], Var]


@dataclass
class Instance:
    inputs: list[np.ndarray]
    fn: Builder
    # indices whose gradient must be exactly zero (behind a stop-gradient)
    blocked: frozenset[int] = frozenset()
    backend: str = "numpy"


@dataclass
class CheckCase:
    name: str
    make: Callable[[Rng], Instance]


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel: float = 0.0
    max_abs: float = 0.0
    failures: int = 0
    blocked_nonzero: int = 0
    seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.blocked_nonzero == 0


def _u(rng: Rng, *shape, lo=-1.0, hi=1.0) -> np.ndarray:
    return rng.uniform64(shape, lo, hi)


def _away_from(x: np.ndarray, point: float, gap: float = 0.05) -> np.ndarray:
    """Push entries out of a band around a kink so differences stay one-sided-free."""
    d = x - point
    near = np.abs(d) < gap
    return np.where(near, point + np.where(d >= 0, gap, -gap) + d, x)


def _probe(g: Graph, out: Var, weight: np.ndarray | None) -> Var:
    if out.value.size == 1 and weight is None:
        return out
    return ops.sum(ops.mul(out, g.var(weight)))


def _elementwise(kind: str, fn, *, lo=-1.0, hi=1.0, kink: float | None = None, n_in=1,
                 shape=(3, 4)) -> CheckCase:
    def make(rng: Rng) -> Instance:
        xs = [_u(rng, *shape, lo=lo, hi=hi) for _ in range(n_in)]
        if kink is not None:
            xs = [_away_from(x, kink) for x in xs]
        w = _u(rng, *shape)
        return Instance(xs, lambda g, v: _probe(g, fn(*v), w))
    return CheckCase(kind, make)


def _shaped(name: str, shapes, fn, out_shape_fn=None) -> CheckCase:
    def make(rng: Rng) -> Instance:
        xs = [_u(rng, *s) for s in shapes]
        holder = {}

        def build(g, v):
            out = fn(*v)
            if "w" not in holder:
                holder["w"] = _u(rng, *out.shape) if out.value.size > 1 else None
            return _probe(g, out, holder["w"])
        return Instance(xs, build)
    return CheckCase(name, make)


def _div_case() -> CheckCase:
    def make(rng):
        a = _u(rng, 3, 4)
        b = _u(rng, 3, 4, lo=0.5, hi=1.5) * np.where(_u(rng, 3, 4) < 0, -1, 1)
        w = _u(rng, 3, 4)
        return Instance([a, b], lambda g, v: _probe(g, ops.div(*v), w))
    return CheckCase("div", make)


def _conv_case(name, xshape, wshape, stride, pad, backend="numpy") -> CheckCase:
    def make(rng):
        x, w, b = _u(rng, *xshape), _u(rng, *wshape), _u(rng, wshape[0])
        holder = {}

        def build(g, v):
            out = ops.conv2d(v[0], v[1], v[2], stride, pad)
            holder.setdefault("w", _u(rng, *out.shape))
            return _probe(g, out, holder["w"])
        return Instance([x, w, b], build, backend=backend)
    return CheckCase(name, make)


def _bn_case(name, batch_stats: bool, shape=(4, 3, 2, 2)) -> CheckCase:
    def make(rng):
        x = _u(rng, *shape)
        gamma = _u(rng, shape[1], lo=0.5, hi=1.5)
        beta = _u(rng, shape[1])
        mean = _u(rng, shape[1], lo=-0.2, hi=0.2)
        var = _u(rng, shape[1], lo=0.5, hi=1.5)
        w = _u(rng, *shape)

        def build(g, v):
            if batch_stats:
                out = ops.batchnorm(v[0], v[1], v[2], batch_stats=True)
            else:
                out = ops.batchnorm(v[0], v[1], v[2], mean, var, batch_stats=False)
            return _probe(g, out, w)
        return Instance([x, gamma, beta], build)
    return CheckCase(name, make)


def _cosine_case(name: str, block: bool) -> CheckCase:
    shapes = [(3, 6), (3, 2, 2, 2)]

    def make(rng):
        enc = [_u(rng, *s) for s in shapes]
        dec = [_u(rng, *s) for s in shapes]

        def build(g, v):
            return losses.global_cosine_loss(v[:2], v[2:], block_enc_grad=block)
        return Instance(enc + dec, build, blocked=frozenset({0, 1}) if block else frozenset())
    return CheckCase(name, make)


def _ce_case() -> CheckCase:
    def make(rng):
        logits = _u(rng, 5, 4, lo=-3, hi=3)
        labels = rng.integers(0, 4, 5)
        return Instance([logits], lambda g, v: losses.cross_entropy(v[0], labels))
    return CheckCase("cross_entropy", make)


def _kl_case(name: str, symmetric: bool) -> CheckCase:
    def make(rng):
        a, b = _u(rng, 4, 3, lo=-2, hi=2), _u(rng, 4, 3, lo=-2, hi=2)

        def build(g, v):
            p, q = ops.softmax(v[0]), ops.softmax(v[1])
            return losses.symmetric_kl(p, q) if symmetric else losses.kl_divergence(p, q)
        return Instance([a, b], build)
    return CheckCase(name, make)


def _sg_case() -> CheckCase:
    def make(rng):
        x, y = _u(rng, 3, 4), _u(rng, 3, 4)
        return Instance([x, y], lambda g, v: ops.sum(ops.mul(stop_gradient(v[0]), v[1])),
                        blocked=frozenset({0}))
    return CheckCase("stop_gradient", make)


def _train_loss_case() -> CheckCase:
    def make(rng):
        a, b, c, d = (_u(rng, 2, 3) for _ in range(4))
        return Instance([a, b, c, d], lambda g, v: losses.train_loss(
            *(ops.sum(ops.mul(x, x)) for x in v), kl_weight=0.5))
    return CheckCase("train_loss", make)


def default_cases() -> list[CheckCase]:
    cases = [
        _elementwise("add", ops.add, n_in=2),
        _elementwise("sub", ops.sub, n_in=2),
        _elementwise("mul", ops.mul, n_in=2),
        _div_case(),
        _elementwise("scale", lambda a: ops.scale(a, -1.7)),
        _elementwise("relu", ops.relu, kink=0.0),
        _elementwise("clamp_min", lambda a: ops.clamp_min(a, 0.1), kink=0.1),
        _elementwise("log", ops.log, lo=0.2, hi=1.5),
        _elementwise("exp", ops.exp),
        _shaped("sum", [(3, 4)], ops.sum),
        _shaped("mean", [(3, 4)], ops.mean),
        _shaped("dot", [(5,), (5,)], ops.dot),
        _shaped("dot[rowwise]", [(3, 2, 2), (3, 2, 2)], lambda a, b: ops.dot(a, b, rowwise=True)),
        _shaped("norm2", [(6,)], ops.norm2),
        _shaped("norm2[rowwise]", [(3, 5)], lambda a: ops.norm2(a, rowwise=True)),
        _shaped("reshape", [(2, 6)], lambda a: ops.reshape(a, (3, 4))),
        _shaped("flatten", [(2, 2, 3)], ops.flatten),
        _shaped("concat", [(2, 1, 3), (2, 2, 3)], lambda a, b: ops.concat([a, b], axis=1)),
        _shaped("upsample2x", [(2, 2, 3, 3)], ops.upsample2x),
        _shaped("avgpool2d", [(2, 2, 4, 4)], lambda a: ops.avgpool2d(a, 2)),
        _shaped("global_avgpool", [(2, 3, 2, 2)], ops.global_avgpool),
        _shaped("matmul", [(3, 4), (4, 2)], ops.matmul),
        _shaped("linear", [(3, 4), (2, 4), (2,)], ops.linear),
        _conv_case("conv2d[3x3,s1]", (2, 2, 5, 5), (3, 2, 3, 3), 1, 1),
        _conv_case("conv2d[3x3,s2]", (2, 2, 6, 6), (3, 2, 3, 3), 2, 1),
        _conv_case("conv2d[1x1,s2]", (2, 3, 4, 4), (2, 3, 1, 1), 2, 0),
        _bn_case("batchnorm[batch]", True),
        _bn_case("batchnorm[batch,NC]", True, shape=(5, 3)),
        _bn_case("batchnorm[running]", False),
        _shaped("softmax", [(3, 4)], ops.softmax),
        _shaped("log_softmax", [(3, 4)], ops.log_softmax),
        _sg_case(),
        _cosine_case("global_cosine_loss", block=True),
        _cosine_case("global_cosine_loss[no sg]", block=False),
        _ce_case(),
        _kl_case("kl_divergence", symmetric=False),
        _kl_case("symmetric_kl", symmetric=True),
        _train_loss_case(),
    ]
    if ops.torch is not None:
        cases.append(_conv_case("conv2d[torch]", (2, 2, 6, 6), (3, 2, 3, 3), 2, 1, backend="torch"))
    return cases


def _evaluate(inst: Instance, values: list[np.ndarray]) -> tuple[Graph, list[Var], Var]:
    g = Graph(F64)
    vs = [g.var(x, requires_grad=True) for x in values]
    return g, vs, inst.fn(g, vs)


def check_instance(inst: Instance, eps: float = EPS, rtol: float = RTOL,
                   atol: float = ATOL) -> tuple[float, float, int, int]:
    """Returns (max relative error, max absolute error, failing elements, nonzero blocked grads)."""
    prev = ops.set_conv_backend(inst.backend)
    try:
        g, vs, loss = _evaluate(inst, inst.inputs)
        grads = g.backward(loss)
        max_rel = max_abs = 0.0
        failures = blocked_nonzero = 0
        for i, (x, v) in enumerate(zip(inst.inputs, vs)):
            analytic = grads[v.id]
            if i in inst.blocked:
                blocked_nonzero += int(np.count_nonzero(analytic))
                continue
            work = [a.copy() for a in inst.inputs]
            flat = work[i].reshape(-1)
            numeric = np.empty(flat.size)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = _evaluate(inst, work)[2].item()
                flat[j] = orig - eps
                fm = _evaluate(inst, work)[2].item()
                flat[j] = orig
                numeric[j] = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)
            err = np.abs(a - numeric)
            rel = err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-300)
            bad = (err > atol) & (rel > rtol)
            failures += int(bad.sum())
            max_abs = max(max_abs, float(err.max(initial=0.0)))
            max_rel = max(max_rel, float(np.where(err > atol, rel, 0.0).max(initial=0.0)))
        return max_rel, max_abs, failures, blocked_nonzero
    finally:
        ops.set_conv_backend(prev)


def run_case(case: CheckCase, rng: Rng, instances: int = 20, **tol) -> CheckResult:
    res = CheckResult(case.name, instances)
    start = time.perf_counter()
    for k in range(instances):
        inst = case.make(rng.spawn(case.name, k))
        rel, ab, fails, blocked = check_instance(inst, **tol)
        res.max_rel = max(res.max_rel, rel)
        res.max_abs = max(res.max_abs, ab)
        res.failures += fails
        res.blocked_nonzero += blocked
    res.seconds = time.perf_counter() - start
    return res


def run_gradcheck(seed: int = 0, instances: int = 20, cases: list[CheckCase] | None = None,
                  **tol) -> list[CheckResult]:
    rng = Rng(seed)
    return [run_case(c, rng, instances, **tol) for c in (cases or default_cases())]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'op':<28} {'n':>3} {'max_rel':>10} {'max_abs':>10}  status"]
    for r in results:
        status = "PASS" if r.passed else f"FAIL ({r.failures} elems, {r.blocked_nonzero} blocked)"
        lines.append(f"{r.name:<28} {r.instances:>3} {r.max_rel:>10.2e} {r.max_abs:>10.2e}  {status}")
    return "\n".join(lines)


@contextlib.contextmanager
def corrupted_rule(kind: str, factor: float = 1.1) -> Iterator[None]:
    """Temporarily scale one op's gradient rule (negative control for the checker)."""
    original = GRAD_RULES[kind]

    def bad(ctx, g, needs):
        return tuple(None if gi is None else gi * factor for gi in original(ctx, g, needs))
    GRAD_RULES[kind] = bad
    try:
        yield
    finally:
        GRAD_RULES[kind] = original
