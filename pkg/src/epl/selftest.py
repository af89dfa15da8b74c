"""Built-in verification suites run by ``epl selftest``.

Setting ``EPL_SELFTEST_FAULT`` to a suite name (fusion, entropy, gradient,
metric) swaps a deliberately broken implementation in for that suite, so the
harness itself can be shown to catch regressions.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np

from . import evidence as ev
from . import losses, metrics, oracles
from . import tensor as T
from . import uncertainty as unc

SUITES = ("fusion", "entropy", "gradient", "metric")
FAULT_ENV = "EPL_SELFTEST_FAULT"


def _random_mass(rng, n, shape=(2, 2, 2)):
    raw = rng.random((n + 1,) + shape) + 1e-3
    return raw / raw.sum(axis=0, keepdims=True)


def suite_fusion(rng, cases: int = 30) -> tuple[int, int]:
    passed = 0
    for _ in range(cases):
        n = int(rng.integers(2, 5))
        t = int(rng.integers(2, 4))
        arrs = [_random_mass(rng, n) for _ in range(t)]
        with T.default_dtype(np.float64):
            fused = ev.dempster_fuse_all([ev.MassField.from_array(a) for a in arrs]).to_array()
        ref = oracles.fuse_field_bruteforce(arrs)
        passed += bool(np.abs(fused - ref).max() <= 1e-9)
    return passed, cases


def suite_entropy(rng, cases: int = 30) -> tuple[int, int]:
    checks = []
    with T.default_dtype(np.float64):
        worked = ev.MassField.from_array(np.array([0.5, 0.3, 0.2]).reshape(3, 1, 1, 1))
        checks.append(abs(float(unc.dual_uncertainty(worked).data.ravel()[0]) - 0.3605) < 1e-4)
        vac = ev.vacuous(2, (1, 1, 1))
        checks.append(abs(float(unc.dual_uncertainty(vac).data.ravel()[0]) - math.log2(3)) < 1e-12)
        for _ in range(cases - len(checks)):
            n = int(rng.integers(2, 5))
            arr = _random_mass(rng, n, (1, 1, 1))
            got = float(unc.dual_uncertainty(ev.MassField.from_array(arr)).data.ravel()[0])
            checks.append(abs(got - oracles.dual_uncertainty_reference(arr.ravel())) < 1e-12)
    return sum(checks), len(checks)


def _grad_cases(rng):
    shape = (2, 3, 3, 3)
    labels = rng.integers(0, 2, size=shape[1:])
    u_bar = rng.random(shape[1:])
    beta = rng.random(shape[1:])

    def gedl(x):
        m = ev.mass_from_evidence(T.softplus(x))
        return losses.gedl_loss(ev.dirichlet_from_mass(m), labels, u_bar)

    def seg(x):
        m = ev.mass_from_evidence(T.softplus(x))
        return losses.seg_loss(ev.expected_probs(ev.dirichlet_from_mass(m)), labels)

    def proto(x):
        e = T.exp(x)
        return losses.proto_ce_loss(e / e.sum(axis=0, keepdims=True), labels, beta)

    def fusion(x):
        m1 = ev.mass_from_evidence(T.softplus(x))
        m2 = ev.mass_from_evidence(T.softplus(x * 0.5 + 0.3))
        return unc.dual_uncertainty(ev.dempster_pair(m1, m2)).sum()

    return [(f, rng.normal(size=shape)) for f in (gedl, seg, proto, fusion)]


def suite_gradient(rng) -> tuple[int, int]:
    cases = _grad_cases(rng)
    passed = sum(T.finite_diff_check(f, x) <= 1e-4 for f, x in cases)
    return passed, len(cases)


def suite_metric(rng, cases: int = 20) -> tuple[int, int]:
    passed = 0
    for _ in range(cases):
        shape = tuple(int(s) for s in rng.integers(3, 9, size=3))
        pred = (rng.random(shape) < 0.4).astype(np.uint8)
        gt = (rng.random(shape) < 0.4).astype(np.uint8)
        pred.flat[0] = gt.flat[0] = 1
        ok = metrics.surface_distances(pred, gt, 1) == oracles.surface_distances_bruteforce(pred, gt, 1)
        d, j = metrics.dice_jaccard(pred, gt, 1)
        passed += bool(ok and abs(d - 2 * j / (1 + j)) < 1e-12)
    return passed, cases


@contextlib.contextmanager
def _patched(module, name, replacement):
    original = getattr(module, name)
    setattr(module, name, replacement)
    try:
        yield
    finally:
        setattr(module, name, original)


def _fault(suite: str | None):
    if suite == "fusion":
        real = ev.conflict
        return _patched(ev, "conflict", lambda a, b: real(a, b) * 0.0)
    if suite == "entropy":
        return _patched(T, "log2", T.log)
    if suite == "gradient":
        real_log = T.log

        def leaky_log(a):
            out = real_log(a)
            bw = out._backward
            if bw is not None:
                out._backward = lambda g: tuple(1.01 * x for x in bw(g))
            return out
        return _patched(T, "log", leaky_log)
    if suite == "metric":
        return _patched(metrics, "surface_voxels", lambda m: np.argwhere(m))
    return contextlib.nullcontext()


def run_selftest(seed: int = 0, fault: str | None = None, out=print) -> bool:
    """Run every suite, print per-suite pass counts, return overall success."""
    fault = fault if fault is not None else os.environ.get(FAULT_ENV) or None
    funcs = {"fusion": suite_fusion, "entropy": suite_entropy, "gradient": suite_gradient, "metric": suite_metric}
    ok = True
    with _fault(fault):
        for name in SUITES:
            passed, total = funcs[name](np.random.default_rng(seed))
            ok &= passed == total
            out(f"{name}: {passed}/{total} passed")
    return ok
