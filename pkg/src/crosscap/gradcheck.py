"""Finite-difference audit of the autodiff engine.

Every differentiable operation gets a small seeded check that compares
its backward gradients against central differences, and one end-to-end
check drives the full caption+alignment objective at toy dimensions.
The unit tests exercise the same oracle piecemeal; this module packages
it as a single pass/fail report for the command line.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SongInstance
from .model import CaptionModel, ModelConfig


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol


@dataclass
class GradCheckReport:
    checks: list
    tol: float
    h: float
    elapsed_s: float

    @property
    def max_rel_error(self):
        return max(c.max_rel_error for c in self.checks)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "max_rel_error": float(self.max_rel_error),
            "tol": float(self.tol),
            "h": float(self.h),
            "elapsed_s": round(self.elapsed_s, 3),
            "checks": [{
                "name": c.name,
                "max_rel_error": float(c.max_rel_error),
                "passed": bool(c.passed),
            } for c in self.checks],
        }


def _param(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def op_suite(rng):
    """(name, params, scalar closure) per differentiable op.

    Closures rebuild their graph on every call, as finite_diff_check
    requires; most wrap the op in tanh+sum so the downstream gradient is
    nonconstant.  Inputs stay in ranges where the op is smooth.
    """
    suite = []

    def case(name, params, f):
        suite.append((name, params, f))

    a = _param(rng, (3, 4))
    b = _param(rng, (4,))
    case("add", [a, b], lambda: T.sum_all(T.tanh(T.add(a, b))))

    c = _param(rng, (3, 1))
    case("sub", [a, c], lambda: T.sum_all(T.tanh(T.sub(a, c))))
    case("mul", [a, b], lambda: T.sum_all(T.tanh(T.mul(a, b))))
    case("scale", [a], lambda: T.sum_all(T.tanh(T.scale(a, 1.7))))

    x = _param(rng, (3, 4))
    case("exp", [x], lambda: T.sum_all(T.tanh(T.exp(x))))

    pos = _param(rng, (3, 4), lo=0.5, hi=2.5)
    case("log", [pos], lambda: T.sum_all(T.tanh(T.log(pos))))
    case("power", [pos], lambda: T.sum_all(T.tanh(T.power(pos, 1.3))))
    case("tanh", [x], lambda: T.sum_all(T.mul(T.tanh(x), T.tanh(x))))

    m1 = _param(rng, (3, 4))
    m2 = _param(rng, (4, 2))
    case("matmul", [m1, m2], lambda: T.sum_all(T.tanh(T.matmul(m1, m2))))

    b1 = _param(rng, (2, 3, 4))
    b2 = _param(rng, (2, 4, 2))
    case("bmm", [b1, b2], lambda: T.sum_all(T.tanh(T.bmm(b1, b2))))

    case("transpose", [m1],
         lambda: T.sum_all(T.tanh(T.matmul(T.transpose(m1), m1))))
    case("permute", [b1],
         lambda: T.sum_all(T.tanh(T.permute(b1, (1, 0, 2)))))
    case("reshape", [m1],
         lambda: T.sum_all(T.tanh(T.reshape(m1, (2, 6)))))

    c1 = _param(rng, (2, 3))
    c2 = _param(rng, (1, 3))
    case("concat", [c1, c2],
         lambda: T.sum_all(T.tanh(T.concat([c1, c2], axis=0))))

    n1 = _param(rng, (4, 6))
    case("narrow", [n1],
         lambda: T.sum_all(T.tanh(T.narrow(n1, 1, 5, axis=1))))

    table = _param(rng, (5, 4))
    rows = [0, 2, 2, 4]  # repeated row exercises gradient accumulation
    case("gather_rows", [table],
         lambda: T.sum_all(T.tanh(T.gather_rows(table, rows))))

    case("sum_all", [x], lambda: T.sum_all(T.mul(x, x)))
    case("sum_axis", [x],
         lambda: T.sum_all(T.tanh(T.sum_axis(x, axis=1))))
    case("mean_axis", [x],
         lambda: T.sum_all(T.tanh(T.mean_axis(x, axis=0, keepdims=True))))

    p1 = _param(rng, (5, 3))
    case("mean_pool", [p1], lambda: T.sum_all(T.tanh(T.mean_pool(p1))))

    def f_moments():
        m, v = T.moments(x)
        return T.add(T.sum_all(m), T.sum_all(T.scale(v, 0.5)))

    case("moments", [x], f_moments)

    ln_x = _param(rng, (3, 6))
    gain = _param(rng, (6,), lo=0.5, hi=1.5)
    offset = _param(rng, (6,))
    case("layer_norm", [ln_x, gain, offset],
         lambda: T.sum_all(T.tanh(T.layer_norm(ln_x, gain, offset))))

    sx = _param(rng, (3, 5))
    sw = T.Tensor(rng.uniform(0.5, 1.5, (3, 5)))  # constant mixing weights
    case("softmax", [sx],
         lambda: T.sum_all(T.mul(T.softmax(sx), sw)))

    logits = _param(rng, (4, 7))
    targets = np.array([1, 0, 6, 3])
    case("cross_entropy", [logits],
         lambda: T.cross_entropy_with_logits(logits, targets))
    case("cross_entropy_ignore", [logits],
         lambda: T.cross_entropy_with_logits(logits, targets,
                                             ignore_index=0))
    return suite


def _toy_model_case(dims, seed):
    """The full training objective at toy size: batch of 2, raw length 4."""
    cfg = ModelConfig(n_feat=4, d_m=dims, d_t=dims, d_z=dims, d_k=dims,
                      d_ff=dims, heads=2, n_music_layers=1,
                      n_lyric_layers=1, n_decoder_layers=1,
                      vocab_size=12, max_len=8)
    model = CaptionModel(cfg, seed=seed)
    rng = np.random.default_rng([seed, 11])
    batch = [
        SongInstance(music=rng.normal(0.0, 1.0, (4, cfg.n_feat)),
                     lyrics=[1, 5, 6, 2], caption=[1, 7, 8, 9, 2],
                     music_topic=0, lyric_topic=0, motif_start=0),
        SongInstance(music=rng.normal(0.0, 1.0, (4, cfg.n_feat)),
                     lyrics=[1, 4, 10, 2], caption=[1, 6, 5, 2],
                     music_topic=1, lyric_topic=1, motif_start=0),
    ]
    names, params = zip(*model.named_parameters())

    def f():
        return model.total_loss(batch, alpha=0.5).total

    return list(names), list(params), f


def run_grad_check(tol=1e-4, h=1e-5, dims=8, seed=0):
    """Check every op plus the end-to-end objective; returns the report."""
    t0 = time.time()
    rng = np.random.default_rng([seed, 7])
    checks = []
    for name, params, f in op_suite(rng):
        rep = T.finite_diff_check(f, params, h=h, tol=tol)
        checks.append(CheckResult(name, rep.max_rel_error, tol))
    names, params, f = _toy_model_case(dims, seed)
    rep = T.finite_diff_check(f, params, h=h, tol=tol, names=names)
    checks.append(CheckResult("total_loss", rep.max_rel_error, tol))
    return GradCheckReport(checks=checks, tol=tol, h=h,
                           elapsed_s=time.time() - t0)


def format_report(report):
    lines = []
    for c in report.checks:
        status = "pass" if c.passed else "FAIL"
        lines.append(f"{status}  {c.name:<24} max rel err {c.max_rel_error:.3e}")
    verdict = "pass" if report.passed else "FAIL"
    lines.append(f"{verdict}  overall: max rel err {report.max_rel_error:.3e}"
                 f" (tol {report.tol:g}, h {report.h:g},"
                 f" {report.elapsed_s:.1f}s)")
    return "\n".join(lines)
