"""Finite-difference gradient oracle and the registry of per-op checks.

``finite_diff_check`` compares analytic gradients from the tape against
central differences computed at double precision. The registry holds one
scenario per public op so the full suite (and the CLI ``gradcheck``
subcommand) can sweep every op over many seeds.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tape, Tensor

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
BN_TOL = 1e-3


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int
    worst_coord: int
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"max rel err {self.max_rel_error:.3e} at input {self.worst_input} "
            f"coord {self.worst_coord} (analytic {self.analytic:.6g}, "
            f"numeric {self.numeric:.6g})"
        )


def _rel_error(a, n):
    m = max(abs(a), abs(n))
    if m < 1e-6:
        return abs(a - n)
    return abs(a - n) / m


def finite_diff_check(fn, inputs, eps=DEFAULT_EPS, _grad_scale=1.0):
    """Check the analytic gradient of a scalar-valued function.

    ``fn(*inputs)`` must build a scalar Tensor loss from the given Tensor
    inputs. Every input flagged ``requires_grad`` is perturbed coordinate by
    coordinate with central differences at double precision. Returns the
    worst relative error together with its location.
    """
    if not (1e-7 <= eps <= 1e-2):
        raise ValueError(f"finite_diff_check: eps must lie in [1e-7, 1e-2], got {eps}")
    inputs = [
        Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad)
        for t in inputs
    ]
    with Tape() as tape:
        loss = fn(*inputs)
    if loss.size != 1:
        raise ValueError(
            f"finite_diff_check: loss must be scalar, got shape {tuple(loss.shape)}"
        )
    tape.backward(loss)

    def eval_loss():
        out = fn(*inputs)
        return float(out.data.reshape(-1)[0])

    worst = GradCheckResult(0.0, -1, -1, 0.0, 0.0)
    for t_idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        if t.grad is None:
            grad = np.zeros_like(t.data)
        else:
            grad = t.grad * _grad_scale
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = eval_loss()
            flat[k] = orig - eps
            f_minus = eval_loss()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = _rel_error(gflat[k], numeric)
            if err > worst.max_rel_error:
                worst = GradCheckResult(err, t_idx, k, float(gflat[k]), numeric)
    return worst


# ---------------------------------------------------------------------------
# per-op scenarios
#
# Each builder returns a list of (fn, inputs) sub-scenarios; the check for an
# op is the worst error across its sub-scenarios.


def _t(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from(x, point, margin, push):
    """Shift values lying within ``margin`` of ``point`` by ``push``."""
    d = x - point
    close = np.abs(d) < margin
    x[close] += np.where(d[close] >= 0, push, -push)
    return x


def _build_conv2d(rng):
    x = _t(rng, (2, 4, 8, 8))
    w = _t(rng, (8, 4, 3, 3))
    b = _t(rng, (8,))
    tgt = Tensor(rng.uniform(-1, 1, size=(2, 8, 8, 8)))

    def fn(x, w, b, tgt):
        return ops.mse_map_loss(ops.conv2d(x, w, b, stride=1, padding=1), tgt)

    x2 = _t(rng, (2, 3, 7, 7))
    w2 = _t(rng, (5, 3, 3, 3))
    b2 = _t(rng, (5,))
    tgt2 = Tensor(rng.uniform(-1, 1, size=(2, 5, 3, 3)))

    def fn2(x2, w2, b2, tgt2):
        return ops.mse_map_loss(ops.conv2d(x2, w2, b2, stride=2, padding=0), tgt2)

    return [(fn, [x, w, b, tgt]), (fn2, [x2, w2, b2, tgt2])]


def _pool_input(rng, shape):
    # distinct values per position so max windows have no near-ties
    x = rng.uniform(-1, 1, size=shape)
    x += np.linspace(0, 3e-3, x.size).reshape(shape)
    return Tensor(x, requires_grad=True)


def _build_pool_max(rng):
    x = _pool_input(rng, (1, 2, 6, 6))
    tgt = Tensor(rng.uniform(-1, 1, size=(1, 2, 3, 3)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.pool2d(x, "max", 2, 2), tgt)

    x2 = _pool_input(rng, (2, 1, 7, 7))
    tgt2 = Tensor(rng.uniform(-1, 1, size=(2, 1, 3, 3)))

    def fn2(x2, tgt2):
        return ops.mse_map_loss(ops.pool2d(x2, "max", 3, 2), tgt2)

    return [(fn, [x, tgt]), (fn2, [x2, tgt2])]


def _build_pool_avg(rng):
    x = _t(rng, (1, 2, 6, 6))
    tgt = Tensor(rng.uniform(-1, 1, size=(1, 2, 3, 3)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.pool2d(x, "avg", 2, 2), tgt)

    x2 = _t(rng, (2, 1, 7, 7))
    tgt2 = Tensor(rng.uniform(-1, 1, size=(2, 1, 3, 3)))

    def fn2(x2, tgt2):
        return ops.mse_map_loss(ops.pool2d(x2, "avg", 3, 2), tgt2)

    return [(fn, [x, tgt]), (fn2, [x2, tgt2])]


def _build_relu(rng):
    x = Tensor(
        _away_from(rng.uniform(-1, 1, size=(40,)), 0.0, 0.05, 0.3),
        requires_grad=True,
    )
    tgt = Tensor(rng.uniform(-1, 1, size=(40,)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.relu(x), tgt)

    return [(fn, [x, tgt])]


def _build_tanh(rng):
    x = _t(rng, (40,), -2, 2)
    tgt = Tensor(rng.uniform(-1, 1, size=(40,)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.tanh(x), tgt)

    return [(fn, [x, tgt])]


def _build_batchnorm2d(rng):
    x = _t(rng, (4, 3, 5, 5), -2, 2)
    gamma = _t(rng, (3,), 0.5, 1.5)
    beta = _t(rng, (3,), -0.5, 0.5)
    tgt = Tensor(rng.uniform(-1, 1, size=(4, 3, 5, 5)))

    def fn(x, gamma, beta, tgt):
        rm = np.zeros(3, dtype=np.float64)
        rv = np.ones(3, dtype=np.float64)
        y = ops.batchnorm2d(x, gamma, beta, rm, rv, training=True)
        return ops.mse_map_loss(y, tgt)

    return [(fn, [x, gamma, beta, tgt])]


def _build_grad_reverse(rng):
    # a single reversal is deliberately NOT the gradient of its forward map,
    # so the finite-difference comparison uses a nested pair whose coeffs
    # multiply back to +1; the sign law itself is covered by two-tape tests.
    x = _t(rng, (30,))
    tgt = Tensor(rng.uniform(-1, 1, size=(30,)))

    def fn(x, tgt):
        y = ops.grad_reverse(ops.grad_reverse(x, 2.0), 0.5)
        return ops.mse_map_loss(y, tgt)

    return [(fn, [x, tgt])]


def _build_mse_map_loss(rng):
    p = _t(rng, (2, 1, 4, 4))
    t = _t(rng, (2, 1, 4, 4))

    def fn(p, t):
        return ops.mse_map_loss(p, t)

    return [(fn, [p, t])]


def _build_l1_penalty(rng):
    x = Tensor(
        _away_from(rng.uniform(-1, 1, size=(3, 10)), 0.0, 0.05, 0.3),
        requires_grad=True,
    )

    def fn(x):
        return ops.l1_penalty(x)

    return [(fn, [x])]


def _build_cross_entropy(rng):
    logits = _t(rng, (6, 4), -2, 2)
    labels = rng.integers(0, 4, size=6)

    def fn(logits):
        return ops.cross_entropy(logits, labels)

    return [(fn, [logits])]


def _build_smooth_l1(rng):
    t = rng.uniform(-1, 1, size=(20,))
    d = rng.uniform(-2, 2, size=(20,))
    d = np.sign(d) * _away_from(np.abs(d), 1.0, 0.05, 0.2)
    d = _away_from(d, 0.0, 0.02, 0.1)
    p = Tensor(t + d, requires_grad=True)

    def fn(p):
        return ops.smooth_l1(p, Tensor(t), beta=1.0)

    return [(fn, [p])]


def _build_bce_with_logits(rng):
    z = _t(rng, (4, 8), -3, 3)
    t = Tensor(rng.uniform(0.05, 0.95, size=(4, 8)))

    def fn(z, t):
        return ops.bce_with_logits(z, t)

    return [(fn, [z, t])]


def _build_sigmoid(rng):
    x = _t(rng, (30,), -3, 3)
    tgt = Tensor(rng.uniform(0, 1, size=(30,)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.sigmoid(x), tgt)

    return [(fn, [x, tgt])]


def _build_add(rng):
    a = _t(rng, (3, 5))
    b = _t(rng, (3, 5))
    tgt = Tensor(rng.uniform(-1, 1, size=(3, 5)))

    def fn(a, b, tgt):
        return ops.mse_map_loss(ops.add(a, b), tgt)

    return [(fn, [a, b, tgt])]


def _build_scale(rng):
    x = _t(rng, (12,))
    tgt = Tensor(rng.uniform(-1, 1, size=(12,)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.scale(x, 1.7), tgt)

    return [(fn, [x, tgt])]


def _build_affine(rng):
    x = _t(rng, (12,))
    tgt = Tensor(rng.uniform(-1, 1, size=(12,)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.affine(x, 1.3, -0.4), tgt)

    return [(fn, [x, tgt])]


def _build_gather(rng):
    x = _t(rng, (4, 6))
    idx = rng.integers(0, 24, size=(10,))  # repeats exercise accumulation
    tgt = Tensor(rng.uniform(-1, 1, size=(10,)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.gather(x, idx), tgt)

    return [(fn, [x, tgt])]


def _build_reshape(rng):
    x = _t(rng, (3, 4))
    tgt = Tensor(rng.uniform(-1, 1, size=(12,)))

    def fn(x, tgt):
        return ops.mse_map_loss(ops.reshape(x, (12,)), tgt)

    return [(fn, [x, tgt])]


def _build_sum(rng):
    x = _t(rng, (9,))

    def fn(x):
        return ops.sum_all(x)

    return [(fn, [x])]


CHECKS = {
    "conv2d": (_build_conv2d, DEFAULT_TOL),
    "pool2d_max": (_build_pool_max, DEFAULT_TOL),
    "pool2d_avg": (_build_pool_avg, DEFAULT_TOL),
    "relu": (_build_relu, DEFAULT_TOL),
    "tanh": (_build_tanh, DEFAULT_TOL),
    "batchnorm2d": (_build_batchnorm2d, BN_TOL),
    "grad_reverse": (_build_grad_reverse, DEFAULT_TOL),
    "mse_map_loss": (_build_mse_map_loss, DEFAULT_TOL),
    "l1_penalty": (_build_l1_penalty, DEFAULT_TOL),
    "cross_entropy": (_build_cross_entropy, DEFAULT_TOL),
    "smooth_l1": (_build_smooth_l1, DEFAULT_TOL),
    "bce_with_logits": (_build_bce_with_logits, DEFAULT_TOL),
    "sigmoid": (_build_sigmoid, DEFAULT_TOL),
    "add": (_build_add, DEFAULT_TOL),
    "scale": (_build_scale, DEFAULT_TOL),
    "affine": (_build_affine, DEFAULT_TOL),
    "gather": (_build_gather, DEFAULT_TOL),
    "reshape": (_build_reshape, DEFAULT_TOL),
    "sum": (_build_sum, DEFAULT_TOL),
}


@dataclass
class OpReport:
    name: str
    max_rel_error: float
    tol: float
    passed: bool
    detail: GradCheckResult = field(repr=False, default=None)


def check_op(name, seeds=range(10), eps=DEFAULT_EPS, grad_scale=1.0):
    """Run one op's scenarios over the given seeds; returns an OpReport."""
    builder, tol = CHECKS[name]
    worst = None
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        for fn, inputs in builder(rng):
            res = finite_diff_check(fn, inputs, eps=eps, _grad_scale=grad_scale)
            if worst is None or res.max_rel_error > worst.max_rel_error:
                worst = res
    return OpReport(name, worst.max_rel_error, tol, worst.max_rel_error <= tol, worst)


def run_all(seeds=range(10), eps=DEFAULT_EPS, corrupt_op=None):
    """Check every registered op once; optionally corrupt one op's analytic
    gradient by 1% to prove the oracle flags bad gradients."""
    reports = []
    for name in CHECKS:
        scale = 1.01 if name == corrupt_op else 1.0
        reports.append(check_op(name, seeds=seeds, eps=eps, grad_scale=scale))
    return reports
