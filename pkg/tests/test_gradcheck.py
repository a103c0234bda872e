import numpy as np
import pytest

from wxadapt.autograd import CHECKS, Tensor, check_op, finite_diff_check, ops, run_all


def test_linear_op_exact():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)

    def fn(x):
        return ops.sum_all(ops.scale(x, 3.0))

    res = finite_diff_check(fn, [x])
    assert res.max_rel_error < 1e-9
    assert abs(res.analytic - 3.0) < 1e-9 or res.max_rel_error == 0.0


def test_eps_range_enforced():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="eps"):
        finite_diff_check(lambda x: ops.sum_all(x), [x], eps=1.0)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        finite_diff_check(lambda x: ops.relu(x), [x])


def test_reports_worst_coordinate():
    x = Tensor(np.array([0.5, 1.5]), requires_grad=True)

    def fn(x):
        return ops.sum_all(ops.scale(x, 2.0))

    res = finite_diff_check(fn, [x])
    assert res.worst_input == 0
    assert res.worst_coord in (0, 1)


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_registered_op_within_tolerance(name):
    report = check_op(name, seeds=range(10))
    assert report.passed, f"{name}: {report.detail}"


def test_corrupted_gradient_flagged():
    reports = run_all(seeds=range(2), corrupt_op="tanh")
    by_name = {r.name: r for r in reports}
    bad = by_name["tanh"]
    assert not bad.passed
    assert 5e-3 < bad.max_rel_error < 2e-2  # the injected 1% shows up as ~1e-2
    others = [r for r in reports if r.name != "tanh"]
    assert all(r.passed for r in others)


def test_report_covers_every_registered_op_once():
    reports = run_all(seeds=range(1))
    names = [r.name for r in reports]
    assert names == list(CHECKS)
    assert len(names) == len(set(names))
