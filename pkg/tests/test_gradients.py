import time

import numpy as np
import pytest
import torch

from dpmkit.gradcheck import GradCheckResult, check_gradients, sample_entries
from gradient_suite import CASES, TOLERANCE, run_case

DTYPES = [torch.float64, torch.float32]


@pytest.mark.parametrize("dtype", DTYPES, ids=["f64", "f32"])
@pytest.mark.parametrize("name", list(CASES))
def test_case_within_tolerance(name, dtype):
    res = run_case(name, dtype, count=16)
    assert len(res.names) >= 16
    assert res.max_rel_error <= TOLERANCE[dtype], (name, res.max_rel_error)


def test_checker_flags_wrong_gradient():
    x = torch.randn(10, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            ctx.save_for_backward(t)
            return (t ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (t,) = ctx.saved_tensors
            return g * 3 * t  # should be 2t

    res = check_gradients(lambda: Wrong.apply(x), {"x": x}, count=10, eps=1e-4)
    assert res.max_rel_error > 0.3


def test_quadratic_exact_both_stencils():
    x = torch.randn(7, dtype=torch.float64, requires_grad=True)
    for order in (2, 4):
        res = check_gradients(lambda: (x ** 2).sum(), {"x": x}, count=7, eps=1e-3, order=order)
        np.testing.assert_allclose(res.numeric, 2 * x.detach().numpy(), rtol=1e-9)


def test_bad_order():
    x = torch.zeros(2, requires_grad=True)
    with pytest.raises(ValueError):
        check_gradients(lambda: x.sum(), {"x": x}, order=3)


def test_sample_entries_distinct_and_in_range():
    params = {"a": torch.zeros(3, 4), "b": torch.zeros(5)}
    picks = sample_entries(params, 17, np.random.default_rng(0))
    assert len(set(picks)) == 17
    assert all(idx < params[n].numel() for n, idx in picks)


def test_floor_for_zero_gradients():
    r = GradCheckResult([("x", 0)], np.array([0.0]), np.array([1e-9]), floor=1e-6)
    assert r.max_rel_error == pytest.approx(1e-3)


def test_suite_runtime_under_two_minutes():
    t0 = time.perf_counter()
    for name in CASES:
        for dtype in DTYPES:
            run_case(name, dtype)
    assert time.perf_counter() - t0 < 120
