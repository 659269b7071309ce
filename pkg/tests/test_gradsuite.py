import pytest
import torch

from cotamflow import gradsuite, ops


@pytest.mark.parametrize("name", list(gradsuite.SUITE))
def test_case_passes(name):
    rep = gradsuite.SUITE[name]()
    assert rep.passed, str(rep)
    assert max(rep.errors.values()) < gradsuite.TOL


def test_suite_covers_required_primitives():
    need = {"bilinear_warp", "correlation", "self_correlation", "fmm_modulate", "cmm_modulate",
            "photometric_loss", "smoothness_loss", "selfsup_loss"}
    assert need <= set(gradsuite.SUITE)


def _wrong_backward():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            ctx.save_for_backward(a)
            return torch.sin(a)

        @staticmethod
        def backward(ctx, g):
            (a,) = ctx.saved_tensors
            return g * torch.cos(a) * 1.01

    x = torch.rand(2, 3, dtype=torch.float64, requires_grad=True)
    return ops.gradcheck(Bad.apply, [x], tol=gradsuite.TOL, eps=gradsuite.STEP)


def _crashes():
    raise RuntimeError("boom")


def test_run_suite_reports_failures_and_crashes():
    lines = []
    ok, res = gradsuite.run_suite({"bad": _wrong_backward, "crash": _crashes,
                                   "fine": gradsuite.case_selfsup_loss}, log=lines.append)
    assert not ok
    assert not res["bad"].passed and res["fine"].passed
    assert "boom" in res["crash"]
    assert sum(line.startswith("FAIL") for line in lines) == 2
