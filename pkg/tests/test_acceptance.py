"""Every acceptance criterion at its stated tolerance, one pass/fail line each."""

import numpy as np
import pytest

from diracspec.acceptance import CRITERIA, run_criterion
from diracspec.variation import Status

from conftest import ACCEPTANCE_LINES


@pytest.mark.slow
@pytest.mark.parametrize("key", list(CRITERIA))
def test_criterion(key, acceptance_ctx):
    result = run_criterion(key, acceptance_ctx)
    line = result.line()
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert result.passed, line + ("\n" + result.error if result.error else "")


@pytest.mark.slow
def test_concentrating_run_has_a_peaked_factor(acceptance_ctx):
    tr = acceptance_ctx.sphere_k4_run()
    v = tr.final_beta.values
    assert v.max() / v.mean() > 10
    assert tr.status is Status.CONCENTRATING


@pytest.mark.slow
def test_converged_sphere_runs_are_constant_and_nodeless(acceptance_ctx):
    for tr in acceptance_ctx.sphere_k2_runs():
        assert tr.status is Status.CONVERGED
        assert tr.final.zero_count == 0
        lam = [r.lambda_bar for r in tr.iterations]
        assert np.isfinite(lam).all()
