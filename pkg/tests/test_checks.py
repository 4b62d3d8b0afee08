import numpy as np

from duet.checks import TOLERANCE, run_grad_check
from duet.numerics import get_default_dtype, set_default_dtype


class TestGradCheckHarness:
    def test_small_run_passes(self):
        rep = run_grad_check(n_cases=3, seed0=11)
        assert rep.passed
        assert rep.n_cases == 3
        assert len(rep.per_case) == 3
        assert rep.max_error == max(rep.per_case)
        assert rep.max_error <= TOLERANCE
        assert rep.tolerance == TOLERANCE
        assert rep.elapsed_s > 0

    def test_default_dtype_restored(self):
        set_default_dtype("float32")
        try:
            run_grad_check(n_cases=1, seed0=3)
            assert get_default_dtype() is np.float32
        finally:
            set_default_dtype("float64")

    def test_case_errors_are_seed_stable(self):
        a = run_grad_check(n_cases=2, seed0=5)
        b = run_grad_check(n_cases=2, seed0=5)
        assert a.per_case == b.per_case
