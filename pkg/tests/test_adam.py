import numpy as np
import pytest

from duet.numerics import Adam, NonFiniteError, Rng, Tensor


def make_param(value=None, shape=(3,), seed=0):
    data = value if value is not None else Rng(seed).normal(shape)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestUpdateMath:
    def test_first_step_closed_form(self):
        """With bias correction the first update is -lr * g / (|g| + eps)."""
        p = make_param(np.array([1.0, -2.0, 0.5]))
        g = np.array([0.3, -0.1, 2.0])
        opt = Adam({"p": p}, lr=0.01, eps=1e-8)
        before = p.data.copy()
        opt.step({"p": g})
        expect = before - 0.01 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p.data, expect, rtol=0, atol=1e-15)

    def test_two_steps_hand_computed(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = make_param(np.array([2.0]))
        opt = Adam({"p": p}, lr=lr, beta1=b1, beta2=b2, eps=eps)
        g1, g2 = np.array([0.5]), np.array([-1.5])

        m = np.zeros(1)
        v = np.zeros(1)
        x = np.array([2.0])
        for t, g in ((1, g1), (2, g2)):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

        opt.step({"p": g1})
        opt.step({"p": g2})
        assert np.allclose(p.data, x, rtol=0, atol=1e-15)
        assert opt.step_count == 2

    def test_lr_override_per_step(self):
        p1 = make_param(np.array([1.0]))
        p2 = make_param(np.array([1.0]))
        g = np.array([0.7])
        a1 = Adam({"p": p1}, lr=123.0)
        a2 = Adam({"p": p2}, lr=0.05)
        a1.step({"p": g}, lr=0.05)
        a2.step({"p": g})
        assert np.array_equal(p1.data, p2.data)

    def test_float32_params_stay_float32(self):
        p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        opt.step({"p": np.ones(4, dtype=np.float32)})
        assert p.dtype == np.float32
        assert opt.m["p"].dtype == np.float32


class TestGuards:
    def test_shape_mismatch(self):
        p = make_param(shape=(3,))
        opt = Adam({"p": p}, lr=0.1)
        with pytest.raises(ValueError):
            opt.step({"p": np.zeros(4)})

    def test_nonfinite_aborts_before_mutation(self):
        p = make_param(np.array([1.0, 2.0]))
        opt = Adam({"p": p}, lr=0.1)
        opt.step({"p": np.array([0.1, 0.1])})
        snap = (p.data.copy(), opt.m["p"].copy(), opt.v["p"].copy(), opt.step_count)
        with pytest.raises(NonFiniteError):
            opt.step({"p": np.array([0.1, np.nan])})
        assert np.array_equal(p.data, snap[0])
        assert np.array_equal(opt.m["p"], snap[1])
        assert np.array_equal(opt.v["p"], snap[2])
        assert opt.step_count == snap[3]


class TestStateDict:
    def test_resume_bit_exact(self):
        grads = [Rng(i).normal((4,)) for i in range(6)]

        p_full = make_param(shape=(4,), seed=9)
        full = Adam({"p": p_full}, lr=0.02)
        for g in grads:
            full.step({"p": g})

        p_half = make_param(shape=(4,), seed=9)
        half = Adam({"p": p_half}, lr=0.02)
        for g in grads[:3]:
            half.step({"p": g})
        sd = half.state_dict()
        param_snapshot = p_half.data.copy()

        p_resumed = Tensor(param_snapshot, requires_grad=True)
        resumed = Adam({"p": p_resumed}, lr=999.0)  # scalars overwritten by load
        resumed.load_state_dict(sd)
        for g in grads[3:]:
            resumed.step({"p": g})

        assert np.array_equal(p_resumed.data, p_full.data)
        assert resumed.step_count == full.step_count

    def test_state_dict_is_a_copy(self):
        p = make_param(shape=(2,))
        opt = Adam({"p": p}, lr=0.1)
        opt.step({"p": np.ones(2)})
        sd = opt.state_dict()
        opt.step({"p": np.ones(2)})
        assert not np.array_equal(sd["m"]["p"], opt.m["p"])
