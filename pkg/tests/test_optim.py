import numpy as np
import pytest

import festa.tensor as T
from festa.optim import SGD, Adam, Schedule, clip_gradients, lr_at, make_optimizer
from festa.params import ParamSet, load_paramset, save_paramset, trunc_normal


def scalar_ps(theta: float) -> ParamSet:
    ps = ParamSet("p")
    ps.add("theta", np.array([theta], dtype=np.float32))
    return ps


def quad_grad(ps: ParamSet) -> None:
    """Populate grads for L = theta^2 / 2."""
    ps.zero_grads()
    g = T.Graph()
    v = g.param(ps, "theta")
    g.backward(T.scale(T.sum_all(T.mul(v, v)), 0.5))


class TestParamSet:
    def test_duplicate_name_rejected(self):
        ps = scalar_ps(1.0)
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("theta", np.zeros(1, np.float32))

    def test_grad_shape_checked(self):
        ps = scalar_ps(1.0)
        with pytest.raises(T.DimensionError):
            ps.accumulate_grad("theta", np.zeros(3, np.float32))

    def test_iteration_order_is_insertion_order(self, rng):
        ps = ParamSet("p")
        names = [f"n{i}" for i in (3, 1, 2, 0)]
        for n in names:
            ps.add(n, rng.standard_normal(2).astype(np.float32))
        assert ps.names() == names

    def test_checkpoint_roundtrip_bitwise(self, rng, tmp_path):
        ps = ParamSet("head", task_id=1)
        ps.add("w", rng.standard_normal((7, 5)).astype(np.float32))
        ps.add("b", rng.standard_normal(5).astype(np.float32))
        path = tmp_path / "head.blob"
        save_paramset(path, ps)
        back = load_paramset(path)
        assert back.names() == ps.names()
        for name in ps.names():
            assert back.value(name).tobytes() == ps.value(name).tobytes()

    def test_trunc_normal_bounded(self, rng):
        vals = trunc_normal(rng, (2000,), std=0.02)
        assert np.abs(vals).max() <= 0.04 + 1e-7
        assert vals.dtype == np.float32


class TestOptimizers:
    def test_sgd_zero_lr_is_identity(self):
        ps = scalar_ps(1.0)
        quad_grad(ps)
        SGD(ps).step(0.0)
        assert ps.value("theta")[0] == 1.0

    def test_sgd_quadratic_step(self):
        ps = scalar_ps(1.0)
        quad_grad(ps)
        SGD(ps).step(0.1)
        assert ps.value("theta")[0] == pytest.approx(0.9, abs=1e-7)

    def test_adam_converges_on_quadratic(self):
        ps = scalar_ps(1.0)
        opt = Adam(ps)
        for _ in range(500):
            quad_grad(ps)
            opt.step(0.05)
        assert abs(ps.value("theta")[0]) < 1e-2

    def test_adam_state_survives_value_overwrite(self):
        ps = scalar_ps(1.0)
        opt = Adam(ps)
        quad_grad(ps)
        opt.step(0.1)
        t_before = opt.t
        ps.set_values({"theta": np.array([5.0], dtype=np.float32)})
        assert opt.t == t_before and opt.m["theta"][0] != 0.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_optimizer("adagrad", scalar_ps(0.0))


class TestClip:
    def _ps_with_norm(self, rng, norm: float) -> ParamSet:
        ps = ParamSet("p")
        g = rng.standard_normal(64).astype(np.float32)
        g = g / np.linalg.norm(g) * norm
        ps.add("w", np.zeros(64, np.float32))
        ps.accumulate_grad("w", g)
        return ps

    def test_under_limit_unchanged(self, rng):
        ps = self._ps_with_norm(rng, 0.5)
        before = ps.grad("w").copy()
        assert clip_gradients(ps, 1.0) == 1.0
        assert np.array_equal(ps.grad("w"), before)

    def test_over_limit_scaled_to_max(self, rng):
        ps = self._ps_with_norm(rng, 4.0)
        scale = clip_gradients(ps, 1.0)
        assert scale == pytest.approx(0.25, rel=1e-6)
        assert ps.global_grad_norm() == pytest.approx(1.0, abs=1e-6)

    def test_direction_preserved(self, rng):
        ps = self._ps_with_norm(rng, 4.0)
        before = ps.grad("w").copy()
        clip_gradients(ps, 1.0)
        after = ps.grad("w")
        cos = float(before @ after / (np.linalg.norm(before) * np.linalg.norm(after)))
        assert cos == pytest.approx(1.0, abs=1e-6)

    def test_never_increases_norm(self, rng):
        for norm in (0.1, 0.9, 1.0, 1.5, 10.0):
            ps = self._ps_with_norm(rng, norm)
            clip_gradients(ps, 1.0)
            assert ps.global_grad_norm() <= norm + 1e-6


class TestSchedules:
    def test_warmup_linear_midpoint(self):
        s = Schedule("warmup-constant", 2e-5, warmup=500, total=12000)
        assert lr_at(s, 250) == pytest.approx(1e-5, rel=1e-9)

    def test_cosine_peak_at_warmup_end(self):
        s = Schedule("warmup-cosine", 5e-4, warmup=500, total=12000)
        assert lr_at(s, 500) == pytest.approx(5e-4, rel=1e-9)

    def test_cosine_endpoint_zero(self):
        s = Schedule("warmup-cosine", 5e-4, warmup=500, total=12000)
        assert abs(lr_at(s, 12000)) < 1e-12

    def test_zero_at_round_zero_with_warmup(self):
        for kind in ("warmup-cosine", "warmup-constant"):
            assert lr_at(Schedule(kind, 1.0, 10, 100), 0) == 0.0

    def test_continuous_at_warmup_boundary(self):
        s = Schedule("warmup-cosine", 0.3, warmup=25, total=600)
        assert lr_at(s, 24) == pytest.approx(lr_at(s, 25), rel=0.05)

    def test_annealing_restarts(self):
        s = Schedule("warmup-cosine-annealing", 1e-2, warmup=0, total=400, period=100)
        assert lr_at(s, 0) == pytest.approx(1e-2)
        assert lr_at(s, 100) == pytest.approx(1e-2)  # restart
        assert lr_at(s, 50) == pytest.approx(0.5e-2, rel=1e-6)

    def test_never_negative(self):
        for kind, period in (("warmup-cosine", None),
                             ("warmup-cosine-annealing", 70),
                             ("warmup-constant", None)):
            s = Schedule(kind, 0.1, warmup=30, total=500, period=period)
            assert all(lr_at(s, r) >= 0.0 for r in range(0, 501))

    def test_round_out_of_range(self):
        s = Schedule("warmup-cosine", 0.1, 10, 100)
        with pytest.raises(ValueError):
            lr_at(s, 101)
        with pytest.raises(ValueError):
            lr_at(s, -1)

    def test_annealing_requires_period(self):
        with pytest.raises(ValueError):
            Schedule("warmup-cosine-annealing", 0.1, 10, 100)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Schedule("cyclic", 0.1, 10, 100)
