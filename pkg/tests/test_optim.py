"""
Tests for the ADAM optimizer and learning-rate schedule.
"""

import numpy as np
import pytest

from guidederain.optim import AdamState, LrSchedule, OptimizerError, adam_step, lr_at
from guidederain.params import ParamStore
from guidederain.tensor import InvalidArgumentError


@pytest.fixture
def params():
    store = ParamStore(dtype=np.float64)
    store.add("w", np.array([[[[1.0, -2.0], [0.5, 3.0]]]]))
    return store


class TestAdamStep:
    def test_zero_gradient_leaves_parameters(self, params):
        before = params["w"].copy()
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.zeros((1, 1, 2, 2))}, state, lr=1e-3)
        assert np.array_equal(params["w"], before)
        assert state.t == 1

    def test_first_step_value(self):
        store = ParamStore(dtype=np.float64)
        store.add("p", np.zeros((1, 1, 1, 1)))
        adam_step(store, {"p": np.full((1, 1, 1, 1), 0.5)}, AdamState(), lr=1e-3)
        assert store["p"][0, 0, 0, 0] == pytest.approx(-9.99999980e-4, rel=1e-8)

    def test_identical_streams_are_bit_identical(self, params):
        other = params.copy()
        assert not np.shares_memory(params["w"], other["w"])
        states = AdamState.for_params(params), AdamState.for_params(other)
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = rng.standard_normal((1, 1, 2, 2))
            adam_step(params, {"w": g}, states[0], 1e-2)
            adam_step(other, {"w": g.copy()}, states[1], 1e-2)
        assert np.array_equal(params["w"], other["w"])

    def test_update_magnitude_bounded(self, params):
        state = AdamState.for_params(params)
        rng = np.random.default_rng(1)
        lr = 1e-2
        for _ in range(50):
            before = params["w"].copy()
            adam_step(params, {"w": rng.standard_normal((1, 1, 2, 2)) * 100}, state, lr)
            assert np.all(np.abs(params["w"] - before) <= 3 * lr)

    def test_quadratic_decreases(self):
        store = ParamStore(dtype=np.float64)
        store.add("x", np.full((1, 1, 1, 1), 5.0))
        state = AdamState.for_params(store)
        start = float(store["x"][0, 0, 0, 0] ** 2)
        for _ in range(100):
            adam_step(store, {"x": 2 * store["x"]}, state, lr=0.1)
        assert float(store["x"][0, 0, 0, 0] ** 2) < start

    def test_nan_gradient_names_parameter(self, params):
        before = params["w"].copy()
        with pytest.raises(OptimizerError, match="'w'"):
            adam_step(params, {"w": np.full((1, 1, 2, 2), np.nan)}, AdamState.for_params(params), 1e-3)
        assert np.array_equal(params["w"], before)

    def test_missing_gradient(self, params):
        with pytest.raises(InvalidArgumentError, match="no gradient"):
            adam_step(params, {}, AdamState(), 1e-3)

    def test_state_shape_mismatch(self, params):
        state = AdamState(m={"w": np.zeros((2,))}, v={"w": np.zeros((2,))})
        with pytest.raises(InvalidArgumentError, match="optimizer state"):
            adam_step(params, {"w": np.zeros((1, 1, 2, 2))}, state, 1e-3)

    def test_gradient_shape_mismatch(self, params):
        with pytest.raises(InvalidArgumentError, match="shape"):
            adam_step(params, {"w": np.zeros((1, 1, 1, 2))}, AdamState(), 1e-3)


class TestSchedule:
    @pytest.mark.parametrize("epoch,expected", [(0, 5e-4), (1199, 5e-4), (1200, 5e-5), (1600, 5e-6), (1999, 5e-6)])
    def test_full_schedule(self, epoch, expected):
        assert lr_at(LrSchedule(), epoch) == pytest.approx(expected, rel=1e-12)

    def test_nonincreasing(self):
        schedule = LrSchedule()
        rates = [lr_at(schedule, e) for e in range(schedule.total_epochs)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_desk_scale(self):
        desk = LrSchedule().scaled(0.1)
        assert desk.milestones == (120, 160)
        assert desk.total_epochs == 200
        assert lr_at(desk, 119) == pytest.approx(5e-4)
        assert lr_at(desk, 120) == pytest.approx(5e-5)
        assert lr_at(desk, 199) == pytest.approx(5e-6)

    def test_stretched_keeps_decay_positions(self):
        stretched = LrSchedule().stretched_to(10)
        assert stretched.milestones == (6, 8)
        assert stretched.total_epochs == 10

    @pytest.mark.parametrize("epoch", [-1, 2000])
    def test_out_of_range(self, epoch):
        with pytest.raises(InvalidArgumentError, match="outside"):
            lr_at(LrSchedule(), epoch)

    def test_invalid_factor(self):
        with pytest.raises(InvalidArgumentError):
            LrSchedule(factor=0.0)
