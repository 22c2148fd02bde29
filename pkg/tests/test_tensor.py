import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ri3d import tensor as T
from ri3d.tensor import (ContractError, LrSchedule, OptimizerState, ShapeError,
                         Tape, Tensor, adam_step, backward, load_checkpoint,
                         save_checkpoint)

from oracles import finite_diff_grad, rel_err


class TestMatmul:
    def test_identity(self):
        v = Tensor([[1.0], [2.0], [3.0]])
        out = T.matmul(Tensor(np.eye(3)), v)
        assert np.array_equal(out.values, v.values)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        assert np.array_equal(T.matmul(a, b).values, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_is_ones_bt(self, rng):
        a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.matmul(a, b))
        grads = tape.gradients(loss)
        assert np.allclose(grads[a], np.ones((3, 2)) @ b.values.T)
        fd = finite_diff_grad(lambda: float(T.matmul(a, b).values.sum()), a.values, h=1e-6)
        assert rel_err(grads[a], fd) <= 1e-4


class TestSoftmax:
    def test_uniform_logits(self):
        w = T.softmax_axis(Tensor(np.zeros(4)), axis=0)
        assert np.allclose(w.values, 0.25)

    def test_saturation(self):
        w = T.softmax_axis(Tensor([0.0, 1e9]), axis=0)
        assert np.array_equal(w.values, [0.0, 1.0])

    def test_masked_middle_closed_form(self):
        w = T.softmax_axis(Tensor([1.0, 2.0, 3.0]), axis=0,
                           mask=np.array([True, False, True]))
        e2 = math.exp(2.0)
        assert w.values[1] == 0.0
        assert abs(w.values[0] - 1 / (1 + e2)) < 1e-15
        assert abs(w.values[2] - e2 / (1 + e2)) < 1e-15

    def test_fully_masked_slice_is_zero(self):
        w = T.softmax_axis(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=1,
                           mask=np.array([[False, False], [True, True]]))
        assert np.array_equal(w.values[0], [0.0, 0.0])
        assert not np.isnan(w.values).any()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.data())
    def test_unmasked_weights_sum_to_one(self, logits, data):
        mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(logits),
                                           max_size=len(logits))))
        w = T.softmax_axis(Tensor(logits), axis=0, mask=mask)
        if mask.any():
            assert abs(w.values.sum() - 1.0) <= 1e-12
        assert np.all(w.values[~mask] == 0.0)


class TestMaxReduce:
    def test_single_unmasked_entry(self):
        out = T.max_reduce(Tensor([5.0, -3.0, 7.0]), axis=0,
                           mask=np.array([False, True, False]))
        assert out.values == -3.0

    def test_tie_gradient_goes_to_first(self):
        x = Tensor([3.0, 5.0, 5.0], requires_grad=True)
        with Tape() as tape:
            out = T.max_reduce(x, axis=0)
        assert out.values == 5.0
        grads = tape.gradients(out)
        assert np.array_equal(grads[x], [0.0, 1.0, 0.0])

    def test_all_masked_gives_zero_and_no_grad(self):
        x = Tensor([3.0, 5.0], requires_grad=True)
        with Tape() as tape:
            out = T.sum_(T.max_reduce(x, axis=0, mask=np.array([False, False])))
        assert out.values == 0.0
        grads = tape.gradients(out)
        assert np.array_equal(grads[x], [0.0, 0.0])


class TestMlp:
    def test_zero_weights_zero_output(self):
        layers = [(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4))),
                  (Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))]
        out = T.mlp_forward(Tensor([[1.0, -2.0, 3.0]]), layers)
        assert np.array_equal(out.values, np.zeros((1, 2)))

    def test_single_layer_is_affine(self, rng):
        w = Tensor(rng.normal(size=(3, 2)))
        b = Tensor(rng.normal(size=2))
        x = rng.normal(size=(5, 3))
        out = T.mlp_forward(Tensor(x), [(w, b)])
        assert np.allclose(out.values, x @ w.values + b.values)

    def test_two_layer_hand_computation(self):
        w1 = Tensor([[1.0, -1.0], [0.5, 2.0]])
        b1 = Tensor([0.0, -1.0])
        w2 = Tensor([[1.0], [1.0]])
        b2 = Tensor([0.5])
        x = np.array([[2.0, 1.0]])
        h = np.maximum(x @ w1.values + b1.values, 0)  # [[2.5, 0.0]]
        expect = h @ w2.values + b2.values            # [[3.0]]
        out = T.mlp_forward(Tensor(x), [(w1, b1), (w2, b2)])
        assert np.allclose(out.values, expect)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            T.mlp_forward(Tensor(np.ones((1, 3))), [(Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))])


class TestBackward:
    def test_d_xx_dx(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.mul(x, x))
        grads = backward(loss, tape)
        assert np.allclose(grads[x], 2 * x.values)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ContractError):
            tape.gradients(y)

    def test_inputs_untouched(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        before = x.values.copy()
        with Tape() as tape:
            loss = T.sum_(T.exp(x))
        tape.gradients(loss)
        assert np.array_equal(x.values, before)

    @pytest.mark.parametrize("op", [
        lambda x: T.sum_(T.relu(x)),
        lambda x: T.sum_(T.exp(x)),
        lambda x: T.sum_(T.sigmoid(x)),
        lambda x: T.sum_(T.absolute(x)),
        lambda x: T.sum_(T.log(T.add(T.mul(x, x), 1.0))),
        lambda x: T.sum_(T.softmax_axis(x, axis=0)),
        lambda x: T.max_reduce(T.sum_(x, axis=1), axis=0),
        lambda x: T.sum_(T.concat([x, T.mul(x, 2.0)], axis=0)),
        lambda x: T.sum_(T.gather_rows(x, np.array([1, 0, -1, 1]))),
        lambda x: T.sum_(x[1:, :2]),
    ])
    def test_finite_difference_all_ops(self, op, rng):
        x = Tensor(rng.uniform(-1, 1, (3, 4)) + 0.03, requires_grad=True)
        with Tape() as tape:
            loss = op(x)
        grads = tape.gradients(loss)
        fd = finite_diff_grad(lambda: float(op(x).values), x.values)
        assert rel_err(grads[x], fd) <= 1e-4

    def test_deterministic_forward(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        w = Tensor(rng.normal(size=(4, 4)))
        a = T.matmul(T.relu(x), w).values
        b = T.matmul(T.relu(x), w).values
        assert np.array_equal(a, b)


class TestGatherRows:
    def test_negative_index_yields_zero_row(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        out = T.gather_rows(x, np.array([2, -1, 0]))
        assert np.array_equal(out.values, [[4.0, 5.0], [0.0, 0.0], [0.0, 1.0]])

    def test_scatter_add_gradient(self):
        x = Tensor(np.zeros((3, 2)), requires_grad=True)
        idx = np.array([0, 0, 2, -1])
        with Tape() as tape:
            loss = T.sum_(T.gather_rows(x, idx))
        grads = tape.gradients(loss)
        assert np.array_equal(grads[x], [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        st_ = OptimizerState()
        adam_step(p, {"w": np.zeros(2)}, st_, lr=0.1)
        assert np.allclose(p["w"].values, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        st_ = OptimizerState()
        adam_step(p, {"w": np.array([1.0])}, st_, lr=1e-3)
        # bias-corrected first step is -lr / (1 + eps)
        assert abs(p["w"].values[0] + 1e-3) < 1e-9

    def test_schedule_endpoint(self):
        sched = LrSchedule(initial=1e-3, final_fraction=0.01, total_epochs=300)
        assert sched.at(0) == 1e-3
        assert abs(sched.at(300) - 1e-5) < 1e-18
        assert sched.at(400) == sched.at(300)

    def test_moment_shapes_follow_params(self):
        p = {"w": Tensor(np.ones((2, 3)), requires_grad=True)}
        st_ = OptimizerState()
        adam_step(p, {"w": np.ones((2, 3))}, st_, lr=0.1)
        assert st_.m["w"].shape == (2, 3)
        assert st_.step == 1
        with pytest.raises(ShapeError):
            adam_step(p, {"w": np.ones(3)}, st_, lr=0.1)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"a/w": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
                  "b": Tensor(rng.normal(size=5), requires_grad=True)}
        state = OptimizerState(schedule=LrSchedule(2e-3, 0.05, 120), step=17)
        state.m = {"a/w": rng.normal(size=(3, 2)), "b": rng.normal(size=5)}
        state.v = {"a/w": rng.normal(size=(3, 2)) ** 2, "b": rng.normal(size=5) ** 2}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, state)
        loaded, lstate = load_checkpoint(path)
        for k in params:
            assert np.array_equal(loaded[k], params[k].values)
        assert lstate.step == 17
        assert lstate.schedule.initial == 2e-3
        assert lstate.schedule.total_epochs == 120
        for k in state.m:
            assert np.array_equal(lstate.m[k], state.m[k])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(T.CheckpointError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": Tensor(np.ones(4))}, None)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(T.CheckpointError):
            load_checkpoint(path)
