import numpy as np
import pytest

from ktup.embeddings import init_space
from ktup.optim import Optimizer, SparseGrad


def scalar_space(theta=1.0):
    s = init_space({"U": 2}, 1, dtype=np.float64)
    s.U[...] = theta
    return s


def step(opt, s, g, row=0):
    opt.step(s, {"U": (np.array([row]), np.array([[g]]))})


class TestUpdates:
    def test_sgd(self):
        s = scalar_space()
        step(Optimizer("sgd", 0.1), s, 1.0)
        assert s.U[0, 0] == pytest.approx(0.9)

    def test_adagrad_first_step(self):
        s = scalar_space()
        g, lr = 0.3, 0.5
        step(Optimizer("adagrad", lr), s, g)
        assert s.U[0, 0] == pytest.approx(1.0 - lr / np.sqrt(g * g + 1e-10) * g, rel=1e-15)

    def test_adam_three_step_trace(self):
        s = scalar_space()
        grads = [0.5, -0.2, 0.1]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        theta, m, v = 1.0, 0.0, 0.0
        opt = Optimizer("adam", lr)
        for t, g in enumerate(grads, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            step(opt, s, g)
            assert s.U[0, 0] == pytest.approx(theta, rel=1e-14)

    def test_untouched_rows_bit_identical(self):
        s = init_space({"U": 5, "I": 3}, 4, seed=1)
        before = s.copy()
        opt = Optimizer("adam", 0.1)
        for _ in range(3):
            opt.step(s, {"U": (np.array([2]), np.ones((1, 4)))})
        assert np.array_equal(np.delete(s.U, 2, 0), np.delete(before.U, 2, 0))
        assert np.array_equal(s.I, before.I)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Optimizer("rmsprop")


class TestSparseGrad:
    def test_duplicates_summed(self):
        g = SparseGrad()
        g.add("E", [1, 3, 1], np.array([[1.0], [2.0], [4.0]]))
        g.add("E", [3], np.array([[0.5]]))
        idx, rows = g.coalesce()["E"]
        assert idx.tolist() == [1, 3] and rows.ravel().tolist() == [5.0, 2.5]

    def test_empty_add_ignored(self):
        g = SparseGrad()
        g.add("U", [], np.zeros((0, 2)))
        assert g.coalesce() == {}
