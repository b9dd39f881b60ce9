import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fbsde_co import ClassicalSolver, COSolver, PenaltySolver

TINY = dict(n=2, maxstep=4, m_train=8, m_test=16, time_points=3, eval_interval=2)


@pytest.mark.parametrize("cls", [COSolver, PenaltySolver, ClassicalSolver])
def test_params_round_trip_through_clone(cls):
    est = cls(**TINY)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    twin.set_params(seed=5)
    assert twin.seed == 5 and est.seed == 0


def test_co_solver_fit_predict_score():
    est = COSolver(kappa=1, **TINY).fit()
    assert len(est.history_) == 3
    out = est.predict(np.array([[100.0], [90.0]]), t=0.1)
    assert out.shape == (2, 4)
    np.testing.assert_allclose(out[:, :3].sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out[:, 3] >= 0)
    assert est.score() == pytest.approx(est.inte_y0_)
    assert est.evaluate(seed=3).inte_y0 != est.inte_y0_
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 3)))
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 1)), t=5.0)


def test_unfitted_predict():
    with pytest.raises(NotFittedError):
        COSolver().predict(np.ones((1, 1)))


def test_penalty_and_classical_fit():
    assert np.isfinite(PenaltySolver(mu=2.0, **TINY).fit().distance_)
    clas = ClassicalSolver(**TINY).fit()
    assert np.isfinite(clas.inte_y0_) and np.isnan(clas.para_y0_)


def test_decay_is_passed_to_config():
    est = COSolver(kappa=1, lr_decay=0.5, lr_decay_stages=2, **TINY).fit()
    assert est.config_.leader_opt.decay_factor == 0.5
