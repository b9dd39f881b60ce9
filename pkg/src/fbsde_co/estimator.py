"""scikit-learn style wrappers around the training loops.

The estimators carry no data: ``fit`` simulates its own Brownian paths, so
``X`` and ``y`` are accepted only for API compatibility and ignored.
``predict`` evaluates the trained leader controls at given states.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffcore as dc
from .optim import OptimizerConfig
from .problems import classical_equivalent, get_preset, paper_market
from .trainer import (TrainingConfig, classical_train, co_train, evaluate, make_test_batch,
                      penalty_train)


class _Solver(BaseEstimator):
    """Shared plumbing; subclasses spell out their parameters in ``__init__``."""

    def _config(self):
        config = TrainingConfig(
            kappa=getattr(self, "kappa", 1), maxstep=self.maxstep, m_train=self.m_train,
            m_test=self.m_test, time_points=self.time_points,
            leader_opt=OptimizerConfig(lr=self.lr_leader), follower_opt=OptimizerConfig(lr=self.lr_follower),
            penalty_opt=OptimizerConfig(lr=self.lr_leader), seed=self.seed,
            eval_interval=self.eval_interval, precision=self.precision, eval_bn=self.eval_bn)
        return config.with_decay(self.lr_decay, self.lr_decay_stages)

    def _problem(self):
        return get_preset(self.problem, self.n, self.T)

    def _finish(self, problem, nets, history, config):
        self.problem_, self.nets_, self.history_, self.config_ = problem, nets, history, config
        last = history[-1]
        self.inte_y0_, self.para_y0_, self.distance_ = last.inte_y0, last.para_y0, last.distance
        self.n_features_in_ = problem.n
        return self

    def predict(self, X, t=0.0):
        """Leader controls at states ``X`` (n_samples, n) and time ``t``.

        Returns the concatenated control outputs, e.g. ``(pi, c)`` for the
        market problem, shaped (n_samples, k).
        """
        check_is_fitted(self, "nets_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.problem_.n:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.problem_.n}")
        if not 0.0 <= t <= self.problem_.T:
            raise ValueError(f"t must lie in [0, {self.problem_.T}]")
        dtype = self.config_.dtype
        tape = dc.Tape(dtype=dtype, grad=False)
        scaled = X / self.problem_.state_scale
        inp = np.hstack([np.full((X.shape[0], 1), t / self.problem_.T), scaled])
        outs = []
        for role in self.problem_.leader_roles:
            net = self.nets_[role]
            saved = net.params.mode
            net.params.mode = self.eval_bn
            try:
                outs.append(net(tape.constant(inp), tape).value)
            finally:
                net.params.mode = saved
        return np.hstack(outs).astype(np.float64)

    def evaluate(self, seed=None):
        """Training-record metrics on a fresh test batch (``seed`` defaults to the fit seed)."""
        check_is_fitted(self, "nets_")
        config = self.config_ if seed is None else replace(self.config_, seed=seed)
        grid, batch = make_test_batch(self.problem_, config)
        return evaluate(self.nets_, self.problem_, batch, grid, bn_mode=self.eval_bn)

    def score(self, X=None, y=None):
        """Integral-form value of the leader objective on the test batch (higher is better)."""
        check_is_fitted(self, "nets_")
        return float(self.evaluate().inte_y0)


class COSolver(_Solver):
    """Cross-optimization: ``kappa`` follower updates per leader update.

    Parameters
    ----------
    problem : str
        Preset name, see ``problems.PRESETS``.
    n, T : int, float
        Number of risky assets (state dimension for generic presets) and horizon.
    kappa : int, str or Fraction
        Follower-to-leader update ratio; ``"1/9"`` style strings are accepted.
    lr_decay, lr_decay_stages : float or None, int or None
        Optional step decay applied separately to each optimizer.

    Attributes
    ----------
    nets_ : dict of Network
    history_ : list of TrainingRecord
    inte_y0_, para_y0_, distance_ : float
        Terminal metrics.
    """

    def __init__(self, problem="paper-market-linear", n=10, T=0.25, kappa=19, maxstep=18000,
                 m_train=64, m_test=512, time_points=25, lr_leader=5e-3, lr_follower=1e-2,
                 lr_decay=None, lr_decay_stages=None, seed=0, eval_interval=20, precision="f64",
                 eval_bn="batch"):
        self.problem = problem
        self.n = n
        self.T = T
        self.kappa = kappa
        self.maxstep = maxstep
        self.m_train = m_train
        self.m_test = m_test
        self.time_points = time_points
        self.lr_leader = lr_leader
        self.lr_follower = lr_follower
        self.lr_decay = lr_decay
        self.lr_decay_stages = lr_decay_stages
        self.seed = seed
        self.eval_interval = eval_interval
        self.precision = precision
        self.eval_bn = eval_bn

    def fit(self, X=None, y=None):
        problem, config = self._problem(), self._config()
        nets, history = co_train(problem, config)
        return self._finish(problem, nets, history, config)


class PenaltySolver(_Solver):
    """Joint minimization of ``J_leader + mu * J_follower`` with one optimizer (rate ``lr_leader``)."""

    def __init__(self, problem="paper-market-linear", n=10, T=0.25, mu=1.0, maxstep=18000,
                 m_train=64, m_test=512, time_points=25, lr_leader=5e-3, lr_follower=1e-2,
                 lr_decay=None, lr_decay_stages=None, seed=0, eval_interval=20, precision="f64",
                 eval_bn="batch"):
        self.problem = problem
        self.n = n
        self.T = T
        self.mu = mu
        self.maxstep = maxstep
        self.m_train = m_train
        self.m_test = m_test
        self.time_points = time_points
        self.lr_leader = lr_leader
        self.lr_follower = lr_follower
        self.lr_decay = lr_decay
        self.lr_decay_stages = lr_decay_stages
        self.seed = seed
        self.eval_interval = eval_interval
        self.precision = precision
        self.eval_bn = eval_bn

    def fit(self, X=None, y=None):
        problem, config = self._problem(), self._config()
        nets, history = penalty_train(problem, config, self.mu)
        return self._finish(problem, nets, history, config)


class ClassicalSolver(_Solver):
    """Direct maximization of discounted utility; only defined for the linear driver."""

    def __init__(self, n=10, T=0.25, maxstep=18000, m_train=64, m_test=512, time_points=25,
                 lr_leader=5e-3, lr_follower=1e-2, lr_decay=None, lr_decay_stages=None, seed=0,
                 eval_interval=20, precision="f64", eval_bn="batch", discount="euler"):
        self.n = n
        self.T = T
        self.maxstep = maxstep
        self.m_train = m_train
        self.m_test = m_test
        self.time_points = time_points
        self.lr_leader = lr_leader
        self.lr_follower = lr_follower
        self.lr_decay = lr_decay
        self.lr_decay_stages = lr_decay_stages
        self.seed = seed
        self.eval_interval = eval_interval
        self.precision = precision
        self.eval_bn = eval_bn
        self.discount = discount

    def fit(self, X=None, y=None):
        config = self._config()
        params = paper_market(self.n, self.T, "linear")
        nets, history = classical_train(params, config, self.discount)
        problem = classical_equivalent(params, config.time_points, self.discount)
        return self._finish(problem, nets, history, config)
