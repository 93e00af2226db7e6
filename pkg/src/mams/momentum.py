"""EMA momentum branch: per-step update, closed-form oracle, unrolled-gradient check.

The update after every optimizer step is

    eps_t = m * eps_{t-1} + (1 - m) * theta_{t-1}

Unrolled over a plain-SGD trajectory (theta_t = theta_{t-1} - eta * g_{t-1}) the
gap d_t = eps_t - theta_t obeys d_t = m * d_{t-1} + eta * g_{t-1}, so

    eps_t = theta_t + sum_{i=1}^{t-1} m^(i-1) * eta * g_{t-i} + m^(t-1) * (eps_1 - theta_1)   (exact)

The commonly quoted approximation uses m^i and m^t instead of m^(i-1) and
m^(t-1); :func:`verify_unrolled_approximation` measures how far that form is
from the true EMA state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, UsageError


@dataclass
class EmaState:
    """EMA parameters ``epsilon`` that mirror a list of live parameters ``theta``.

    ``epsilon`` holds numpy arrays updated in place. ``buffers`` optionally holds
    (target, source) pairs of non-trainable arrays (BN running stats) tracked by the
    same rule. With ``record=True`` every theta fed to the update is kept in
    ``history`` for the closed-form oracle.
    """

    m: float
    epsilon: List[np.ndarray]
    t: int = 0
    record: bool = False
    history: List[List[np.ndarray]] = field(default_factory=list)
    epsilon_initial: List[np.ndarray] = field(default_factory=list)
    buffers: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ConfigError(f"momentum coefficient must lie in [0, 1), got {self.m}")
        if not self.epsilon_initial:
            self.epsilon_initial = [e.copy() for e in self.epsilon]


def ema_state_for(model, m: float = 0.999, record: bool = False) -> EmaState:
    """EmaState bound to ``model.momentum``; its arrays are the model's own buffers."""
    if model.momentum is None:
        raise UsageError("model was built without a momentum branch")
    eps = [p.data for p in model.momentum.params()]
    pairs = list(zip(model.momentum.buffers(), model.expansion.buffers()))
    return EmaState(m=m, epsilon=eps, record=record, buffers=pairs)


def _blend(target: np.ndarray, source: np.ndarray, m: float) -> None:
    if m == 0.0:
        target[...] = source
    else:
        # lerp form keeps a fixed point exact when target == source
        target += (1.0 - m) * (source - target)


def ema_update(state: EmaState, theta: Sequence) -> None:
    """One EMA step toward ``theta`` (arrays or Tensors); call once per optimizer step."""
    arrays = [getattr(p, "data", p) for p in theta]
    if len(arrays) != len(state.epsilon):
        raise CorruptionError(f"EMA expects {len(state.epsilon)} tensors, got {len(arrays)}")
    for e, a in zip(state.epsilon, arrays):
        if e.shape != np.shape(a):
            raise CorruptionError(f"EMA shape mismatch: epsilon {e.shape} vs theta {np.shape(a)}")
    if state.record:
        state.history.append([np.array(a, dtype=np.float64, copy=True) for a in arrays])
    for e, a in zip(state.epsilon, arrays):
        _blend(e, np.asarray(a, dtype=np.float64), state.m)
    for target, source in state.buffers:
        _blend(target, source, state.m)
    state.t += 1


def ema_closed_form(theta_history: Sequence, epsilon1, m: float, t: int):
    """eps_t = m^(t-1) eps_1 + (1-m) sum_{i=1}^{t-1} m^(t-1-i) theta_i.

    ``theta_history[i-1]`` is theta_i. Works on scalars, arrays, or lists of arrays
    (one per parameter tensor).
    """
    if t < 1:
        raise UsageError("t counts from 1")
    if len(theta_history) < t - 1:
        raise UsageError(f"closed form at t={t} needs {t - 1} theta snapshots, got {len(theta_history)}")
    if isinstance(epsilon1, (list, tuple)):
        return [
            ema_closed_form([h[k] for h in theta_history[: t - 1]], epsilon1[k], m, t)
            for k in range(len(epsilon1))
        ]
    out = (m ** (t - 1)) * np.asarray(epsilon1, dtype=np.float64)
    for i in range(1, t):
        out = out + (1.0 - m) * (m ** (t - 1 - i)) * np.asarray(theta_history[i - 1], dtype=np.float64)
    return out


@dataclass
class SgdRun:
    """Recorded trajectory: thetas[k] is theta_{k+1}, grads[k] the gradient at theta_{k+1},
    epsilons[k] the true EMA state eps_{k+1}."""

    eta: float
    m: float
    thetas: List[np.ndarray]
    grads: List[np.ndarray]
    epsilons: List[np.ndarray]
    optimizer: str = "sgd"


def record_sgd_run(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    eta: float,
    m: float,
    steps: int,
) -> SgdRun:
    """Plain SGD from theta0 with EMA tracking, eps_0 = theta_0.

    The first recorded pair (eps_1, theta_1) is the state after one step.
    """
    theta = np.array(theta0, dtype=np.float64)
    state = EmaState(m=m, epsilon=[theta.copy()])
    thetas, grads, eps = [], [], []
    g = np.asarray(grad_fn(theta), dtype=np.float64)
    for _ in range(steps):
        theta_prev = theta
        theta = theta_prev - eta * g
        ema_update(state, [theta_prev])
        g = np.asarray(grad_fn(theta), dtype=np.float64)
        thetas.append(theta.copy())
        grads.append(g.copy())
        eps.append(state.epsilon[0].copy())
    return SgdRun(eta=eta, m=m, thetas=thetas, grads=grads, epsilons=eps)


def unrolled_rhs(run: SgdRun, t: int) -> np.ndarray:
    """theta_t + sum_{i=1}^{t-1} m^i eta grad(theta_{t-i}) + m^t (eps_1 - theta_1)."""
    m, eta = run.m, run.eta
    theta = lambda k: run.thetas[k - 1]  # noqa: E731
    grad = lambda k: run.grads[k - 1]  # noqa: E731
    out = theta(t) + (m ** t) * (run.epsilons[0] - run.thetas[0])
    for i in range(1, t):
        out = out + (m ** i) * eta * grad(t - i)
    return out


def unrolled_exact(run: SgdRun, t: int) -> np.ndarray:
    """Same expansion with the exponents that make it an identity (m^(i-1), m^(t-1))."""
    m, eta = run.m, run.eta
    out = run.thetas[t - 1] + (m ** (t - 1)) * (run.epsilons[0] - run.thetas[0])
    for i in range(1, t):
        out = out + (m ** (i - 1)) * eta * run.grads[t - i - 1]
    return out


@dataclass
class ResidualReport:
    eta: float
    steps: List[int]
    max_residual: List[float]
    mean_residual: List[float]

    @property
    def worst(self) -> float:
        return max(self.max_residual) if self.max_residual else 0.0

    def rows(self):
        for s, mx, mn in zip(self.steps, self.max_residual, self.mean_residual):
            yield {"step": s, "eta": self.eta, "max_residual": mx, "mean_residual": mn}


def residuals(run: SgdRun) -> ResidualReport:
    if run.optimizer != "sgd":
        raise UsageError("the unrolled approximation assumes plain SGD; this run used " + run.optimizer)
    steps, mx, mn = [], [], []
    for t in range(1, len(run.thetas) + 1):
        r = np.abs(run.epsilons[t - 1] - unrolled_rhs(run, t))
        steps.append(t)
        mx.append(float(r.max()))
        mn.append(float(r.mean()))
    return ResidualReport(run.eta, steps, mx, mn)


@dataclass
class QuadraticProblem:
    """L(theta) = 0.5 theta^T A theta - b^T theta with A symmetric positive definite."""

    a: np.ndarray
    b: np.ndarray
    theta0: np.ndarray

    @classmethod
    def random(cls, dim: int = 8, seed: int = 0) -> "QuadraticProblem":
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        a = q @ np.diag(rng.uniform(0.5, 5.0, size=dim)) @ q.T
        return cls(a=0.5 * (a + a.T), b=rng.normal(size=dim), theta0=rng.normal(size=dim) * 3.0)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.a @ theta - self.b


def verify_unrolled_approximation(
    etas: Sequence[float] = (1e-3, 5e-4, 2.5e-4),
    m: float = 0.9,
    steps: int = 50,
    problem: Optional[QuadraticProblem] = None,
    runs: Optional[Dict[float, SgdRun]] = None,
) -> Dict:
    """Residual of the unrolled form against the true EMA state, for each learning rate.

    Either trains ``problem`` with plain SGD at every eta or takes pre-recorded
    ``runs``. ``monotone`` is True when the worst-case residual strictly
    decreases along ``etas`` (which should be in decreasing order).
    """
    if runs is None:
        problem = problem or QuadraticProblem.random()
        runs = {eta: record_sgd_run(problem.grad, problem.theta0, eta, m, steps) for eta in etas}
    reports = [residuals(runs[eta]) for eta in etas]
    worst = [r.worst for r in reports]
    monotone = all(a > b for a, b in zip(worst, worst[1:]))
    return {"reports": reports, "worst": worst, "monotone": monotone}
