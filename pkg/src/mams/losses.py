"""Multi-label losses: binary cross-entropy (stage 1) and Asymmetric Loss (stage 2).

Both reduce by the mean over all N*K elements and are fused ops with
closed-form gradients with respect to the logits.

ASL per element, with p = sigmoid(logit) and p_s = max(p - shift, 0)::

    y = 1:  -(1 - p)^gamma_pos * log(p)
    y = 0:  -p_s^gamma_neg * log(1 - p_s)

Defaults gamma_pos=0, gamma_neg=4, shift=0.05 follow the original ASL
formulation; they are assumptions, not values from the method description.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, InputError
from .tensor import Tensor


@dataclass
class LossConfig:
    kind: str = "bce"
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    prob_shift: float = 0.05

    def validate(self) -> None:
        if self.kind not in ("bce", "asl"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind == "asl":
            if self.gamma_pos < 0 or self.gamma_neg < 0:
                raise ConfigError("focusing exponents must be nonnegative")
            if not 0.0 <= self.prob_shift < 1.0:
                raise ConfigError(f"prob_shift must lie in [0, 1), got {self.prob_shift}")


def _targets(logits: Tensor, targets) -> np.ndarray:
    y = np.asarray(getattr(targets, "data", targets), dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"targets shape {y.shape} does not match logits {logits.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InputError("targets must be binary (0/1)")
    return y


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    y = _targets(logits, targets)
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    grad = (expit(x) - y) / n
    return Tensor._from_op(per.mean(), (logits,), lambda g: (g * grad,), "bce")


def asymmetric_loss(
    logits: Tensor,
    targets,
    gamma_pos: float = 0.0,
    gamma_neg: float = 4.0,
    prob_shift: float = 0.05,
) -> Tensor:
    LossConfig("asl", gamma_pos, gamma_neg, prob_shift).validate()
    y = _targets(logits, targets)
    x = logits.data
    p = expit(x)
    one_minus_p = expit(-x)

    # positive part: -(1-p)^g+ log p,  log p = -softplus(-x)
    log_p = -_softplus(-x)
    w_pos = one_minus_p ** gamma_pos
    loss_pos = -w_pos * log_p
    # d/dx = (1-p)^g+ * (g+ * p * log p - (1-p))
    grad_pos = w_pos * (gamma_pos * p * log_p - one_minus_p)

    # negative part on the shifted probability
    if prob_shift == 0.0:
        q = p
        log_1mq = -_softplus(x)
        ratio = np.ones_like(x)  # (1-p)/(1-q)
    else:
        q = np.maximum(p - prob_shift, 0.0)
        log_1mq = np.log1p(-q)
        ratio = one_minus_p / (1.0 - q)
    active = q > 0.0
    qg = np.where(active, q, 1.0) ** gamma_neg
    loss_neg = np.where(active, -qg * log_1mq, 0.0)
    # dL/dq = q^g/(1-q) - g q^(g-1) log(1-q);  dq/dx = p(1-p) on the active side
    if gamma_neg == 0.0:
        dterm = 0.0
    else:
        dterm = gamma_neg * np.where(active, q, 1.0) ** (gamma_neg - 1.0) * log_1mq * p * one_minus_p
    grad_neg = np.where(active, qg * p * ratio - dterm, 0.0)

    per = np.where(y == 1.0, loss_pos, loss_neg)
    n = x.size
    grad = np.where(y == 1.0, grad_pos, grad_neg) / n
    return Tensor._from_op(per.mean(), (logits,), lambda g: (g * grad,), "asl")


def compute_loss(config: LossConfig, logits: Tensor, targets) -> Tensor:
    config.validate()
    if config.kind == "bce":
        return bce_with_logits(logits, targets)
    return asymmetric_loss(logits, targets, config.gamma_pos, config.gamma_neg, config.prob_shift)
