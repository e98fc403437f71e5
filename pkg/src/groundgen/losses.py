"""Query-to-entity InfoNCE, masked next-token loss, and their weighted sum.

Every loss returns its value together with analytic gradients. Softmaxes are
stabilized by subtracting the row maximum before exponentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from groundgen.errors import EmptyTargetError, NumericError

TAU_MIN = 0.01
TAU_MAX = 1.0
TAU_INIT = 0.07
DEFAULT_LAMBDA_R = 1.0
UNIT_TOL = 1e-5


@dataclass
class Temperature:
    log_tau: float = math.log(TAU_INIT)

    def __post_init__(self) -> None:
        self.clamp()

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    def clamp(self) -> None:
        self.log_tau = min(max(self.log_tau, math.log(TAU_MIN)), math.log(TAU_MAX))


@dataclass
class ContrastiveBatch:
    Q: np.ndarray
    E: np.ndarray

    def __post_init__(self) -> None:
        if self.Q.ndim != 2 or self.Q.shape != self.E.shape or self.Q.shape[0] < 1:
            raise ValueError("Q and E must both be N x d with N >= 1")
        for name, m in (("Q", self.Q), ("E", self.E)):
            if np.any(np.abs(np.linalg.norm(m, axis=1) - 1.0) > UNIT_TOL):
                raise ValueError(f"rows of {name} must be unit norm")


@dataclass
class LmBatch:
    logits: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self) -> None:
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        T = self.logits.shape[0]
        if self.targets.shape != (T,) or self.loss_mask.shape != (T,):
            raise ValueError("targets and loss_mask must have one entry per logits row")


@dataclass
class LossReport:
    lm_loss: float
    contrastive_loss: float
    total: float
    lambda_r: float
    tau: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _row_nll(S: np.ndarray) -> np.ndarray:
    # -log softmax at the diagonal, via log1p when the positive is the row max
    # so that a dominant positive still yields a strictly positive loss
    rel = S - np.diag(S)[:, None]
    np.fill_diagonal(rel, -np.inf)
    top = rel.max(axis=1)
    out = np.empty(S.shape[0])
    lead = top <= 0
    out[lead] = np.log1p(np.sum(np.exp(rel[lead]), axis=1))
    if np.any(~lead):
        r = rel[~lead]
        m = top[~lead][:, None]
        out[~lead] = m[:, 0] + np.log(np.exp(-m[:, 0]) + np.sum(np.exp(r - m), axis=1))
    return out


def infonce_loss(Q: np.ndarray, E: np.ndarray, log_tau: float) -> tuple[float, dict[str, np.ndarray]]:
    """Mean over i of -log softmax_j(cos(Q_i, E_j) / tau) at j = i.

    Only the query-to-entity direction is computed. Gradients are returned for
    ``Q``, ``E`` (through the cosine normalization) and ``log_tau``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    n = Q.shape[0]
    qn = np.linalg.norm(Q, axis=1, keepdims=True)
    en = np.linalg.norm(E, axis=1, keepdims=True)
    Qu, Eu = Q / qn, E / en
    tau = math.exp(log_tau)
    cos = Qu @ Eu.T
    S = cos / tau
    if not np.all(np.isfinite(S)):
        raise NumericError("non-finite similarity in contrastive batch")
    logp = _log_softmax(S)
    loss = float(np.sum(_row_nll(S))) / n
    dS = (np.exp(logp) - np.eye(n)) / n
    d_cos = dS / tau
    dQu = d_cos @ Eu
    dEu = d_cos.T @ Qu
    dQ = (dQu - Qu * np.sum(Qu * dQu, axis=1, keepdims=True)) / qn
    dE = (dEu - Eu * np.sum(Eu * dEu, axis=1, keepdims=True)) / en
    d_log_tau = -float(np.sum(dS * S))
    return loss, {"Q": dQ, "E": dE, "log_tau": np.array(d_log_tau)}


def infonce(batch: ContrastiveBatch, temp: Temperature) -> tuple[float, dict[str, np.ndarray]]:
    return infonce_loss(batch.Q, batch.E, temp.log_tau)


def masked_lm_loss(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood of ``targets`` over rows where ``mask`` holds.

    Rows outside the mask get exactly zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyTargetError("loss mask selects no target positions")
    rows = np.flatnonzero(mask)
    logp = _log_softmax(logits[rows])
    picked = logp[np.arange(rows.size), targets[rows]]
    loss = -float(np.sum(picked)) / count
    if not math.isfinite(loss):
        raise NumericError("non-finite language-model loss")
    grad = np.zeros_like(logits)
    g = np.exp(logp)
    g[np.arange(rows.size), targets[rows]] -= 1.0
    grad[rows] = g / count
    return loss, {"logits": grad}


def lm_loss(batch: LmBatch) -> tuple[float, dict[str, np.ndarray]]:
    return masked_lm_loss(batch.logits, batch.targets, batch.loss_mask)


def combined_loss(lm: float, contrastive: float, lambda_r: float = DEFAULT_LAMBDA_R) -> float:
    return lm + lambda_r * contrastive
