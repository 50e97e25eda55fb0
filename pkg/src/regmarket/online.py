"""Recursive estimators with exponential forgetting, one per coalition.

Each step applies the three-equation Newton-Raphson update

    eps = y_t - beta' x_t
    M   = lam * M + x_t x_t' * h2(eps)
    beta = beta + M^{-1} x_t * h1(eps)

where the residual is the one-step-ahead (prior) residual.  The memory
solve goes through a Cholesky factorisation, which doubles as the
positive-definiteness assertion behind the feasibility of the step.

Warm start fits a small batch slice and initialises the memory to the
lambda-weighted h2 Gram of that slice, exactly what the recursion itself
would have produced over those rows.  Zero start accumulates memory and a
gradient vector until enough independent rows arrived, then takes one
accumulated Newton step; with a quadratic loss and lam = 1 this makes the
whole stream reproduce batch least squares to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
import scipy.linalg

from .batch import fit_matrix
from .data import AugmentedDesign
from .errors import ParameterError, SingularUpdateError
from .losses import EwmaLoss, LossSpec, ewma_update, insample_loss, loss_h1, loss_h2, loss_value

WARM_START = "warm-start"
ZERO_START = "zero-start"
CONDITION_CHECK_EVERY = 1000


@dataclass(frozen=True)
class OnlineState:
    """Estimator state for one coalition design."""

    coefficients: np.ndarray
    memory: np.ndarray
    ewma: EwmaLoss
    step_count: int = 0
    ready: bool = True
    pending_gradient: np.ndarray | None = None
    min_warm_steps: int = 0
    last_condition: float = 0.0

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]


def _lambda_weighted_gram(X: np.ndarray, weights: np.ndarray, lam: float) -> np.ndarray:
    T = X.shape[0]
    decay = lam ** np.arange(T - 1, -1, -1, dtype=float)
    W = weights * decay
    return (X.T * W) @ X


def init_state(X_warm: np.ndarray | None, y_warm: np.ndarray | None,
               policy: str, spec: LossSpec, lam: float, n: int | None = None,
               min_warm: int = 100) -> OnlineState:
    """Build the initial state from a warm-up slice or from nothing.

    Warm start requires the slice to cover at least ``max(n, min_warm)``
    rows.  Zero start defers coefficient updates until 2n rows (at least)
    have accumulated a positive-definite memory.
    """
    if policy == ZERO_START:
        if n is None:
            raise ParameterError("zero-start needs the design dimension n")
        return OnlineState(coefficients=np.zeros(n), memory=np.zeros((n, n)),
                           ewma=EwmaLoss(0.0, lam), ready=False,
                           pending_gradient=np.zeros(n),
                           min_warm_steps=max(2 * n, 2))
    if policy != WARM_START:
        raise ParameterError(f"unknown initialisation policy {policy!r}")
    if X_warm is None or y_warm is None:
        raise ParameterError("warm-start needs a warm-up slice")
    X_warm = np.asarray(X_warm, dtype=float)
    y_warm = np.asarray(y_warm, dtype=float)
    dim = X_warm.shape[1]
    need = max(dim, min_warm)
    if X_warm.shape[0] < need:
        raise ParameterError(
            f"warm-start slice has {X_warm.shape[0]} rows, needs >= {need}")
    fit = fit_matrix(X_warm, y_warm, spec)
    res = y_warm - X_warm @ fit.coefficients
    memory = _lambda_weighted_gram(X_warm, loss_h2(res, spec), lam)
    memory = 0.5 * (memory + memory.T)
    return OnlineState(coefficients=fit.coefficients, memory=memory,
                       ewma=EwmaLoss(insample_loss(res, spec), lam))


def online_step(state: OnlineState, x_row: np.ndarray, y_t: float,
                lam: float, spec: LossSpec) -> tuple[OnlineState, float, float]:
    """Advance one observation; returns (new state, prior residual, loss)."""
    x = np.asarray(x_row, dtype=float)
    if not np.all(np.isfinite(x)) or not np.isfinite(y_t):
        raise ParameterError("online step needs finite data")
    eps = float(y_t - state.coefficients @ x)
    l_t = float(loss_value(eps, spec))
    h2 = loss_h2(eps, spec)
    memory = lam * state.memory + np.outer(x, x) * h2
    memory = 0.5 * (memory + memory.T)
    steps = state.step_count + 1
    condition = state.last_condition
    if steps % CONDITION_CHECK_EVERY == 0:
        condition = float(np.linalg.cond(memory))

    if not state.ready:
        gradient = lam * state.pending_gradient + x * loss_h1(eps, spec)
        if steps >= state.min_warm_steps:
            try:
                chol = np.linalg.cholesky(memory)
            except np.linalg.LinAlgError:
                chol = None
            if chol is not None:
                beta = scipy.linalg.cho_solve((chol, True), gradient)
                new = OnlineState(beta, memory, ewma_update(state.ewma, l_t),
                                  step_count=steps, last_condition=condition)
                return new, eps, l_t
        new = replace(state, memory=memory, pending_gradient=gradient,
                      ewma=ewma_update(state.ewma, l_t), step_count=steps,
                      last_condition=condition)
        return new, eps, l_t

    try:
        chol = np.linalg.cholesky(memory)
    except np.linalg.LinAlgError:
        raise SingularUpdateError("memory matrix not positive definite",
                                  step=steps) from None
    beta = state.coefficients + scipy.linalg.cho_solve(
        (chol, True), x * loss_h1(eps, spec))
    new = OnlineState(beta, memory, ewma_update(state.ewma, l_t),
                      step_count=steps, last_condition=condition)
    return new, eps, l_t


class OnlineSession:
    """Parallel online estimators for every coalition of one task.

    All coalition states share the forgetting factor, loss spec and time
    index; each step advances every coalition on its own design columns.
    """

    def __init__(self, design: AugmentedDesign, central: frozenset[str],
                 coalitions: list[frozenset], lam: float, spec: LossSpec):
        self.lam = lam
        self.spec = spec
        self.central = central
        self.columns = {c: design.columns_for(central | c) for c in coalitions}
        self.term_names = {c: tuple(design.terms[i].name for i in self.columns[c])
                           for c in coalitions}
        self.states: dict[frozenset, OnlineState] = {}

    @property
    def coalitions(self) -> list[frozenset]:
        return list(self.columns)

    def init_states(self, X_warm: np.ndarray | None, y_warm: np.ndarray | None,
                    policy: str, min_warm: int = 100) -> None:
        for c, idx in self.columns.items():
            slice_ = None if X_warm is None else X_warm[:, list(idx)]
            self.states[c] = init_state(slice_, y_warm, policy, self.spec,
                                        self.lam, n=len(idx), min_warm=min_warm)

    def step(self, x_row: np.ndarray, y_t: float) -> dict[frozenset, tuple[float, float]]:
        """Advance all coalitions one step on the full augmented row."""
        if len(self.states) != len(self.columns):
            raise ParameterError("session states not initialised")
        out: dict[frozenset, tuple[float, float]] = {}
        for c, idx in self.columns.items():
            try:
                self.states[c], eps, l_t = online_step(
                    self.states[c], x_row[list(idx)], y_t, self.lam, self.spec)
            except SingularUpdateError as err:
                raise SingularUpdateError(
                    f"coalition {sorted(c)}: {err}", step=err.step) from err
            out[c] = (eps, l_t)
        return out

    def ewma_losses(self) -> dict[frozenset, float]:
        return {c: s.ewma.value for c, s in self.states.items()}

    # -- checkpointing ----------------------------------------------------

    def to_snapshot(self) -> dict:
        coalitions = sorted(self.columns, key=lambda c: (len(c), sorted(c)))
        return {
            "format": "regmarket-online-session",
            "version": 1,
            "lam": self.lam,
            "loss": {"family": self.spec.family, "tau": self.spec.tau,
                     "alpha": self.spec.alpha,
                     "derivative_variant": self.spec.derivative_variant},
            "central": sorted(self.central),
            "coalitions": [
                {
                    "members": sorted(c),
                    "terms": list(self.term_names[c]),
                    "coefficients": self.states[c].coefficients.tolist(),
                    "memory": self.states[c].memory.tolist(),
                    "ewma_loss": self.states[c].ewma.value,
                    "step_count": self.states[c].step_count,
                    "ready": self.states[c].ready,
                    "pending_gradient": None if self.states[c].pending_gradient is None
                    else self.states[c].pending_gradient.tolist(),
                    "min_warm_steps": self.states[c].min_warm_steps,
                }
                for c in coalitions
            ],
        }

    @classmethod
    def from_snapshot(cls, snapshot: Mapping, design: AugmentedDesign) -> "OnlineSession":
        if snapshot.get("version") != 1:
            raise ParameterError("unsupported session snapshot version")
        loss = snapshot["loss"]
        spec = LossSpec(family=loss["family"], tau=loss["tau"], alpha=loss["alpha"],
                        derivative_variant=loss["derivative_variant"])
        central = frozenset(snapshot["central"])
        coalitions = [frozenset(entry["members"]) for entry in snapshot["coalitions"]]
        session = cls(design, central, coalitions, snapshot["lam"], spec)
        for entry in snapshot["coalitions"]:
            c = frozenset(entry["members"])
            if list(session.term_names[c]) != entry["terms"]:
                raise ParameterError(f"design terms changed for coalition {sorted(c)}")
            session.states[c] = OnlineState(
                coefficients=np.asarray(entry["coefficients"], dtype=float),
                memory=np.asarray(entry["memory"], dtype=float),
                ewma=EwmaLoss(entry["ewma_loss"], snapshot["lam"]),
                step_count=entry["step_count"], ready=entry["ready"],
                pending_gradient=None if entry["pending_gradient"] is None
                else np.asarray(entry["pending_gradient"], dtype=float),
                min_warm_steps=entry["min_warm_steps"])
        return session
