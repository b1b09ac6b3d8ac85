"""Closed-form oracle for the protocol's contraction dynamics.

Given the client and server covariates, computes the contraction matrix

    H_cont = Gamma^-1 (sum x_n x_n^T) Gamma^-1 (sum x_m x_m^T) / (N M L)

and the pooled-data limit predictor

    w_limit = Gamma^-1 (sum x_n y_n) / (N L),

then iterates the label recursion w_{k+1} = 1/2 H_cont w_k + 1/2 w_limit
from w_1 = 0 and verifies the geometric contraction bound toward the fixed
point w* = (2I - H_cont)^-1 w_limit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import ClientDataset, Covariate, covariate_matrix, real_values
from .lsa import _check_spd


class NonContractiveError(ValueError):
    """Raised when 2I - H_cont is singular and no fixed point exists."""


def compute_contraction(client_datasets: Sequence[ClientDataset],
                        server_covariates: Sequence[Covariate],
                        gamma_mat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Contraction matrix and limit predictor from raw covariates.

    All clients must share the same N: the recursion's per-client 1/(2N)
    weighting only collapses to these pooled sums under uniform N.
    """
    gamma_mat = _check_spd(gamma_mat, "gamma")
    if len(client_datasets) == 0:
        raise ValueError("need at least one client dataset")
    sizes = {len(ds) for ds in client_datasets}
    if len(sizes) != 1:
        raise ValueError(f"clients must have equal dataset sizes, got {sizes}")
    n = sizes.pop()
    l = len(client_datasets)
    m = len(server_covariates)
    if m == 0:
        raise ValueError("need at least one server covariate")

    xs = np.vstack([covariate_matrix(ds.covariates()) for ds in client_datasets])
    ys = np.concatenate([real_values(ds.labels()) for ds in client_datasets])
    xm = covariate_matrix(server_covariates)
    if xs.shape[1] != xm.shape[1] or xs.shape[1] != gamma_mat.shape[0]:
        raise ValueError("client, server, and gamma dimensions disagree")

    g_inv = np.linalg.inv(gamma_mat)
    h_cont = g_inv @ (xs.T @ xs) @ g_inv @ (xm.T @ xm) / (n * m * l)
    w_limit = g_inv @ (xs.T @ ys) / (n * l)
    return h_cont, w_limit


def spectral_norm(mat: np.ndarray) -> float:
    # H_cont is a product of two symmetric matrices, hence generally
    # non-symmetric: use singular values for the operator 2-norm.
    return float(np.linalg.norm(np.asarray(mat, dtype=float), 2))


def fixed_point(h_cont: np.ndarray, w_limit: np.ndarray) -> np.ndarray:
    """w* = (2I - H_cont)^-1 w_limit."""
    h_cont = np.asarray(h_cont, dtype=float)
    w_limit = np.asarray(w_limit, dtype=float).ravel()
    d = h_cont.shape[0]
    a = 2.0 * np.eye(d) - h_cont
    if abs(np.linalg.det(a)) < 1e-300 or np.linalg.cond(a) > 1e14:
        raise NonContractiveError(
            "2I - H_cont is singular: configuration has no fixed point")
    return np.linalg.solve(a, w_limit)


@dataclass(frozen=True)
class TheoryState:
    gamma: np.ndarray
    h_cont: np.ndarray
    w_limit: np.ndarray
    w_star: Optional[np.ndarray]
    w_trace: Tuple[np.ndarray, ...]  # w_1, w_2, ...
    h_norm: float

    @staticmethod
    def initialize(client_datasets: Sequence[ClientDataset],
                   server_covariates: Sequence[Covariate],
                   gamma_mat: np.ndarray,
                   w_init: Optional[np.ndarray] = None) -> "TheoryState":
        h_cont, w_limit = compute_contraction(client_datasets,
                                              server_covariates, gamma_mat)
        d = h_cont.shape[0]
        try:
            w_star: Optional[np.ndarray] = fixed_point(h_cont, w_limit)
        except NonContractiveError:
            w_star = None
        w1 = np.zeros(d) if w_init is None else np.asarray(w_init, dtype=float)
        return TheoryState(gamma=np.asarray(gamma_mat, dtype=float),
                           h_cont=h_cont, w_limit=w_limit, w_star=w_star,
                           w_trace=(w1,), h_norm=spectral_norm(h_cont))


def iterate_recursion(state: TheoryState, rounds: int) -> TheoryState:
    """Extend w_trace by `rounds` applications of the label recursion."""
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    trace = list(state.w_trace)
    w = trace[-1]
    for _ in range(rounds):
        w = 0.5 * state.h_cont @ w + 0.5 * state.w_limit
        trace.append(w)
    return replace(state, w_trace=tuple(trace))


@dataclass(frozen=True)
class ContractionReport:
    h_norm: float
    rounds: int
    ratios: Tuple[float, ...]
    bound: float
    contractive: bool
    passed: bool
    failed_round: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "h_norm": self.h_norm,
            "rounds": self.rounds,
            "ratios": list(self.ratios),
            "bound": self.bound,
            "contractive": self.contractive,
            "pass": self.passed,
            "failed_round": self.failed_round,
        }

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def verify_contraction(state: TheoryState, slack: float = 1e-9) -> ContractionReport:
    """Check ||w_{k+1} - w*|| <= 1/2 ||H_cont|| ||w_k - w*|| along the trace.

    Non-contractive configurations (||H_cont|| >= 2 or no fixed point) are
    reported, not raised, so divergence can be demonstrated.
    """
    if len(state.w_trace) < 2:
        raise ValueError("w_trace must hold at least two iterates")
    bound = 0.5 * state.h_norm
    contractive = state.w_star is not None and state.h_norm < 2.0
    if state.w_star is None:
        return ContractionReport(h_norm=state.h_norm,
                                 rounds=len(state.w_trace) - 1, ratios=(),
                                 bound=bound, contractive=False, passed=False)
    errs = [float(np.linalg.norm(w - state.w_star)) for w in state.w_trace]
    ratios: List[float] = []
    passed = True
    failed_round: Optional[int] = None
    # a ratio is only meaningful while the error is large enough that float
    # roundoff (~eps * ||w*||) cannot perturb it by more than the slack
    floor = max(slack,
                np.finfo(float).eps * float(np.linalg.norm(state.w_star))
                / slack)
    for k in range(len(errs) - 1):
        if errs[k] > floor:
            ratios.append(errs[k + 1] / errs[k])
        if errs[k + 1] > bound * errs[k] + slack:
            passed = False
            if failed_round is None:
                failed_round = k + 1
    return ContractionReport(h_norm=state.h_norm, rounds=len(errs) - 1,
                             ratios=tuple(ratios), bound=bound,
                             contractive=contractive,
                             passed=passed and contractive,
                             failed_round=failed_round)
