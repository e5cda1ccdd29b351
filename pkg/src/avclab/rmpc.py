"""Observer-based repetitive model predictive control with Laguerre parameterization.

The controller embeds the disturbance generator's characteristic polynomial
Gamma(q^-1) as an internal model: plant state and input are Gamma-filtered,
the filtered dynamics are augmented with the output history, and a
finite-horizon quadratic cost with exponential data weighting (beta > 1) is
minimized over Laguerre-parameterized control trajectories subject to the
actuator box constraints.  A prescribed degree of stability gamma < 1 is
obtained by the modified Riccati weight substitution; a precomputed Kalman
filter reconstructs the augmented state and a recursive least-squares
estimator feeds the matched part of the disturbance forward through the
control channel.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .plantlab import (DisturbanceModel, LtiPlant, SaturationSpec, SimTrace,
                       SimulationDivergence, saturate, step_disturbance,
                       step_plant)
from .sysid import StateSpaceModel

log = logging.getLogger(__name__)

__all__ = [
    "InternalModel",
    "AugmentedSystem",
    "LaguerreBasis",
    "RmpcConfig",
    "RmpcController",
    "HildrethResult",
    "internal_model_from",
    "augment",
    "filter_signal",
    "laguerre_basis",
    "build_qp",
    "hildreth_solve",
    "kalman_schedule",
    "RlsDisturbanceEstimator",
    "prescribed_stability_weights",
    "horizon_cost",
    "horizon_cost_scaled",
    "synthesize",
    "closed_loop_run",
    "write_closedloop_csv",
]


# ---------------------------------------------------------------------------
# internal model and augmentation
# ---------------------------------------------------------------------------

@dataclass
class InternalModel:
    """Annihilator coefficients of Gamma(z) = z^nw + sum_i alpha_i z^(nw-i)."""

    alpha: np.ndarray
    roots: np.ndarray = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if self.roots is None:
            self.roots = np.roots(np.concatenate(([1.0], self.alpha))) \
                if self.alpha.size else np.array([])

    @property
    def order(self) -> int:
        return self.alpha.size


def internal_model_from(S) -> InternalModel:
    """Characteristic polynomial of the disturbance generator, det(zI - S).

    Coefficients are expanded from the eigenvalues (better conditioned than
    direct determinant expansion for clustered roots).  Applying the
    resulting operator 1 + sum alpha_i q^-i annihilates every trajectory of
    the generator.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError("S must be square")
    lam = np.linalg.eigvals(S)
    if np.any(np.abs(lam) > 1.0 + 1e-9):
        raise ValueError("disturbance generator has eigenvalues outside the "
                         "closed unit disk; the internal model would be unstable")
    coeffs = np.poly(lam)
    if np.max(np.abs(coeffs.imag)) > 1e-8 * max(np.max(np.abs(coeffs)), 1.0):
        raise ValueError("characteristic polynomial came out complex")
    return InternalModel(alpha=coeffs.real[1:], roots=lam)


@dataclass
class AugmentedSystem:
    """Gamma-filtered plant stacked with the output history (block layout of
    the internal-model augmentation)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    n_plant: int
    n_outputs: int
    n_w: int

    @property
    def dim(self) -> int:
        return self.A.shape[0]


def _transmission_rank_check(model: StateSpaceModel, roots, tol=1e-8):
    """Remark-style check: no plant transmission zero may coincide with a
    root of Gamma, else the augmented pair loses controllability/observability."""
    n, m, p = model.order, model.n_inputs, model.n_outputs
    full = n + min(m, p)
    bad = []
    for z in np.atleast_1d(roots):
        pencil = np.block([
            [z * np.eye(n) - model.A, model.B],
            [-model.C, np.zeros((p, m))],
        ])
        s = np.linalg.svd(pencil, compute_uv=False)
        if s[full - 1] < tol * s[0]:
            bad.append(z)
    return bad


def augment(model: StateSpaceModel, im: InternalModel,
            check_zeros: bool = True) -> AugmentedSystem:
    """Assemble the augmented system for the filtered state/output dynamics.

    State X = [x_f; y(k-1); ...; y(k-n_w)] with x_f = Gamma(q^-1) x.  With an
    empty internal model the plant is returned unchanged.  A warning (not an
    error) is issued when a plant transmission zero sits on a root of Gamma.
    """
    n, m, p = model.order, model.n_inputs, model.n_outputs
    nw = im.order
    if nw == 0:
        return AugmentedSystem(A=model.A.copy(), B=model.B.copy(),
                               C=model.C.copy(), n_plant=n, n_outputs=p, n_w=0)
    dim = n + p * nw
    A = np.zeros((dim, dim))
    A[:n, :n] = model.A
    A[n:n + p, :n] = model.C
    for i, a in enumerate(im.alpha):
        A[n:n + p, n + i * p: n + (i + 1) * p] = -a * np.eye(p)
    for i in range(nw - 1):
        A[n + (i + 1) * p: n + (i + 2) * p, n + i * p: n + (i + 1) * p] = np.eye(p)
    B = np.zeros((dim, m))
    B[:n] = model.B
    C = np.zeros((p, dim))
    C[:, :n] = model.C
    for i, a in enumerate(im.alpha):
        C[:, n + i * p: n + (i + 1) * p] = -a * np.eye(p)
    if check_zeros:
        bad = _transmission_rank_check(model, im.roots)
        if bad:
            warnings.warn(
                "plant has transmission zeros at internal-model roots "
                f"{bad}; the augmented system is not fully controllable/observable",
                stacklevel=2,
            )
    return AugmentedSystem(A=A, B=B, C=C, n_plant=n, n_outputs=p, n_w=nw)


def filter_signal(history, im: InternalModel):
    """Apply Gamma(q^-1): x_f(k) = x(k) + sum_i alpha_i x(k-i), zero padded.

    history is (T,) or (T, dim); the full filtered series is returned.
    """
    hist = np.asarray(history, dtype=float)
    squeeze = hist.ndim == 1
    hist = np.atleast_2d(hist.T).T if squeeze else hist
    out = hist.copy().astype(float)
    for i, a in enumerate(im.alpha, start=1):
        out[i:] += a * hist[:-i]
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Laguerre basis
# ---------------------------------------------------------------------------

@dataclass
class LaguerreBasis:
    """Sampled orthonormal Laguerre functions: samples[k, i-1] = l_i(k)."""

    a: float
    n_funcs: int
    samples: np.ndarray

    def gram(self) -> np.ndarray:
        return self.samples.T @ self.samples


def laguerre_basis(a: float, n_funcs: int, horizon: int) -> LaguerreBasis:
    """Discrete Laguerre functions by the companion state-space recursion.

    L(0) = sqrt(1 - a^2) [1, -a, a^2, ...]^T and L(k+1) = A_l L(k) with
    A_l lower triangular (a on the diagonal, (1-a^2)(-a)^(i-j-1) below).
    At a = 0 the functions degenerate to shifted unit pulses
    l_i(k) = delta(k, i-1), i.e. classical MPC.
    """
    if not (0.0 <= a < 1.0):
        raise ValueError("Laguerre scale must satisfy 0 <= a < 1")
    if n_funcs < 1 or horizon < 1:
        raise ValueError("n_funcs and horizon must be >= 1")
    beta_f = 1.0 - a * a
    A_l = np.zeros((n_funcs, n_funcs))
    for i in range(n_funcs):
        A_l[i, i] = a
        for j in range(i):
            A_l[i, j] = beta_f * (-a) ** (i - j - 1)
    L0 = np.sqrt(beta_f) * (-a) ** np.arange(n_funcs)
    samples = np.empty((horizon, n_funcs))
    Lk = L0
    for k in range(horizon):
        samples[k] = Lk
        Lk = A_l @ Lk
    return LaguerreBasis(a=a, n_funcs=n_funcs, samples=samples)


def _block_l(bases: list, k: int) -> np.ndarray:
    """Block-diagonal L(k) of shape (sum N_i, m); column i holds basis i."""
    total = sum(b.n_funcs for b in bases)
    L = np.zeros((total, len(bases)))
    row = 0
    for i, b in enumerate(bases):
        L[row: row + b.n_funcs, i] = b.samples[k]
        row += b.n_funcs
    return L


# ---------------------------------------------------------------------------
# costs (finite-horizon, exponentially weighted) and their scaled equivalent
# ---------------------------------------------------------------------------

def horizon_cost(A, B, Q, R, beta, x0, u_f_seq) -> float:
    """J = sum_j beta^(-2j) ||X(k+j)||_Q^2 + beta^(-2(j-1)) ||u_f(k+j-1)||_R^2."""
    X = np.asarray(x0, dtype=float).copy()
    J = 0.0
    for j, u in enumerate(np.atleast_2d(u_f_seq), start=1):
        X = A @ X + B @ u
        J += beta ** (-2 * j) * float(X @ Q @ X)
        J += beta ** (-2 * (j - 1)) * float(u @ R @ u)
    return J


def horizon_cost_scaled(A, B, Q, R, beta, x0, u_f_seq) -> float:
    """Equivalent time-invariant cost on the scaled dynamics (A/beta, B/beta).

    Transformed variables X_b(k+j) = beta^-j X(k+j) and
    u_b(k+j-1) = beta^-(j-1) u_f(k+j-1) start from X_b(k|k) = x0, which makes
    the two costs agree exactly.
    """
    Xb = np.asarray(x0, dtype=float).copy()
    J = 0.0
    for j, u in enumerate(np.atleast_2d(u_f_seq), start=1):
        ub = beta ** (-(j - 1)) * u
        Xb = (A @ Xb + B @ ub) / beta
        J += float(Xb @ Q @ Xb) + float(ub @ R @ ub)
    return J


# ---------------------------------------------------------------------------
# prescribed degree of stability
# ---------------------------------------------------------------------------

def prescribed_stability_weights(A, B, Q_bar, R_bar, gamma: float, beta: float,
                                 tol: float = 1e-11, max_iters: int = 200000):
    """Weight substitution forcing the closed loop inside |z| <= gamma.

    Solves the gamma-scaled Riccati equation by fixed-point iteration
    (relaxation 0.5 when the iterates oscillate) and returns

        Q = (gamma/beta)^2 Q_bar + (1 - (gamma/beta)^2) P_inf,
        R = (gamma/beta)^2 R_bar,

    together with P_inf, the reference LQ gain and its closed-loop
    eigenvalues.  With these (Q, R) the infinite-horizon solution of the
    beta-scaled problem reproduces the reference gain exactly.
    """
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must be in (0, 1)")
    if not beta > 1.0:
        raise ValueError("beta must be > 1")
    A_g = A / gamma
    B_g = B / gamma
    P = Q_bar.copy()
    prev_delta = np.inf
    for it in range(max_iters):
        G = R_bar + B_g.T @ P @ B_g
        K = np.linalg.solve(G, B_g.T @ P @ A_g)
        P_next = Q_bar + A_g.T @ P @ A_g - A_g.T @ P @ B_g @ K
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.max(np.abs(P_next - P))
        if delta > prev_delta:
            P_next = 0.5 * (P_next + P)
            delta = np.max(np.abs(P_next - P))
        if not np.all(np.isfinite(P_next)):
            raise np.linalg.LinAlgError(
                "prescribed-stability Riccati iteration diverged"
            )
        P = P_next
        prev_delta = delta
        if delta < tol * max(1.0, np.max(np.abs(P))):
            break
    else:
        raise np.linalg.LinAlgError(
            "prescribed-stability Riccati iteration did not converge"
        )
    gain = np.linalg.solve(R_bar + B_g.T @ P @ B_g, B_g.T @ P @ A_g)
    ref_eigs = np.linalg.eigvals(A - B @ gain)
    ratio = (gamma / beta) ** 2
    Q = ratio * Q_bar + (1.0 - ratio) * P
    R = ratio * R_bar
    log.debug("prescribed-stability Riccati converged in %d iterations", it + 1)
    return Q, R, P, gain, ref_eigs


# ---------------------------------------------------------------------------
# QP assembly and Hildreth's dual solver
# ---------------------------------------------------------------------------

def _prediction_matrices(A_aug, B_aug, Q, R, bases, beta, horizon):
    """Hessian core, linear map and per-step prediction pieces.

    Returns (H_bar, S_lin, R_ell, powers) with
      H_bar = R_ell + sum_j Phi_j^T Q Phi_j          (eta-space cost core)
      S_lin = sum_j Phi_j^T Q (A/beta)^j             (maps X_hat to linear term)
      Phi_j = sum_{i<=j} (A/beta)^(j-i) (B/beta) L^T(i-1).
    """
    dim = A_aug.shape[0]
    A_b = A_aug / beta
    B_b = B_aug / beta
    n_eta = sum(b.n_funcs for b in bases)
    R_ell = np.zeros((n_eta, n_eta))
    H_bar = np.zeros((n_eta, n_eta))
    S_lin = np.zeros((n_eta, dim))
    Phi = np.zeros((dim, n_eta))
    A_pow = np.eye(dim)
    for j in range(1, horizon + 1):
        Lj = _block_l(bases, j - 1)          # (n_eta, m)
        R_ell += Lj @ R @ Lj.T
        Phi = A_b @ Phi + B_b @ Lj.T
        A_pow = A_b @ A_pow
        QPhi = Q @ Phi
        H_bar += Phi.T @ QPhi
        S_lin += QPhi.T @ A_pow
    return R_ell + H_bar, S_lin, R_ell


def _constraint_maps(bases, alpha, beta, horizon, n_inputs):
    """R_p with u(k+p) = R_p eta + h_p: the reconstructed physical input is
    linear in eta once the applied-input history fixes h_p."""
    maps = []
    for p_idx in range(horizon):
        Rp = (beta ** p_idx) * _block_l(bases, p_idx).T    # (m, n_eta)
        for i, a in enumerate(alpha, start=1):
            if p_idx - i >= 0:
                Rp = Rp - a * maps[p_idx - i]
        maps.append(Rp)
    return np.array(maps)


def _constraint_offsets(alpha, horizon, u_hist, n_inputs):
    """h_p from the stored applied inputs (u_hist[0] = u(k-1), ...)."""
    offs = np.zeros((horizon, n_inputs))
    for p_idx in range(horizon):
        acc = np.zeros(n_inputs)
        for i, a in enumerate(alpha, start=1):
            past = offs[p_idx - i] if p_idx - i >= 0 else u_hist[i - 1]
            acc -= a * past
        offs[p_idx] = acc
    return offs


@dataclass
class HildrethResult:
    x: np.ndarray
    lam: np.ndarray
    converged: bool
    iterations: int
    active: np.ndarray
    feasibility: float


def hildreth_solve(H, f, A_ineq=None, b_ineq=None, max_iters: int = 200,
                   tol: float = 1e-9) -> HildrethResult:
    """Dual coordinate-ascent QP solver (Hildreth's algorithm).

    Solves min 0.5 x^T H x + f^T x subject to A x <= b for symmetric positive
    definite H.  On convergence the returned point satisfies the KKT
    conditions to tol; with conflicting constraints the iteration simply
    stops at max_iters and returns the (finite) sub-optimal iterate with
    converged=False -- it never raises.
    """
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float).reshape(-1)
    x_free = np.linalg.solve(H, -f)
    if A_ineq is None or len(A_ineq) == 0:
        return HildrethResult(x=x_free, lam=np.zeros(0), converged=True,
                              iterations=0, active=np.zeros(0, dtype=bool),
                              feasibility=0.0)
    A_ineq = np.atleast_2d(np.asarray(A_ineq, dtype=float))
    b_ineq = np.asarray(b_ineq, dtype=float).reshape(-1)
    viol = A_ineq @ x_free - b_ineq
    scale = 1.0 + np.abs(b_ineq)
    if np.all(viol <= tol * scale):
        return HildrethResult(x=x_free, lam=np.zeros(b_ineq.size),
                              converged=True, iterations=0,
                              active=np.zeros(b_ineq.size, dtype=bool),
                              feasibility=float(np.max(viol / scale)))
    Hinv_At = np.linalg.solve(H, A_ineq.T)
    P = A_ineq @ Hinv_At
    Kvec = b_ineq + A_ineq @ np.linalg.solve(H, f)
    lam = np.zeros(b_ineq.size)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        lam_prev = lam.copy()
        for i in range(lam.size):
            if P[i, i] <= 0.0:
                continue
            w = P[i] @ lam - P[i, i] * lam[i] + Kvec[i]
            lam[i] = max(0.0, -w / P[i, i])
        if np.max(np.abs(lam - lam_prev)) <= tol * (1.0 + np.max(np.abs(lam))):
            converged = True
            break
    x = x_free - Hinv_At @ lam
    viol = A_ineq @ x - b_ineq
    feas = float(np.max(viol / scale))
    if converged and feas > tol:
        converged = False
    return HildrethResult(x=x, lam=lam, converged=converged, iterations=it,
                          active=lam > 0.0, feasibility=feas)


# ---------------------------------------------------------------------------
# Kalman filter schedule
# ---------------------------------------------------------------------------

@dataclass
class KalmanDesign:
    gains: np.ndarray         # (horizon, dim, p)
    steady_gain: np.ndarray   # (dim, p)
    P_steady: np.ndarray
    iterations: int


def kalman_schedule(aug: AugmentedSystem, Q_f, R_f, P_f0,
                    horizon: int = 50) -> KalmanDesign:
    """Time-varying predictor gains plus the steady-state fixed point.

    Riccati recursion K(k) = A P C^T (C P C^T + R_f)^{-1},
    P(k+1) = (A - K C) P A^T + Q_f, iterated until ||P+ - P|| < 1e-12
    (capped at 1e5 sweeps); the schedule is meant to be computed once and
    stored.
    """
    A, C = aug.A, aug.C
    dim, p = A.shape[0], C.shape[0]
    Q_f = np.asarray(Q_f, dtype=float)
    R_f = np.atleast_2d(np.asarray(R_f, dtype=float))
    P = np.asarray(P_f0, dtype=float).copy()
    if np.any(np.linalg.eigvalsh((R_f + R_f.T) / 2) <= 0):
        raise ValueError("R_f must be positive definite")
    gains = np.empty((horizon, dim, p))
    trace0 = max(np.trace(P), 1.0)

    def _step(P):
        Sm = C @ P @ C.T + R_f
        K = A @ P @ C.T @ np.linalg.inv(Sm)
        P_next = (A - K @ C) @ P @ A.T + Q_f
        return K, 0.5 * (P_next + P_next.T)

    Pk = P.copy()
    for k in range(horizon):
        gains[k], Pk = _step(Pk)
    # steady state continues from the schedule endpoint
    it = 0
    for it in range(100000):
        K, P_next = _step(Pk)
        if np.trace(P_next) > 1e12 * trace0:
            raise np.linalg.LinAlgError(
                "Kalman Riccati recursion diverged: the augmented pair "
                "(A_aug, C_aug) is not detectable"
            )
        delta = np.max(np.abs(P_next - Pk))
        Pk = P_next
        if delta < 1e-12 * max(1.0, np.max(np.abs(Pk))):
            break
    else:
        raise np.linalg.LinAlgError("Kalman recursion hit the iteration cap "
                                    "without converging")
    K_ss, _ = _step(Pk)
    return KalmanDesign(gains=gains, steady_gain=K_ss, P_steady=Pk,
                        iterations=it + 1)


# ---------------------------------------------------------------------------
# RLS disturbance estimation
# ---------------------------------------------------------------------------

class RlsDisturbanceEstimator:
    """Recursive least squares on the regression x(k+1) - A x(k) - B u(k) = H d(k).

    Exponential forgetting lam in (0, 1]; the covariance is reset (and
    logged) when its trace blows past 1e12.  The matched feedforward gain is
    (B^T B)^{-1} B^T H.
    """

    def __init__(self, A, B, H, forgetting: float = 0.98, p0: float = 1e4):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        r = self.H.shape[1]
        if np.linalg.matrix_rank(self.H) < r:
            raise ValueError("H must have full column rank for the regression")
        if not (0.0 < forgetting <= 1.0):
            raise ValueError("forgetting factor must be in (0, 1]")
        self.lam = forgetting
        self.p0 = p0
        self.P = p0 * np.eye(r)
        self.d_hat = np.zeros(r)
        self.feedforward_gain = np.linalg.solve(self.B.T @ self.B,
                                                self.B.T @ self.H)
        self.n_resets = 0

    def update(self, x_next, x, u) -> np.ndarray:
        z = (np.asarray(x_next, dtype=float) - self.A @ np.asarray(x, dtype=float)
             - self.B @ np.asarray(u, dtype=float))
        H = self.H
        S = self.lam * np.eye(z.size) + H @ self.P @ H.T
        K = self.P @ H.T @ np.linalg.inv(S)
        self.d_hat = self.d_hat + K @ (z - H @ self.d_hat)
        self.P = (self.P - K @ H @ self.P) / self.lam
        if np.trace(self.P) > 1e12:
            log.warning("RLS covariance blow-up; resetting")
            self.P = self.p0 * np.eye(self.P.shape[0])
            self.n_resets += 1
        return self.d_hat.copy()


# ---------------------------------------------------------------------------
# controller synthesis and closed loop
# ---------------------------------------------------------------------------

@dataclass
class RmpcConfig:
    """Tuning set; defaults follow the reference recipe (N = 20, beta = 2.1,
    gamma = 0.95, a_i = 0.76, N_i = 5, R = 3e-3 I, Q = 10 C_aug^T C_aug)."""

    horizon: int = 20
    q_weight: np.ndarray = None          # None -> 10 * C_aug^T C_aug
    r_weight: np.ndarray = None          # None -> 3e-3 * I_m
    q_output_scale: float = 10.0
    beta: float = 2.1
    gamma: float = 0.95
    saturation: SaturationSpec = None
    laguerre_scales: tuple = None        # None -> 0.76 per input
    laguerre_orders: tuple = None        # None -> 5 per input
    kalman_qf: np.ndarray = None         # None -> 4.9e-9 B B^T + 1e-9 I
    kalman_rf: np.ndarray = None         # None -> 2e-4 I_p
    kalman_p0: np.ndarray = None         # None -> 1e-4 I
    kalman_horizon: int = 50
    use_gain_schedule: bool = False
    rls_forgetting: float = 0.98
    qp_max_iters: int = 200
    qp_tol: float = 1e-9

    def validate(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.beta > 1.0:
            raise ValueError("data weighting beta must be > 1")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must be in (0, 1)")


class RmpcController:
    """Synthesized repetitive MPC: QP template, Kalman gains, runtime state."""

    def __init__(self, plant_model, dist_model, cfg, im, aug, bases, weights,
                 qp_parts, kalman, gains, H_plant):
        self.plant_model = plant_model
        self.dist_model = dist_model
        self.cfg = cfg
        self.im = im
        self.aug = aug
        self.bases = bases
        self.Q, self.R, self.P_inf = weights
        (self.hessian, self.S_lin, self.R_ell, self.R_maps) = qp_parts
        self.kalman = kalman
        (self.K_mpc, self.lqr_gain, self.ref_eigs, self.mpc_eigs) = gains
        self.n_eta = self.hessian.shape[0]
        self.L0 = _block_l(bases, 0)
        self._H_plant = np.atleast_2d(np.asarray(H_plant, dtype=float))
        self.reset()

    # -- bookkeeping ------------------------------------------------------

    @property
    def n_variables(self) -> int:
        """Laguerre decision-vector size, sum_i N_i."""
        return self.n_eta

    @property
    def n_variables_dense(self) -> int:
        """Dense-control decision-vector size, N * m."""
        return self.cfg.horizon * self.aug.B.shape[1]

    def reset(self):
        m = self.aug.B.shape[1]
        nw = self.im.order
        self.X_hat = np.zeros(self.aug.dim)
        self.u_hist = deque([np.zeros(m) for _ in range(max(nw, 1))],
                            maxlen=max(nw, 1))
        window = max(5 * max(nw, 1) + 2, 8)
        self.xf_window = deque(maxlen=window)
        self.u_window = deque(maxlen=window)
        self.rls = RlsDisturbanceEstimator(
            self.plant_model.A, self.plant_model.B, self._H_plant,
            forgetting=self.cfg.rls_forgetting)
        self.step_count = 0

    def attach_disturbance_channel(self, H):
        self._H_plant = np.atleast_2d(np.asarray(H, dtype=float))

    # -- per-step QP ------------------------------------------------------

    def qp_for_state(self, X_hat):
        """Instantiate the QP (Hessian, linear term, box rows) at X_hat."""
        H = 2.0 * self.hessian
        f = 2.0 * (self.S_lin @ np.asarray(X_hat, dtype=float))
        if self.cfg.saturation is None:
            return H, f, None, None
        sat = self.cfg.saturation
        offs = _constraint_offsets(self.im.alpha, self.cfg.horizon,
                                   list(self.u_hist), self.aug.B.shape[1])
        rows = []
        rhs = []
        for p_idx in range(self.cfg.horizon):
            Rp = self.R_maps[p_idx]
            rows.append(Rp)
            rhs.append(sat.u_max - offs[p_idx])
            rows.append(-Rp)
            rhs.append(offs[p_idx] - sat.u_min)
        return H, f, np.vstack(rows), np.concatenate(rhs)

    def control_step(self, y, feedforward: bool = False):
        """One receding-horizon update; returns the per-step record."""
        y = np.asarray(y, dtype=float).reshape(-1)
        H, f, A_ineq, b_ineq = self.qp_for_state(self.X_hat)
        qp = hildreth_solve(H, f, A_ineq, b_ineq,
                            max_iters=self.cfg.qp_max_iters, tol=self.cfg.qp_tol)
        u_f_now = self.L0.T @ qp.x
        offs0 = -sum(a * self.u_hist[i - 1]
                     for i, a in enumerate(self.im.alpha, start=1)) \
            if self.im.order else 0.0
        u_cmd = u_f_now + offs0
        d_hat = self.rls.d_hat.copy()
        if feedforward:
            u_cmd = u_cmd - self.rls.feedforward_gain @ d_hat
        if self.cfg.saturation is not None:
            u_applied = saturate(u_cmd, self.cfg.saturation)
        else:
            u_applied = u_cmd.copy()

        # observer propagation with the Gamma-filtered applied input
        u_f_obs = u_applied + (sum(a * self.u_hist[i - 1]
                                   for i, a in enumerate(self.im.alpha, start=1))
                               if self.im.order else 0.0)
        gain = self.kalman.gains[self.step_count] \
            if (self.cfg.use_gain_schedule
                and self.step_count < len(self.kalman.gains)) \
            else self.kalman.steady_gain
        innov = y - self.aug.C @ self.X_hat
        y_hat = y - innov
        self.X_hat = (self.aug.A @ self.X_hat + self.aug.B @ u_f_obs
                      + gain @ innov)

        # RLS over the inverse-filtered estimate window
        self.xf_window.append(self.X_hat[: self.aug.n_plant].copy())
        self.u_window.append(np.asarray(u_applied, dtype=float).copy())
        if len(self.xf_window) >= 3:
            x_series = self._invert_filter_window()
            self.rls.update(x_series[-1], x_series[-2], self.u_window[-2])

        self.u_hist.appendleft(np.asarray(u_applied, dtype=float).copy())
        self.step_count += 1
        return {
            "u_applied": np.asarray(u_applied, dtype=float),
            "u_unsat": np.asarray(u_cmd, dtype=float),
            "y_hat": y_hat,
            "d_hat": d_hat,
            "qp_iters": qp.iterations,
            "qp_converged": qp.converged,
            "sat_active": bool(np.any(u_applied != u_cmd)),
        }

    def _invert_filter_window(self):
        """Gamma^-1 over the recent window (zero pre-history each restart).

        The inverse filter is only marginally stable when Gamma has
        unit-circle roots; restarting over a sliding window of ~5 n_w
        samples bounds the drift.
        """
        xf = np.array(self.xf_window)
        alpha = self.im.alpha
        x = xf.copy()
        for k in range(x.shape[0]):
            for i, a in enumerate(alpha, start=1):
                if k - i >= 0:
                    x[k] -= a * x[k - i]
        return x


def synthesize(plant_model: StateSpaceModel, dist_model: DisturbanceModel,
               cfg: RmpcConfig, H_plant=None) -> RmpcController:
    """Build the full repetitive MPC from plant, disturbance generator, config.

    Assembles the internal model and augmentation, the prescribed-stability
    weights, the Laguerre bases with the QP template, and the Kalman gain
    schedule; also records the reference LQ closed-loop eigenvalues used for
    tuning validation and the equivalent unconstrained MPC gain.
    """
    cfg.validate()
    m = plant_model.n_inputs
    im = internal_model_from(dist_model.S) if dist_model is not None \
        else InternalModel(alpha=np.zeros(0))
    aug = augment(plant_model, im)

    Q_bar = cfg.q_weight if cfg.q_weight is not None \
        else cfg.q_output_scale * aug.C.T @ aug.C
    R_bar = cfg.r_weight if cfg.r_weight is not None else 3e-3 * np.eye(m)
    R_bar = np.atleast_2d(np.asarray(R_bar, dtype=float))
    Q, R, P_inf, lqr_gain, ref_eigs = prescribed_stability_weights(
        aug.A, aug.B, np.asarray(Q_bar, dtype=float), R_bar,
        cfg.gamma, cfg.beta)

    scales = cfg.laguerre_scales if cfg.laguerre_scales is not None \
        else (0.76,) * m
    orders = cfg.laguerre_orders if cfg.laguerre_orders is not None \
        else (5,) * m
    if len(scales) != m or len(orders) != m:
        raise ValueError("need one Laguerre (scale, order) pair per input")
    bases = [laguerre_basis(a, n, cfg.horizon)
             for a, n in zip(scales, orders)]

    hessian, S_lin, R_ell = _prediction_matrices(
        aug.A, aug.B, Q, R, bases, cfg.beta, cfg.horizon)
    eigs_h = np.linalg.eigvalsh(hessian)
    if eigs_h[0] <= 0:
        jitter = max(1e-12 * eigs_h[-1], 1e-300)
        log.warning("QP Hessian not PD; adding %.3e jitter", jitter)
        hessian = hessian + jitter * np.eye(hessian.shape[0])
    R_maps = _constraint_maps(bases, im.alpha, cfg.beta, cfg.horizon, m)

    L0 = _block_l(bases, 0)
    K_mpc = L0.T @ np.linalg.solve(hessian, S_lin)
    mpc_eigs = np.linalg.eigvals(aug.A - aug.B @ K_mpc)

    Q_f = cfg.kalman_qf if cfg.kalman_qf is not None \
        else 4.9e-9 * aug.B @ aug.B.T + 1e-9 * np.eye(aug.dim)
    R_f = cfg.kalman_rf if cfg.kalman_rf is not None \
        else 2e-4 * np.eye(aug.n_outputs)
    P_f0 = cfg.kalman_p0 if cfg.kalman_p0 is not None \
        else 1e-4 * np.eye(aug.dim)
    kalman = kalman_schedule(aug, Q_f, R_f, P_f0, horizon=cfg.kalman_horizon)

    if H_plant is None:
        r_dist = dist_model.E.shape[0] if dist_model is not None else 1
        H_plant = np.zeros((plant_model.order, r_dist))
        H_plant[0] = 1.0
    return RmpcController(
        plant_model, dist_model, cfg, im, aug, bases,
        (Q, R, P_inf), (hessian, S_lin, R_ell, R_maps), kalman,
        (K_mpc, lqr_gain, ref_eigs, mpc_eigs), H_plant)


def build_qp(controller: RmpcController, X_hat):
    """QP pieces (Hessian, linear term, inequality rows) at the given state."""
    return controller.qp_for_state(X_hat)


def closed_loop_run(plant: LtiPlant, controller: RmpcController, disturbance,
                    n_steps: int, feedforward: bool = False, rng=None,
                    x0=None) -> SimTrace:
    """Receding-horizon closed loop on the simulated plant.

    disturbance may be a DisturbanceModel (stepped autonomously) or a
    precomputed (n_steps, r) array.  Per step: Kalman update, Hildreth QP,
    reconstruction of the physical input from the filtered solution and the
    input history, optional RLS feedforward subtraction, saturation, then the
    plant recursion.  On divergence the trace is truncated and flagged.
    """
    m = plant.model
    rng = plant.make_rng() if rng is None else rng
    controller.attach_disturbance_channel(plant.H)
    controller.reset()
    if isinstance(disturbance, DisturbanceModel):
        w = disturbance.w0.copy()
        def next_d(k):
            nonlocal w
            w, d = step_disturbance(disturbance, w)
            return d
    else:
        d_arr = np.asarray(disturbance, dtype=float).reshape(n_steps, -1)
        def next_d(k):
            return d_arr[k]

    x = np.zeros(m.order) if x0 is None else np.asarray(x0, dtype=float).copy()
    cols = {name: [] for name in ("d", "y", "y_hat", "u_applied", "u_unsat",
                                  "d_hat", "qp_iters", "sat_active")}
    diverged_at = -1
    for k in range(n_steps):
        d = next_d(k)
        try:
            rec_y = m.C @ x + (plant.meas_noise_std
                               * rng.standard_normal(m.n_outputs)
                               if np.any(plant.meas_noise_std) else 0.0)
            step = controller.control_step(rec_y, feedforward=feedforward)
            x, _ = step_plant(plant, x, step["u_applied"], d, rng)
        except SimulationDivergence:
            diverged_at = k
            break
        cols["d"].append(np.atleast_1d(d))
        cols["y"].append(np.atleast_1d(rec_y))
        cols["y_hat"].append(np.atleast_1d(step["y_hat"]))
        cols["u_applied"].append(step["u_applied"])
        cols["u_unsat"].append(step["u_unsat"])
        cols["d_hat"].append(step["d_hat"])
        cols["qp_iters"].append(step["qp_iters"])
        cols["sat_active"].append(step["sat_active"])
    n_done = len(cols["y"])
    t = np.arange(n_done) * m.T_s
    trace = SimTrace(
        t=t,
        y=np.array(cols["y"]),
        u=np.array(cols["u_applied"]),
        d=np.array(cols["d"]),
        diverged_at=diverged_at,
        extra={
            "y_hat": np.array(cols["y_hat"]),
            "u_unsat": np.array(cols["u_unsat"]),
            "d_hat": np.array(cols["d_hat"]),
            "qp_iters": np.array(cols["qp_iters"]),
            "sat_active": np.array(cols["sat_active"], dtype=int),
        },
    )
    return trace


def write_closedloop_csv(path, trace: SimTrace):
    """Trace CSV: k, t, d, y, y_hat, u_applied*, u_unsat*, d_hat, qp_iters, sat_active."""
    n = trace.t.size
    cols = [np.arange(n), trace.t]
    header = ["k", "t"]
    def _add(name, arr):
        arr = np.atleast_2d(np.asarray(arr))
        if arr.shape[0] == n:
            arr = arr.T
        for i, row in enumerate(arr):
            cols.append(row)
            header.append(f"{name}{i + 1}" if arr.shape[0] > 1 else name)
    _add("d", trace.d)
    _add("y", trace.y)
    _add("y_hat", trace.extra["y_hat"])
    ua = np.atleast_2d(trace.u.T)
    for i, row in enumerate(ua):
        cols.append(row)
        header.append(f"u_applied{i + 1}")
    uu = np.atleast_2d(trace.extra["u_unsat"].T)
    for i, row in enumerate(uu):
        cols.append(row)
        header.append(f"u_unsat{i + 1}")
    _add("d_hat", trace.extra["d_hat"])
    cols.append(trace.extra["qp_iters"]); header.append("qp_iters")
    cols.append(trace.extra["sat_active"]); header.append("sat_active")
    np.savetxt(path, np.column_stack(cols), delimiter=",",
               header=",".join(header), comments="", fmt="%.17g")
