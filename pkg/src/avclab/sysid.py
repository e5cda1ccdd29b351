"""Frequency-domain subspace identification of discrete state-space models.

The pipeline goes: frequency response matrix sampled on a uniform grid over
[0, Nyquist]  ->  impulse response by inverse DFT with conjugate-symmetric
extension  ->  block Hankel matrix and SVD  ->  shift-invariance recovery of
(A, C)  ->  linear least squares for (B, D).  A noise-weighted variant whitens
the data with the Cholesky factor of the output-noise covariance before the
SVD step, an output-error Levenberg-Marquardt refinement polishes all state
matrices, and Monte-Carlo perturbation of the FRM quantifies pole/zero
scatter and FRF envelopes.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)

__all__ = [
    "StateSpaceModel",
    "HankelConfig",
    "IdentResult",
    "ScanRow",
    "McResult",
    "impulse_from_frm",
    "subspace_identify",
    "subspace_identify_weighted",
    "stability_scan",
    "refine_output_error",
    "monte_carlo_uncertainty",
    "match_poles",
    "natural_frequencies",
    "transmission_zeros",
]


@dataclass
class StateSpaceModel:
    """Discrete-time state-space model (A, B, C, D) at sampling period T_s."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    T_s: float
    input_labels: list | None = None
    output_labels: list | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.shape[0] != n:
            raise ValueError("B row count must match state dimension")
        if self.C.shape[1] != n:
            raise ValueError("C column count must match state dimension")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D must be n_outputs x n_inputs")

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def frequency_response(self, omega) -> np.ndarray:
        """G(e^{j omega}) for normalized frequencies omega (rad/sample).

        Returns an array of shape (n_outputs, n_inputs, len(omega)).
        """
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        G = np.empty((self.n_outputs, self.n_inputs, omega.size), dtype=complex)
        eye = np.eye(self.order)
        for k, w in enumerate(omega):
            G[:, :, k] = self.C @ np.linalg.solve(np.exp(1j * w) * eye - self.A,
                                                  self.B) + self.D
        return G

    def frf_hz(self, freqs_hz) -> np.ndarray:
        return self.frequency_response(2.0 * np.pi * np.asarray(freqs_hz) * self.T_s)

    def markov_parameters(self, count: int) -> np.ndarray:
        """Impulse response samples h_0 = D, h_i = C A^(i-1) B."""
        h = np.empty((count, self.n_outputs, self.n_inputs))
        h[0] = self.D
        x = self.B.copy()
        for i in range(1, count):
            h[i] = self.C @ x
            x = self.A @ x
        return h

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "T_s": self.T_s,
            "order": self.order,
            "stable": self.is_stable,
            "input_labels": self.input_labels,
            "output_labels": self.output_labels,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "StateSpaceModel":
        return cls(
            A=np.asarray(payload["A"], dtype=float),
            B=np.asarray(payload["B"], dtype=float),
            C=np.asarray(payload["C"], dtype=float),
            D=np.asarray(payload["D"], dtype=float),
            T_s=float(payload["T_s"]),
            input_labels=payload.get("input_labels"),
            output_labels=payload.get("output_labels"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "StateSpaceModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class HankelConfig:
    """Block Hankel sizing: q block rows, r block columns, n retained singular values."""

    q: int
    r: int
    n: int

    def validate(self):
        if self.n < 1:
            raise ValueError("model order n must be >= 1")
        if not self.q > self.n:
            raise ValueError(f"need q > n (got q={self.q}, n={self.n})")
        if not self.r >= self.n:
            raise ValueError(f"need r >= n (got r={self.r}, n={self.n})")


@dataclass
class IdentResult:
    model: StateSpaceModel
    objective: float
    poles: np.ndarray
    stable_flags: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ScanRow:
    n: int
    q: int
    objective: float
    all_stable: bool
    poles: np.ndarray


@dataclass
class McResult:
    poles: np.ndarray            # (n_ok, n) complex
    zeros: dict                  # (i, j) -> (n_ok, n_z) complex, per SISO channel
    envelope_lo: np.ndarray      # (p, m, K) min |G| over runs
    envelope_hi: np.ndarray      # (p, m, K) max |G| over runs
    ellipses: list               # per pole cluster: dict(center, axes, angle, count)
    n_failed: int
    seed: int


# ---------------------------------------------------------------------------
# impulse response from FRM samples
# ---------------------------------------------------------------------------

def _as_g_array(frm):
    """Accept an FrmEstimate-like object or a raw (p, m, K) complex array."""
    if hasattr(frm, "G"):
        return np.asarray(frm.G, dtype=complex)
    G = np.asarray(frm, dtype=complex)
    if G.ndim == 1:
        G = G[None, None, :]
    elif G.ndim == 2:
        # interpreted as (K,) samples of a SISO system if square ambiguity-free
        raise ValueError("pass FRM data with shape (p, m, K)")
    return G


def impulse_from_frm(frm, real_tol: float = 1e-8) -> np.ndarray:
    """Impulse response from an FRM sampled at omega_k = pi k / M, k = 0..M.

    Extends the samples by conjugate symmetry G_{M+k} = conj(G_{M-k}) and
    applies the 2M-point inverse DFT h_i = (1/2M) sum_k G_k e^{j 2 pi i k / 2M}.
    The samples at DC and Nyquist must be (numerically) real.  Returns a real
    array of shape (2M, p, m); the discarded imaginary residue is logged.
    """
    G = _as_g_array(frm)
    p, m, K = G.shape
    if K < 2:
        raise ValueError("need at least two frequency samples (DC and Nyquist)")
    M = K - 1
    gmax = np.max(np.abs(G)) or 1.0
    for idx, name in ((0, "DC"), (M, "Nyquist")):
        if np.max(np.abs(G[:, :, idx].imag)) > real_tol * gmax:
            raise ValueError(f"{name} sample of the FRM is materially complex")
    ext = np.empty((2 * M, p, m), dtype=complex)
    ext[: M + 1] = np.moveaxis(G, -1, 0)
    ext[M + 1:] = np.conj(np.moveaxis(G, -1, 0)[M - 1: 0: -1])
    h = np.fft.ifft(ext, axis=0)
    residue = np.max(np.abs(h.imag))
    if residue > 1e-10 * max(np.max(np.abs(h.real)), 1.0):
        log.warning("impulse_from_frm imaginary residue %.3e discarded", residue)
    return h.real


def _check_uniform_grid(freqs, T_s):
    """Verify freqs form the uniform grid omega_k = pi k / M over [0, Nyquist]."""
    freqs = np.asarray(freqs, dtype=float)
    M = freqs.size - 1
    expected = np.arange(M + 1) / (2.0 * M * T_s)
    if not np.allclose(freqs, expected, rtol=1e-9, atol=1e-12 * expected[-1]):
        raise ValueError("FRM grid is not the uniform [0, Nyquist] grid")


# ---------------------------------------------------------------------------
# subspace identification
# ---------------------------------------------------------------------------

def _block_hankel(h, q, r):
    """H[i, j] = h[i + j + 1] (Markov parameters, skipping the feedthrough h_0)."""
    p, m = h.shape[1], h.shape[2]
    H = np.empty((q * p, r * m))
    for i in range(q):
        for j in range(r):
            H[i * p:(i + 1) * p, j * m:(j + 1) * m] = h[i + j + 1]
    return H


def _selectors(q, p):
    J1 = np.hstack([np.eye((q - 1) * p), np.zeros(((q - 1) * p, p))])
    J2 = np.hstack([np.zeros(((q - 1) * p, p)), np.eye((q - 1) * p)])
    J3 = np.hstack([np.eye(p), np.zeros((p, (q - 1) * p))])
    return J1, J2, J3


def _solve_bd(G, omega, A, C, weights=None):
    """Least squares for (B, D) with fixed (A, C): linear in the unknowns.

    Minimizes sum_k || W_k o (G_k - D - C (e^{j w_k} I - A)^(-1) B) ||_F^2 as a
    single stacked real system; unknowns are vec(B) then vec(D)
    (column-major).
    """
    p, m, K = G.shape
    n = A.shape[0]
    eye_n = np.eye(n)
    rows = []
    rhs = []
    for k in range(K):
        Phi = np.linalg.solve(np.exp(1j * omega[k]) * eye_n - A, eye_n)
        CPhi = C @ Phi                       # p x n
        blk_B = np.kron(np.eye(m), CPhi)     # pm x nm
        blk_D = np.kron(np.eye(m), np.eye(p))
        Mk = np.hstack([blk_B, blk_D])
        gk = G[:, :, k].reshape(-1, order="F")
        if weights is not None:
            w = weights[:, :, k].reshape(-1, order="F")
            Mk = Mk * w[:, None]
            gk = gk * w
        rows.append(Mk)
        rhs.append(gk)
    Mfull = np.vstack(rows)
    gfull = np.concatenate(rhs)
    Areal = np.vstack([Mfull.real, Mfull.imag])
    breal = np.concatenate([gfull.real, gfull.imag])
    theta, *_ = np.linalg.lstsq(Areal, breal, rcond=None)
    B = theta[: n * m].reshape((n, m), order="F")
    D = theta[n * m:].reshape((p, m), order="F")
    return B, D


def frf_misfit(G, model: StateSpaceModel, omega, weights=None) -> float:
    """Weighted Frobenius misfit sum_k ||W_k o (G_k - Ghat_k)||_F^2."""
    Ghat = model.frequency_response(omega)
    diff = G - Ghat
    if weights is not None:
        diff = diff * weights
    return float(np.sum(np.abs(diff) ** 2))


def _weights_from_var(var_noise, floor_rel=1e-12):
    """Elementwise weights 1/std from a per-entry noise variance array."""
    var = np.asarray(var_noise, dtype=float)
    floor = floor_rel * max(np.max(var), 1e-300)
    return 1.0 / np.sqrt(np.maximum(var, floor))


def _grid_omega(frm, T_s):
    if hasattr(frm, "freqs"):
        freqs = np.asarray(frm.freqs, dtype=float)
        _check_uniform_grid(freqs, T_s)
        return 2.0 * np.pi * freqs * T_s
    G = _as_g_array(frm)
    M = G.shape[-1] - 1
    return np.pi * np.arange(M + 1) / M


def subspace_identify(frm, cfg: HankelConfig, T_s: float = 1.0,
                      weights=None) -> IdentResult:
    """Identify (A, B, C, D) from FRM samples on the uniform [0, Nyquist] grid.

    Block Hankel of the IDFT impulse response, SVD split at n singular
    values, shift-invariance solve for A via the Moore-Penrose pseudoinverse,
    then a batch least squares for (B, D).  No stability projection is
    applied: unstable poles are reported as found.
    """
    cfg.validate()
    G = _as_g_array(frm)
    omega = _grid_omega(frm, T_s)
    p, m, K = G.shape
    M = K - 1
    if cfg.q + cfg.r - 1 > 2 * M - 1:
        raise ValueError(
            f"q + r - 1 = {cfg.q + cfg.r - 1} impulse samples exceed the "
            f"2M - 1 = {2 * M - 1} available from the grid"
        )
    h = impulse_from_frm(G)
    H = _block_hankel(h, cfg.q, cfg.r)
    U, s, _ = np.linalg.svd(H, full_matrices=False)
    diagnostics = {"singular_values": s}
    if cfg.n < s.size and s[cfg.n] > 0 and s[cfg.n - 1] / s[cfg.n] < 1.5:
        diagnostics["gap_warning"] = (
            f"weak singular-value gap sigma_n/sigma_(n+1) = "
            f"{s[cfg.n - 1] / s[cfg.n]:.3f} < 1.5"
        )
        warnings.warn(diagnostics["gap_warning"], stacklevel=2)
    Us = U[:, : cfg.n]
    J1, J2, J3 = _selectors(cfg.q, p)
    J1Us = J1 @ Us
    s_j1 = np.linalg.svd(J1Us, compute_uv=False)
    if s_j1[-1] < 1e-12 * s_j1[0]:
        raise np.linalg.LinAlgError("J1 Us is rank deficient; reduce n or raise q")
    A = np.linalg.pinv(J1Us) @ (J2 @ Us)
    C = J3 @ Us
    B, D = _solve_bd(G, omega, A, C, weights=weights)
    model = StateSpaceModel(A, B, C, D, T_s)
    poles = model.poles()
    obj = frf_misfit(G, model, omega, weights=weights)
    return IdentResult(model=model, objective=obj, poles=poles,
                       stable_flags=np.abs(poles) < 1.0, diagnostics=diagnostics)


def _noise_cov_per_bin(var_noise):
    """Per-bin p x p output-noise covariance (diagonal from entry variances).

    The entry variances refer to FRM entries; channel variance is taken as
    the mean over inputs, which keeps R_k well-defined for any m.
    """
    var = np.asarray(var_noise, dtype=float)
    p, m, K = var.shape
    R = np.empty((K, p, p))
    for k in range(K):
        R[k] = np.diag(var[:, :, k].mean(axis=1))
    return R


def subspace_identify_weighted(frm, cfg: HankelConfig, T_s: float = 1.0,
                               var_noise=None) -> IdentResult:
    """Noise-weighted subspace identification (whitened projection variant).

    Builds the frequency-stacked data matrix G and input pattern W_m, forms
    the output-noise covariance E{N N^T} = Re(W_p diag(R_k) W_p^*), takes its
    Cholesky factor K (scale alpha fixed to 1), removes the input/feedthrough
    row space with one QR factorization, and applies the SVD to the whitened
    residual K^(-1) R22.  (A, C) follow from the shift structure of K Us and
    (B, D) from a noise-weighted least squares.
    """
    cfg.validate()
    G = _as_g_array(frm)
    omega = _grid_omega(frm, T_s)
    p, m, K_bins = G.shape
    if var_noise is None:
        var_noise = getattr(frm, "var_noise", None)
    if var_noise is None:
        raise ValueError("weighted identification needs per-bin noise variances")
    var_noise = np.asarray(var_noise, dtype=float)
    floor = 1e-12 * max(np.max(var_noise), np.max(np.abs(G)) ** 2 * 1e-12, 1e-300)
    var_noise = np.maximum(var_noise, floor)

    q = cfg.q
    M = K_bins - 1
    phi = np.exp(1j * omega)
    sqM = np.sqrt(max(M, 1))

    # stacked data and input-pattern matrices, one block column per bin
    Gbig = np.empty((q * p, K_bins * m), dtype=complex)
    Wm = np.empty((q * m, K_bins * m), dtype=complex)
    for k in range(K_bins):
        pk = 1.0
        for i in range(q):
            Gbig[i * p:(i + 1) * p, k * m:(k + 1) * m] = pk * G[:, :, k] / sqM
            Wm[i * m:(i + 1) * m, k * m:(k + 1) * m] = (pk / sqM) * np.eye(m)
            pk = pk * phi[k]

    # E{N N^T} = Re( W_p diag(R_k) W_p^* ); block (i, j) = (1/M) sum_k phi_k^(i-j) R_k
    Rk = _noise_cov_per_bin(var_noise)
    cov = np.zeros((q * p, q * p))
    for i in range(q):
        for j in range(q):
            w = phi ** (i - j)
            blk = np.tensordot(w, Rk, axes=(0, 0)) / max(M, 1)
            cov[i * p:(i + 1) * p, j * p:(j + 1) * p] = blk.real
    try:
        Kchol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eps = 1e-12 * np.trace(cov)
        log.warning("noise covariance not PD; regularizing with %.3e * I", eps)
        Kchol = np.linalg.cholesky(cov + eps * np.eye(cov.shape[0]))

    stacked = np.vstack([
        np.hstack([Wm.real, Wm.imag]),
        np.hstack([Gbig.real, Gbig.imag]),
    ])
    # LQ split: lower-triangular left factor of [W; G]
    Rfac = np.linalg.qr(stacked.T, mode="r")
    L = Rfac.T
    R22 = L[q * m: q * m + q * p, q * m: q * m + q * p]

    Uw, s, _ = np.linalg.svd(sla.solve_triangular(Kchol, R22, lower=True),
                             full_matrices=False)
    diagnostics = {"singular_values": s}
    if cfg.n < s.size and s[cfg.n] > 0 and s[cfg.n - 1] / s[cfg.n] < 1.5:
        diagnostics["gap_warning"] = (
            f"weak singular-value gap sigma_n/sigma_(n+1) = "
            f"{s[cfg.n - 1] / s[cfg.n]:.3f} < 1.5"
        )
        warnings.warn(diagnostics["gap_warning"], stacklevel=2)
    # orthonormalize the un-whitened basis: a pure change of state basis
    # that keeps the (B, D) least squares well scaled
    Us, _ = np.linalg.qr(Kchol @ Uw[:, : cfg.n])
    J1, J2, J3 = _selectors(q, p)
    J1Us = J1 @ Us
    s_j1 = np.linalg.svd(J1Us, compute_uv=False)
    if s_j1[-1] < 1e-12 * s_j1[0]:
        raise np.linalg.LinAlgError("J1 K Us is rank deficient; reduce n or raise q")
    A = np.linalg.pinv(J1Us) @ (J2 @ Us)
    C = J3 @ Us
    w_entry = _weights_from_var(var_noise)
    B, D = _solve_bd(G, omega, A, C, weights=w_entry)
    model = StateSpaceModel(A, B, C, D, T_s)
    poles = model.poles()
    obj = frf_misfit(G, model, omega, weights=w_entry)
    return IdentResult(model=model, objective=obj, poles=poles,
                       stable_flags=np.abs(poles) < 1.0, diagnostics=diagnostics)


def _candidate_q(n, limit, strategy):
    if strategy == "auto":
        # rule-of-thumb 5n plus a spread inside [n+1, 10n)
        cands = sorted({n + 1, 2 * n, 3 * n, 5 * n, 7 * n, 9 * n})
    elif strategy == "rule":
        cands = [5 * n]
    else:
        cands = [int(v) for v in strategy]
    return [q for q in cands if n < q <= limit] or [min(n + 1, limit)]


def stability_scan(frm, n_range, q_strategy="auto", T_s: float = 1.0,
                   var_noise=None, weighted: bool = False) -> list:
    """Sweep model order n (and q candidates per n); tabulate objective and poles.

    Every (n, q) failure is recorded as a row with infinite objective rather
    than raised.  The conventional pick is the minimum-objective row among
    those with all-stable poles; use :func:`recommend_model`.
    """
    G = _as_g_array(frm)
    M = G.shape[-1] - 1
    rows = []
    for n in n_range:
        best = None
        for q in _candidate_q(n, (2 * M - 1 + 1) // 2, q_strategy):
            r = 2 * M - q
            if r < n:
                continue
            cfg = HankelConfig(q=q, r=min(r, 4 * q), n=n)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    if weighted:
                        res = subspace_identify_weighted(frm, cfg, T_s=T_s,
                                                         var_noise=var_noise)
                    else:
                        res = subspace_identify(frm, cfg, T_s=T_s)
            except (np.linalg.LinAlgError, ValueError):
                rows.append(ScanRow(n=n, q=q, objective=np.inf,
                                    all_stable=False, poles=np.array([])))
                continue
            row = ScanRow(n=n, q=q, objective=res.objective,
                          all_stable=bool(np.all(res.stable_flags)),
                          poles=res.poles)
            if best is None or row.objective < best.objective:
                best = row
            rows.append(row)
    return rows


def recommend_model(rows: list) -> ScanRow | None:
    """Minimum-objective row among all-stable-pole models (best q per n)."""
    stable = [r for r in rows if r.all_stable and np.isfinite(r.objective)]
    if not stable:
        return None
    return min(stable, key=lambda r: r.objective)


# ---------------------------------------------------------------------------
# iterative output-error refinement
# ---------------------------------------------------------------------------

def refine_output_error(init, frm, T_s: float = 1.0, weights=None,
                        max_iters: int = 50, gtol: float = 1e-12) -> IdentResult:
    """Levenberg-Marquardt refinement of all (A, B, C, D) entries.

    Minimizes the same weighted Frobenius FRF misfit the subspace step
    reports, starting from the subspace model.  The reported objective never
    increases: damping is escalated on step failure and the initial model is
    returned (flagged) if no improving step exists.
    """
    model0 = init.model if isinstance(init, IdentResult) else init
    G = _as_g_array(frm)
    omega = _grid_omega(frm, T_s)
    p, m, K = G.shape
    n = model0.order
    eye_n = np.eye(n)

    def residual_and_jac(A, B, C, D, with_jac=True):
        res = np.empty(2 * p * m * K)
        n_theta = n * n + n * m + p * n + p * m
        J = np.empty((2 * p * m * K, n_theta)) if with_jac else None
        for k in range(K):
            Phi = np.linalg.solve(np.exp(1j * omega[k]) * eye_n - A, eye_n)
            CPhi = C @ Phi
            PhiB = Phi @ B
            Gk = CPhi @ B + D
            diff = (G[:, :, k] - Gk)
            if weights is not None:
                wk = weights[:, :, k]
                diff = diff * wk
            vec = diff.reshape(-1, order="F")
            sl = slice(k * p * m, (k + 1) * p * m)
            res[sl] = vec.real
            res[p * m * K + k * p * m: p * m * K + (k + 1) * p * m] = vec.imag
            if not with_jac:
                continue
            # d vec(G)/d vec(A) = (Phi B)^T (x) (C Phi), etc.
            dA = np.kron(PhiB.T, CPhi)
            dB = np.kron(np.eye(m), CPhi)
            dC = np.kron(PhiB.T, np.eye(p))
            dD = np.eye(p * m)
            Jk = -np.hstack([dA, dB, dC, dD])
            if weights is not None:
                Jk = Jk * weights[:, :, k].reshape(-1, order="F")[:, None]
            J[sl] = Jk.real
            J[p * m * K + k * p * m: p * m * K + (k + 1) * p * m] = Jk.imag
        return res, J

    def unpack(theta):
        i = 0
        A = theta[i:i + n * n].reshape((n, n), order="F"); i += n * n
        B = theta[i:i + n * m].reshape((n, m), order="F"); i += n * m
        C = theta[i:i + p * n].reshape((p, n), order="F"); i += p * n
        D = theta[i:].reshape((p, m), order="F")
        return A, B, C, D

    theta = np.concatenate([
        model0.A.reshape(-1, order="F"), model0.B.reshape(-1, order="F"),
        model0.C.reshape(-1, order="F"), model0.D.reshape(-1, order="F"),
    ])
    res, J = residual_and_jac(*unpack(theta))
    obj = float(res @ res)
    obj0 = obj
    lam = 1e-6
    stalled = False
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        JtJ = J.T @ J
        g = J.T @ res
        if np.linalg.norm(g, ord=np.inf) < gtol * max(1.0, obj):
            break
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ))
                                       + 1e-300 * np.eye(JtJ.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = theta + step
            res_c, _ = residual_and_jac(*unpack(cand), with_jac=False)
            obj_c = float(res_c @ res_c)
            if np.isfinite(obj_c) and obj_c < obj:
                theta, obj = cand, obj_c
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 10.0
            if lam > 1e12:
                break
        if not improved:
            stalled = True
            break
        res, J = residual_and_jac(*unpack(theta))
        if obj0 - obj < gtol * max(obj0, 1.0) and n_iter >= 2:
            break
    A, B, C, D = unpack(theta)
    model = StateSpaceModel(A, B, C, D, T_s)
    poles = model.poles()
    diagnostics = {"iterations": n_iter, "initial_objective": obj0,
                   "stalled_at_max_damping": stalled}
    return IdentResult(model=model, objective=min(obj, obj0), poles=poles,
                       stable_flags=np.abs(poles) < 1.0, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# pole/zero utilities and Monte-Carlo uncertainty
# ---------------------------------------------------------------------------

def natural_frequencies(poles, T_s: float) -> np.ndarray:
    """Natural frequency in Hz of each discrete pole, |angle(z)| / (2 pi T_s)."""
    return np.abs(np.angle(np.asarray(poles))) / (2.0 * np.pi * T_s)


def match_poles(estimated, reference):
    """Optimal 1-1 assignment of estimated to reference poles (Hungarian).

    Returns (order, misassigned) where order[i] is the reference index paired
    with estimated pole i, and misassigned counts the estimated poles whose
    *nearest* reference pole differs from their assigned one.
    """
    est = np.asarray(estimated)
    ref = np.asarray(reference)
    cost = np.abs(est[:, None] - ref[None, :])
    ri, ci = linear_sum_assignment(cost)
    order = np.full(est.size, -1)
    order[ri] = ci
    nearest = np.argmin(cost, axis=1)
    misassigned = int(np.sum(nearest[ri] != ci))
    return order, misassigned


def transmission_zeros(model: StateSpaceModel, i: int, j: int) -> np.ndarray:
    """Zeros of the SISO channel (output i, input j).

    Finite generalized eigenvalues of the system-matrix pencil
    [[A, b_j], [c_i, d_ij]] - z [[I, 0], [0, 0]].
    """
    n = model.order
    M1 = np.block([[model.A, model.B[:, [j]]],
                   [model.C[[i], :], model.D[[i], [j]][:, None]]])
    M2 = np.zeros_like(M1)
    M2[:n, :n] = np.eye(n)
    vals = sla.eigvals(M1, M2)
    return vals[np.isfinite(vals)]


def _cluster_ellipses(samples, nominal):
    """95% concentration ellipse per nominal-pole cluster (nearest assignment)."""
    chi2_95_2dof = 5.991464547107979
    ellipses = []
    pts = np.column_stack([samples.real, samples.imag])
    nom = np.asarray(nominal)
    if pts.size == 0:
        return ellipses
    idx = np.argmin(np.abs(samples[:, None] - nom[None, :]), axis=1)
    for c, z0 in enumerate(nom):
        sel = pts[idx == c]
        if sel.shape[0] < 2:
            ellipses.append({"center": complex(z0), "axes": (0.0, 0.0),
                             "angle": 0.0, "count": int(sel.shape[0])})
            continue
        mean = sel.mean(axis=0)
        cov = np.cov(sel.T)
        evals, evecs = np.linalg.eigh(np.atleast_2d(cov))
        axes = np.sqrt(np.maximum(evals, 0.0) * chi2_95_2dof)
        angle = float(np.arctan2(evecs[1, -1], evecs[0, -1]))
        ellipses.append({"center": complex(mean[0], mean[1]),
                         "axes": (float(axes[-1]), float(axes[0])),
                         "angle": angle, "count": int(sel.shape[0])})
    return ellipses


def monte_carlo_uncertainty(frm, perturb_db: float, n_runs: int,
                            cfg: HankelConfig, T_s: float = 1.0,
                            seed: int = 0, weighted: bool = True,
                            nominal_poles=None) -> McResult:
    """Pole/zero scatter and FRF envelope under circular complex FRM noise.

    Each bin entry is perturbed with circular complex Gaussian noise whose
    standard deviation sits perturb_db below |BLA| (perturb_db = inf leaves
    the data untouched).  Each run re-identifies at the fixed (q, n); failed
    runs are excluded and counted.  Deterministic for a given seed.
    """
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    G0 = _as_g_array(frm)
    p, m, K = G0.shape
    rng = np.random.default_rng(seed)
    sigma = np.abs(G0) * 10.0 ** (-perturb_db / 20.0) if np.isfinite(perturb_db) \
        else np.zeros_like(G0, dtype=float)
    var = np.maximum(sigma**2, 1e-300)

    poles_runs = []
    zeros_runs = {(i, j): [] for i in range(p) for j in range(m)}
    env_lo = np.full((p, m, K), np.inf)
    env_hi = np.full((p, m, K), -np.inf)
    omega = _grid_omega(frm, T_s)
    n_failed = 0
    for _ in range(n_runs):
        noise = sigma * (rng.standard_normal(G0.shape)
                         + 1j * rng.standard_normal(G0.shape)) / np.sqrt(2.0)
        # DC and Nyquist samples must stay real for the IDFT extension
        noise[:, :, 0] = noise[:, :, 0].real * np.sqrt(2.0)
        noise[:, :, -1] = noise[:, :, -1].real * np.sqrt(2.0)
        Gp = G0 + noise
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if weighted:
                    res = subspace_identify_weighted(Gp, cfg, T_s=T_s, var_noise=var)
                else:
                    res = subspace_identify(Gp, cfg, T_s=T_s)
        except (np.linalg.LinAlgError, ValueError):
            n_failed += 1
            continue
        poles_runs.append(np.sort_complex(res.poles))
        Ghat = np.abs(res.model.frequency_response(omega))
        env_lo = np.minimum(env_lo, Ghat)
        env_hi = np.maximum(env_hi, Ghat)
        for key in zeros_runs:
            zeros_runs[key].append(np.sort_complex(transmission_zeros(res.model, *key)))
    if not poles_runs:
        raise np.linalg.LinAlgError("all Monte-Carlo identification runs failed")
    poles_arr = np.array(poles_runs)
    if nominal_poles is None:
        nominal_poles = np.sort_complex(poles_arr[0])
    ell = _cluster_ellipses(poles_arr.reshape(-1), nominal_poles)
    zeros_arr = {}
    for key, lst in zeros_runs.items():
        if lst:
            nz = min(z.size for z in lst)
            zeros_arr[key] = np.array([z[:nz] for z in lst])
        else:
            zeros_arr[key] = np.empty((0, 0), dtype=complex)
    return McResult(poles=poles_arr, zeros=zeros_arr, envelope_lo=env_lo,
                    envelope_hi=env_hi, ellipses=ell, n_failed=n_failed, seed=seed)
