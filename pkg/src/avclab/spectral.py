"""Non-parametric frequency-response estimation.

Two estimators are provided.  ``h1_estimate`` is the classical windowed,
segment-averaged H1 = S_yu / S_uu with coherence.  ``lpm_estimate`` is a
robust local-polynomial analysis of periodic multi-reference records: period
averaging gives the raw spectra, period-to-period differences give a
transient-immune noise variance, a per-bin local least squares (FRF and
transient both modeled as low-order polynomials in the bin offset) removes
the leakage/transient contribution, and realization-to-realization scatter
of the corrected FRM gives the total (noise + nonlinear) variance.

FFT convention everywhere: forward transform unnormalized, 1/N on the
inverse; bin k maps to k * f_sample / N.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

log = logging.getLogger(__name__)

__all__ = [
    "SpectralConfig",
    "LpmConfig",
    "FrmEstimate",
    "ExperimentRecords",
    "h1_estimate",
    "lpm_estimate",
    "transient_contribution",
    "write_frm_csv",
    "read_frm_csv",
]

FFT_CONVENTION = "forward unnormalized, 1/N on inverse; bin k = k*f_sample/N"


@dataclass
class SpectralConfig:
    """Segmentation/windowing setup for classical spectral averaging."""

    window: str = "hann"
    n_averages: int = 8
    overlap_fraction: float = 0.5
    discard_periods: int = 0
    fft_length: int = 1024

    def validate(self):
        if self.window not in ("hann", "rect"):
            raise ValueError("window must be 'hann' or 'rect'")
        if not (0.0 <= self.overlap_fraction < 1.0):
            raise ValueError("overlap_fraction must be in [0, 1)")
        if self.n_averages < 1:
            raise ValueError("n_averages must be >= 1")
        if self.fft_length < 2:
            raise ValueError("fft_length must be >= 2")
        if self.discard_periods < 0:
            raise ValueError("discard_periods must be >= 0")


@dataclass
class LpmConfig:
    """Local polynomial setup: order R, residual degrees of freedom, half window.

    The half window follows 2 n_w + 1 - (R + 1)(n_u + 1) = dof_target, the
    bin budget of a local fit with an (R+1)-term polynomial per input channel
    plus one transient polynomial.
    """

    poly_order: int
    dof_target: int
    n_half_window: int

    def validate(self, n_inputs: int):
        dof = 2 * self.n_half_window + 1 - (self.poly_order + 1) * (n_inputs + 1)
        if dof != self.dof_target:
            raise ValueError(
                f"inconsistent LPM config: 2*{self.n_half_window}+1 - "
                f"(R+1)(n_u+1) = {dof} != dof_target {self.dof_target}"
            )
        if self.dof_target < 1:
            raise ValueError("dof_target must be >= 1")

    @classmethod
    def from_dof(cls, poly_order: int, dof_target: int, n_inputs: int) -> "LpmConfig":
        """Derive the half window from the order/dof budget (paper default 6/8)."""
        two_nw = dof_target - 1 + (poly_order + 1) * (n_inputs + 1)
        if two_nw % 2 != 0:
            raise ValueError(
                f"dof_target {dof_target} not reachable for R={poly_order}, "
                f"n_u={n_inputs}: window size would be fractional"
            )
        cfg = cls(poly_order, dof_target, two_nw // 2)
        cfg.validate(n_inputs)
        return cfg


@dataclass
class FrmEstimate:
    """Frequency response matrix samples with variance decomposition.

    G has shape (n_outputs, n_inputs, n_bins).  var_noise / var_total /
    coherence are per-entry per-bin arrays when the producing estimator
    provides them, else None.  var_total >= var_noise is enforced by
    clamping (logged via meta['clamped_bins']).
    """

    freqs: np.ndarray
    G: np.ndarray
    var_noise: np.ndarray = None
    var_total: np.ndarray = None
    coherence: np.ndarray = None
    dof: int = None
    valid: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.freqs.size, dtype=bool)

    @property
    def n_outputs(self):
        return self.G.shape[0]

    @property
    def n_inputs(self):
        return self.G.shape[1]


@dataclass
class ExperimentRecords:
    """Periodic multi-reference records: inputs/outputs per (realization, experiment)."""

    u: np.ndarray          # (R, E, n_u, P*N)
    y: np.ndarray          # (R, E, p,   P*N)
    n_periods: int
    f_sample: float
    mixing: np.ndarray = None   # (n_u, E) complex, experiment e = column e

    def validate(self):
        if self.u.ndim != 4 or self.y.ndim != 4:
            raise ValueError("u and y must be 4-d (realization, experiment, "
                             "channel, sample)")
        if self.u.shape[0] != self.y.shape[0] or self.u.shape[1] != self.y.shape[1] \
                or self.u.shape[3] != self.y.shape[3]:
            raise ValueError("u and y record shapes are inconsistent")
        if self.u.shape[3] % self.n_periods != 0:
            raise ValueError("record length must be a whole number of periods")


# ---------------------------------------------------------------------------
# classical H1 spectral analysis
# ---------------------------------------------------------------------------

def h1_estimate(u, y, cfg: SpectralConfig, f_sample: float) -> FrmEstimate:
    """Windowed, averaged H1 estimate G = S_yu / S_uu with coherence.

    Single input per call; y may hold several outputs (rows).  Bins where
    the averaged input auto-spectrum falls below the 1e-300 floor are marked
    invalid rather than extrapolated.
    """
    cfg.validate()
    u = np.asarray(u, dtype=float).reshape(-1)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] != u.size:
        if y.shape[0] == u.size:
            y = y.T
        else:
            raise ValueError("u and y must have the same record length")
    L = cfg.fft_length
    start = cfg.discard_periods * L
    if start >= u.size:
        raise ValueError("discard_periods leaves no data")
    u = u[start:]
    y = y[:, start:]
    hop = max(1, int(round(L * (1.0 - cfg.overlap_fraction))))
    n_possible = 1 + (u.size - L) // hop if u.size >= L else 0
    if n_possible < cfg.n_averages:
        raise ValueError(
            f"record supports only {n_possible} segments of length {L}; "
            f"{cfg.n_averages} requested"
        )
    if cfg.window == "hann":
        w = get_window("hann", L, fftbins=True)
        amp_correction = 2.0
    else:
        w = np.ones(L)
        amp_correction = 1.0
    log.debug("h1_estimate window=%s amplitude correction %.1f", cfg.window,
              amp_correction)

    p = y.shape[0]
    K = L // 2 + 1
    S_uu = np.zeros(K)
    S_yy = np.zeros((p, K))
    S_yu = np.zeros((p, K), dtype=complex)
    for s in range(cfg.n_averages):
        sl = slice(s * hop, s * hop + L)
        U = np.fft.rfft(w * u[sl])
        S_uu += np.abs(U) ** 2
        for i in range(p):
            Y = np.fft.rfft(w * y[i, sl])
            S_yy[i] += np.abs(Y) ** 2
            S_yu[i] += Y * np.conj(U)
    S_uu /= cfg.n_averages
    S_yy /= cfg.n_averages
    S_yu /= cfg.n_averages

    valid = S_uu > 1e-300
    G = np.full((p, 1, K), np.nan + 0j)
    coh = np.full((p, 1, K), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        G[:, 0, valid] = S_yu[:, valid] / S_uu[valid]
        denom = S_uu[valid] * S_yy[:, valid]
        coh[:, 0, valid] = np.where(denom > 0,
                                    np.abs(S_yu[:, valid]) ** 2 / denom, 1.0)
    coh = np.clip(coh, 0.0, 1.0)
    freqs = np.arange(K) * f_sample / L
    meta = {
        "estimator": "h1",
        "fft_convention": FFT_CONVENTION,
        "window": cfg.window,
        "amplitude_correction": amp_correction,
        "n_averages": cfg.n_averages,
        "overlap_fraction": cfg.overlap_fraction,
    }
    return FrmEstimate(freqs=freqs, G=G, coherence=coh, valid=valid, meta=meta)


# ---------------------------------------------------------------------------
# robust local polynomial method
# ---------------------------------------------------------------------------

def _period_spectra(records: ExperimentRecords, discard_periods: int):
    """Per-period one-sided DFT spectra of all channels.

    Returns (U, Y) with shapes (R, E, P_kept, n_u, K) / (R, E, P_kept, p, K).
    """
    R, E, n_u, L = records.u.shape
    p = records.y.shape[2]
    N = L // records.n_periods
    P = records.n_periods - discard_periods
    if P < 1:
        raise ValueError("discard_periods leaves no period")
    K = N // 2 + 1
    U = np.empty((R, E, P, n_u, K), dtype=complex)
    Y = np.empty((R, E, P, p, K), dtype=complex)
    for q in range(P):
        sl = slice((q + discard_periods) * N, (q + discard_periods + 1) * N)
        U[:, :, q] = np.fft.rfft(records.u[:, :, :, sl], axis=-1)
        Y[:, :, q] = np.fft.rfft(records.y[:, :, :, sl], axis=-1)
    return U, Y


def _difference_noise_variance(D, n_w, R_poly):
    """Per-bin noise variance from local-poly residuals of difference spectra.

    For every bin, the period-to-period difference spectra are fit with a
    degree-R polynomial over the 2 n_w + 1 window; the residual power
    estimates 2 sigma^2 per difference.  Returns (var_period, smooth_energy)
    where var_period has shape (R, E, p, K) and smooth_energy (R, E) is the
    total energy captured by the polynomial part (transient indicator).
    """
    Rn, E, Pm1, p, K = D.shape
    n_win = 2 * n_w + 1
    dof_w = n_win - (R_poly + 1)
    proj_cache = {}
    flat = D.reshape(-1, K)                 # (R*E*(P-1)*p, K)
    rss_flat = np.zeros((flat.shape[0], K))
    smooth_flat = np.zeros(flat.shape[0])
    for k in range(K):
        lo = min(max(k - n_w, 0), K - n_win)
        rel = np.arange(lo, lo + n_win) - k
        key = rel[0]
        if key not in proj_cache:
            V = np.vander(rel.astype(float), R_poly + 1, increasing=True)
            Qfull, _ = np.linalg.qr(V, mode="complete")
            proj_cache[key] = Qfull[:, R_poly + 1:].T     # residual basis rows
        Z = proj_cache[key]
        seg = flat[:, lo: lo + n_win]
        res = seg @ Z.T
        rss_flat[:, k] = np.sum(np.abs(res) ** 2, axis=1)
        smooth_flat += (np.sum(np.abs(seg) ** 2, axis=1)
                        - rss_flat[:, k]) / n_win
    var_flat = rss_flat / (2.0 * dof_w)
    var_period = var_flat.reshape(Rn, E, Pm1, p, K).mean(axis=2)
    smooth = smooth_flat.reshape(Rn, E, Pm1, p).sum(axis=(2, 3))
    return var_period, smooth


def _local_fit(Ymean_r, Umean_r, k, n_w, R_poly, cond_limit=1e10):
    """Per-bin local least squares over the (offset, experiment) window.

    Model per output row: Y_e(k+delta) = sum_s delta^s g_s . U_e(k+delta)
    + sum_s delta^s t_{s,e}, i.e. an (R+1)-term polynomial FRF row plus an
    (R+1)-term transient polynomial per experiment.  Returns (g0, t0, cond):
    FRF row estimates (p, n_u), transient estimates (p, E) at the window
    center, and the regressor condition number.
    """
    E, n_u, K = Umean_r.shape[0], Umean_r.shape[1], Umean_r.shape[2]
    p = Ymean_r.shape[1]
    lo = min(max(k - n_w, 0), K - (2 * n_w + 1))
    offsets = np.arange(lo, lo + 2 * n_w + 1) - k
    n_g = (R_poly + 1) * n_u
    n_t = (R_poly + 1) * E
    rows = offsets.size * E
    X = np.zeros((rows, n_g + n_t), dtype=complex)
    for di, d in enumerate(offsets):
        dpow = d ** np.arange(R_poly + 1)
        for e in range(E):
            row = di * E + e
            X[row, :n_g] = np.kron(dpow, Umean_r[e, :, k + d])
            X[row, n_g + e * (R_poly + 1): n_g + (e + 1) * (R_poly + 1)] = dpow
    # scale columns for conditioning
    col_scale = np.linalg.norm(X, axis=0)
    col_scale[col_scale == 0] = 1.0
    Xs = X / col_scale
    q_fac, r_fac = np.linalg.qr(Xs)
    diag = np.abs(np.diag(r_fac))
    cond = diag.max() / max(diag.min(), 1e-300)
    g0 = np.zeros((p, n_u), dtype=complex)
    t0 = np.zeros((p, E), dtype=complex)
    if cond > cond_limit:
        return g0, t0, cond
    for i in range(p):
        b = np.empty(rows, dtype=complex)
        for di, d in enumerate(offsets):
            b[di * E: (di + 1) * E] = Ymean_r[:, i, k + d]
        theta = np.linalg.solve(r_fac, q_fac.conj().T @ b) / col_scale
        g0[i] = theta[:n_u]                       # delta^0 FRF coefficients
        t0[i] = theta[n_g::R_poly + 1]            # delta^0 transient terms
    return g0, t0, cond


def lpm_estimate(records: ExperimentRecords, cfg: LpmConfig,
                 discard_periods: int = 1) -> FrmEstimate:
    """Robust LPM: BLA with separated noise and total (noise+nonlinear) variance.

    Per realization, the n_u experiment spectra are period-averaged and the
    FRM follows from the matrix division (Y - T) U^{-1}, with the transient T
    taken from the per-bin local polynomial fit.  The transient correction is
    gated on the period-to-period difference energy, so records already in
    exact steady state reproduce the plain division.  Noise variance comes
    from period-to-period differences (transient-immune to first order),
    total variance from realization-to-realization scatter; var_total is
    clamped to >= var_noise with the clamped bins logged.
    """
    records.validate()
    R, E, n_u, L = records.u.shape
    p = records.y.shape[2]
    if records.n_periods - discard_periods < 2:
        raise ValueError("need at least two kept periods for the noise variance")
    if E != n_u:
        raise ValueError("multi-reference LPM needs one experiment per input")
    cfg.validate(n_u)
    U, Y = _period_spectra(records, discard_periods)
    P = U.shape[2]
    K = U.shape[-1]
    n_w = cfg.n_half_window
    if 2 * n_w + 1 > K:
        raise ValueError("local window exceeds the available bins")

    Umean = U.mean(axis=2)      # (R, E, n_u, K)
    Ymean = Y.mean(axis=2)      # (R, E, p, K)

    # Noise variance from the local-polynomial residual of the
    # period-difference spectra: differencing cancels the steady-state and
    # any periodic (nonlinear) distortion exactly, and the polynomial
    # absorbs the smooth part of the transient skirt.
    D = np.diff(Y, axis=2)      # (R, E, P-1, p, K)
    var_period, _ = _difference_noise_variance(D, n_w, cfg.poly_order)
    var_mean = var_period / P   # variance of the period mean

    # Transient gate per (realization, experiment): for pure noise the
    # median per-bin difference power sits at 2 ln2 sigma^2, while a decaying
    # transient raises it across the band through its off-resonance skirt.
    med_diff = np.median(np.abs(D) ** 2, axis=(2, 3, 4))
    med_sigma2 = np.median(var_period, axis=(2, 3))
    signal_scale = np.mean(np.abs(Ymean) ** 2, axis=(-2, -1))
    gate = (med_diff > 3.0 * 2.0 * np.log(2.0) * med_sigma2) \
        & (med_diff > 1e-20 * signal_scale)

    if records.mixing is not None:
        mix = np.asarray(records.mixing)
        if np.linalg.cond(mix) > 1e12:
            raise np.linalg.LinAlgError("mixing matrix is singular")

    G_r = np.empty((R, p, n_u, K), dtype=complex)
    var_noise_r = np.empty((R, p, n_u, K))
    valid = np.ones(K, dtype=bool)
    for r in range(R):
        transient_present = np.any(gate[r])
        for k in range(K):
            Ub = Umean[r, :, :, k].T        # (n_u, E): column e = experiment e
            # unexcited or ill-conditioned bins are flagged, never extrapolated
            singular = False
            try:
                if np.linalg.cond(Ub) > 1e10:
                    singular = True
                else:
                    Uinv = np.linalg.inv(Ub)
            except np.linalg.LinAlgError:
                singular = True
            if singular:
                valid[k] = False
                G_r[r, :, :, k] = np.nan
                var_noise_r[r, :, :, k] = np.nan
                continue
            Yc = Ymean[r, :, :, k].T        # (p, E)
            if transient_present:
                _, t0, cond = _local_fit(Ymean[r], Umean[r], k, n_w,
                                         cfg.poly_order)
                if cond > 1e10:
                    valid[k] = False
                Yc = Yc - t0
            G_r[r, :, :, k] = Yc @ Uinv
            w2 = np.abs(Uinv) ** 2           # (E, n_u)
            var_noise_r[r, :, :, k] = var_mean[r, :, :, k].T @ w2

    G = G_r.mean(axis=0)
    var_noise = var_noise_r.mean(axis=0) / R
    if R >= 2:
        var_total = np.sum(np.abs(G_r - G[None]) ** 2, axis=0) / (R * (R - 1))
    else:
        var_total = var_noise.copy()
    clamped = var_total < var_noise
    n_clamped = int(np.sum(clamped))
    if n_clamped:
        log.debug("lpm_estimate clamped var_total at %d entries", n_clamped)
        var_total = np.maximum(var_total, var_noise)

    freqs = np.arange(K) * records.f_sample / (L // records.n_periods)
    meta = {
        "estimator": "lpm",
        "fft_convention": FFT_CONVENTION,
        "poly_order": cfg.poly_order,
        "dof": cfg.dof_target,
        "n_half_window": n_w,
        "periods_used": P,
        "realizations": R,
        "transient_gate": gate.tolist(),
        "clamped_bins": n_clamped,
    }
    return FrmEstimate(freqs=freqs, G=G, var_noise=var_noise,
                       var_total=var_total, dof=cfg.dof_target, valid=valid,
                       meta=meta)


def transient_contribution(record, period_length: int, floor_db: float = -400.0):
    """Per-period spectral deviation from the final period, in dB.

    Supports the discard-first-period decision: a decaying transient shows
    up as period-1 deviation above period-2 deviation, while steady-state
    records sit at the noise floor.  Returns (deviation_db, freqs_normalized)
    with deviation_db of shape (n_periods, n_bins); exact zeros are floored
    at floor_db.
    """
    record = np.asarray(record, dtype=float).reshape(-1)
    n_periods = record.size // period_length
    if n_periods < 2:
        raise ValueError("need at least two periods")
    spectra = np.array([
        np.fft.rfft(record[q * period_length:(q + 1) * period_length])
        for q in range(n_periods)
    ])
    ref = spectra[-1]
    dev = np.abs(spectra - ref)
    with np.errstate(divide="ignore"):
        dev_db = 20.0 * np.log10(dev)
    dev_db = np.maximum(dev_db, floor_db)
    freqs = np.arange(spectra.shape[1]) / period_length
    return dev_db, freqs


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_frm_csv(path, frm: FrmEstimate, sidecar_path=None):
    """FRM as CSV (freq_hz, re/im G_ij, variances, coherence) + JSON sidecar."""
    p, m, K = frm.G.shape
    cols = [frm.freqs]
    header = ["freq_hz"]
    def _entry(arr, i, j):
        if arr is None:
            return np.full(K, np.nan)
        return arr[i, j]
    for i in range(p):
        for j in range(m):
            tag = f"{i + 1}{j + 1}"
            cols += [frm.G[i, j].real, frm.G[i, j].imag,
                     _entry(frm.var_noise, i, j), _entry(frm.var_total, i, j),
                     _entry(frm.coherence, i, j)]
            header += [f"re_G_{tag}", f"im_G_{tag}", f"var_noise_{tag}",
                       f"var_total_{tag}", f"coherence_{tag}"]
    np.savetxt(path, np.column_stack(cols), delimiter=",",
               header=",".join(header), comments="", fmt="%.17g")
    if sidecar_path is not None:
        side = dict(frm.meta)
        side["n_outputs"] = p
        side["n_inputs"] = m
        side["dof"] = frm.dof
        with open(sidecar_path, "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True, default=str)


def read_frm_csv(path, n_outputs: int, n_inputs: int) -> FrmEstimate:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    freqs = data[:, 0]
    K = freqs.size
    G = np.empty((n_outputs, n_inputs, K), dtype=complex)
    vn = np.empty((n_outputs, n_inputs, K))
    vt = np.empty((n_outputs, n_inputs, K))
    coh = np.empty((n_outputs, n_inputs, K))
    col = 1
    for i in range(n_outputs):
        for j in range(n_inputs):
            G[i, j] = data[:, col] + 1j * data[:, col + 1]
            vn[i, j] = data[:, col + 2]
            vt[i, j] = data[:, col + 3]
            coh[i, j] = data[:, col + 4]
            col += 5
    def _none_if_nan(a):
        return None if np.all(np.isnan(a)) else a
    return FrmEstimate(freqs=freqs, G=G, var_noise=_none_if_nan(vn),
                       var_total=_none_if_nan(vt), coherence=_none_if_nan(coh))
