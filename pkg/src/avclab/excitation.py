"""Periodic multisine excitation design for single- and multi-reference experiments.

A multisine is a sum of cosines placed on an exact DFT grid,

    x(t_k) = sum_i A_i cos(2 pi f_i t_k + phi_i),

so that the realized signal is exactly periodic.  The module covers phase
design (random, Schroeder, crest-factor minimized via quasi-Newton/DFP on a
smoothed peak norm), multi-reference mixing matrices (Hadamard and
DFT/orthogonal), and deterministic realization of full experiment sets.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import hadamard as _scipy_hadamard
from scipy.linalg.blas import dger as _dger

__all__ = [
    "MultisineSpec",
    "MixingMatrix",
    "ExcitationSet",
    "RealizedExperiment",
    "CfIterationLog",
    "synthesize_multisine",
    "crest_factor",
    "schroeder_phases",
    "minimize_crest_factor",
    "hadamard_mixing",
    "orthogonal_mixing",
    "realize_experiment",
    "save_spec",
    "load_spec",
    "write_signal_csv",
]

_TWO_PI = 2.0 * np.pi


@dataclass
class MultisineSpec:
    """Frequency-domain description of one periodic multisine signal.

    active_lines are DFT bin indices (1-based in the sense that DC = bin 0 is
    excluded); line k corresponds to the frequency k * f_sample / n_samples.
    """

    f_sample: float
    n_samples_per_period: int
    active_lines: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray
    rms_target: float = 1.0

    def __post_init__(self):
        self.active_lines = np.asarray(self.active_lines, dtype=int).reshape(-1)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        self.phases = np.asarray(self.phases, dtype=float).reshape(-1)

    @property
    def n_lines(self) -> int:
        return self.active_lines.size

    @property
    def frequencies(self) -> np.ndarray:
        """Frequencies of the active lines in Hz."""
        return self.active_lines * self.f_sample / self.n_samples_per_period

    def validate(self):
        n = self.n_samples_per_period
        if n <= 0 or (n & (n - 1)) != 0:
            raise ValueError(f"n_samples_per_period must be a power of two, got {n}")
        if self.active_lines.size == 0:
            raise ValueError("active_lines must not be empty")
        if np.any(np.diff(self.active_lines) <= 0):
            raise ValueError("active_lines must be strictly increasing")
        if self.active_lines[0] < 1:
            raise ValueError("active_lines must exclude DC (all indices >= 1)")
        if self.active_lines[-1] >= n // 2:
            raise ValueError(
                f"active line {self.active_lines[-1]} is at or above Nyquist (bin {n // 2})"
            )
        if self.amplitudes.shape != self.active_lines.shape:
            raise ValueError("amplitudes must have one entry per active line")
        if self.phases.shape != self.active_lines.shape:
            raise ValueError("phases must have one entry per active line")
        if np.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be non-negative")
        if not np.all(np.isfinite(self.phases)):
            raise ValueError("phases must be finite")
        if not (self.f_sample > 0):
            raise ValueError("f_sample must be positive")

    @classmethod
    def flat(cls, f_sample, n_samples_per_period, active_lines, rms_target=1.0,
             phases=None):
        """Spec with a flat (uniform) amplitude spectrum over the active lines."""
        lines = np.asarray(active_lines, dtype=int).reshape(-1)
        amps = np.ones(lines.size)
        if phases is None:
            phases = np.zeros(lines.size)
        return cls(f_sample, n_samples_per_period, lines, amps, np.asarray(phases, float),
                   rms_target)


@dataclass
class MixingMatrix:
    """Unitary multi-reference mixing matrix (experiment e uses column e)."""

    n_inputs: int
    entries: np.ndarray
    kind: str = "generic"

    def validate(self, tol=1e-12):
        T = np.asarray(self.entries)
        if T.shape != (self.n_inputs, self.n_inputs):
            raise ValueError("mixing matrix must be square of size n_inputs")
        err = np.max(np.abs(T @ T.conj().T - np.eye(self.n_inputs)))
        if err > tol:
            raise ValueError(f"mixing matrix is not unitary: max |T T^H - I| = {err:.3e}")


@dataclass
class ExcitationSet:
    """A full experiment plan: base multisine, optional mixing, repetition counts.

    phase_mode 'random' draws fresh uniform phases per realization (required
    when realization-to-realization nonlinear variance is wanted); 'fixed'
    keeps the phases stored in the spec (Schroeder or CF-minimized designs).
    """

    spec: MultisineSpec
    mixing: MixingMatrix | None
    realizations: int
    periods_per_realization: int
    seed: int
    phase_mode: str = "random"

    def validate(self):
        self.spec.validate()
        if self.mixing is not None:
            self.mixing.validate()
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")
        if self.periods_per_realization < 1:
            raise ValueError("periods_per_realization must be >= 1")
        if self.phase_mode not in ("random", "fixed"):
            raise ValueError(f"unknown phase_mode {self.phase_mode!r}")
        if self.seed is None:
            raise ValueError("seed is required for reproducible realizations")


@dataclass
class RealizedExperiment:
    """Realized time series for all realizations x experiments x channels."""

    t: np.ndarray              # (periods * n_samples,)
    u: np.ndarray              # (realizations, n_experiments, n_channels, len(t))
    phases: np.ndarray         # (realizations, n_lines) phases actually used
    exc_set: ExcitationSet

    @property
    def n_realizations(self) -> int:
        return self.u.shape[0]

    @property
    def n_experiments(self) -> int:
        return self.u.shape[1]

    @property
    def n_channels(self) -> int:
        return self.u.shape[2]


def _synth(n_samples, lines, amps, phases):
    """One period of sum_i A_i cos(2 pi l_i k / N + phi_i) via an inverse FFT."""
    c = np.zeros(n_samples, dtype=complex)
    c[lines] = amps * np.exp(1j * phases)
    return np.real(n_samples * np.fft.ifft(c))


def _rms_scale(spec: MultisineSpec) -> float:
    """Scale factor mapping unit-amplitude synthesis to the requested RMS.

    Distinct cosine lines on the exact DFT grid are orthogonal over one
    period, so the RMS is sqrt(sum A_i^2 / 2) analytically.
    """
    natural_rms = np.sqrt(np.sum(spec.amplitudes**2) / 2.0)
    if natural_rms == 0.0:
        raise ValueError("all amplitudes are zero")
    if spec.rms_target is None:
        return 1.0
    return spec.rms_target / natural_rms


def synthesize_multisine(spec: MultisineSpec) -> np.ndarray:
    """Realize one exact period of the multisine, scaled to spec.rms_target.

    Returns the sampled series x(t_k), k = 0 .. n_samples_per_period - 1.
    """
    spec.validate()
    x = _synth(spec.n_samples_per_period, spec.active_lines, spec.amplitudes,
               spec.phases)
    return _rms_scale(spec) * x


def crest_factor(x) -> float:
    """Peak value over RMS: ||x||_inf / sqrt(mean(x^2)).  >= 1 for any signal."""
    x = np.asarray(x, dtype=float).reshape(-1)
    rms = np.sqrt(np.mean(x * x))
    if rms == 0.0:
        raise ValueError("crest factor undefined for an all-zero signal")
    return float(np.max(np.abs(x)) / rms)


def schroeder_phases(n_lines: int) -> np.ndarray:
    """Quadratic phase schedule phi_i = -pi i (i - 1) / n_lines, i = 1..n_lines.

    Gives a sweep-like multisine with crest factor around 1.65-1.7 for a
    uniform spectrum over a contiguous band.
    """
    if n_lines < 1:
        raise ValueError("n_lines must be >= 1")
    i = np.arange(1, n_lines + 1, dtype=float)
    return -np.pi * i * (i - 1.0) / float(n_lines)


@dataclass
class CfIterationLog:
    """Per-iteration record of the crest-factor minimization."""

    iterations: list = field(default_factory=list)   # (iter, p, cf_current, cf_best)
    n_feval: int = 0
    cf_initial: float = np.nan
    cf_final: float = np.nan

    def cf_best_trace(self) -> np.ndarray:
        return np.array([row[3] for row in self.iterations])


class _PnormObjective:
    """Smoothed crest-factor surrogate ((1/N) sum |x_k|^p)^(1/p) / rms.

    The RMS of a multisine is phase-independent, so only the p-norm is
    minimized.  Gradients are evaluated with one FFT per call.
    """

    def __init__(self, spec: MultisineSpec, p: int):
        self.n = spec.n_samples_per_period
        self.lines = spec.active_lines
        self.amps = spec.amplitudes * _rms_scale(spec)
        self.rms = np.sqrt(np.sum(self.amps**2) / 2.0)
        self.p = p

    def value_grad(self, phases):
        x = _synth(self.n, self.lines, self.amps, phases)
        p = self.p
        m = np.max(np.abs(x))
        # factored form avoids overflow for large p
        r = np.abs(x) / m
        mean_rp = np.mean(r**p)
        f = m * mean_rp ** (1.0 / p)
        # d f / d phi_i = f^(1-p) * (1/N) sum_k |x|^(p-1) sgn(x) dx_k/dphi_i
        g_k = (np.abs(x) / f) ** (p - 1) * np.sign(x) / self.n
        spec_g = self.n * np.fft.ifft(g_k)
        grad = -self.amps * np.imag(np.exp(1j * phases) * spec_g[self.lines])
        return f / self.rms, grad / self.rms


def _dfp_stage(obj: _PnormObjective, phases, max_iters, tol, log: CfIterationLog,
               spec_scaled_amps, it_offset):
    """One quasi-Newton descent stage at fixed p with DFP inverse-Hessian updates."""
    n = phases.size
    h_inv = np.asfortranarray(np.eye(n))
    f, g = obj.value_grad(phases)
    log.n_feval += 1
    best_cf = np.inf
    best_phases = phases.copy()
    it = 0
    while it < max_iters:
        d = -h_inv @ g
        gd = g @ d
        if gd >= 0:
            h_inv = np.asfortranarray(np.eye(n))
            d = -g
            gd = g @ d
            if gd >= 0:
                break
        step = 1.0 if it > 0 else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12))
        f_new = None
        for _ in range(40):
            cand = phases + step * d
            f_try, g_try = obj.value_grad(cand)
            log.n_feval += 1
            if not np.isfinite(f_try):
                raise FloatingPointError(
                    "crest-factor line search produced a non-finite objective"
                )
            if f_try <= f + 1e-4 * step * gd:
                f_new, g_new, step_ok = f_try, g_try, step
                break
            step *= 0.5
        if f_new is None:
            break
        s = step_ok * d
        y = g_new - g
        sy = s @ y
        hy = h_inv @ y
        yhy = y @ hy
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y) and yhy > 0:
            # in-place rank-1 DFP update: H += s s^T/s.y - (H y)(H y)^T/y.H y
            h_inv = _dger(1.0 / sy, s, s, a=h_inv, overwrite_a=1)
            h_inv = _dger(-1.0 / yhy, hy, hy, a=h_inv, overwrite_a=1)
        phases = phases + s
        improvement = f - f_new
        f, g = f_new, g_new
        cf_now = crest_factor(_synth(obj.n, obj.lines, obj.amps, phases))
        if cf_now < best_cf:
            best_cf = cf_now
            best_phases = phases.copy()
        log.iterations.append((it_offset + it, obj.p, cf_now, best_cf))
        it += 1
        if improvement < tol * max(abs(f), 1.0):
            break
    return best_phases, best_cf, it_offset + it


def minimize_crest_factor(spec: MultisineSpec, max_iters: int = 400,
                          tol: float = 1e-7):
    """Minimize the crest factor over the line phases (quasi-Newton with DFP).

    The search is initialized with the Schroeder multisine and works on a
    smoothed infinity-norm surrogate, escalating the p-norm order (4, 8, 16,
    then doubling while the true crest factor still improves) with a
    backtracking line search.  Returns (optimized spec, iteration log); the
    returned crest factor never exceeds that of the input spec.
    """
    spec.validate()
    log = CfIterationLog()
    amps_scaled = spec.amplitudes * _rms_scale(spec)
    cf_in = crest_factor(synthesize_multisine(spec))
    log.cf_initial = cf_in

    best_phases = spec.phases.copy()
    best_cf = cf_in

    phases = schroeder_phases(spec.n_lines)
    cf_schroeder = crest_factor(_synth(spec.n_samples_per_period, spec.active_lines,
                                       amps_scaled, phases))
    if cf_schroeder < best_cf:
        best_cf = cf_schroeder
        best_phases = phases.copy()

    it_offset = 0
    p = 4
    prev_stage_cf = np.inf
    stage_budget = max(40, max_iters // 6)
    while p <= 256 and it_offset < max_iters:
        obj = _PnormObjective(replace(spec, phases=phases), p)
        budget = min(stage_budget, max_iters - it_offset)
        stage_phases, stage_cf, it_offset = _dfp_stage(
            obj, phases, budget, tol, log, amps_scaled, it_offset)
        phases = stage_phases
        if stage_cf < best_cf:
            best_cf = stage_cf
            best_phases = stage_phases.copy()
        # infinity-norm check: keep escalating p only while the true CF improves
        if p >= 16 and stage_cf > prev_stage_cf - 1e-4:
            break
        prev_stage_cf = stage_cf
        p *= 2

    log.cf_final = best_cf
    return replace(spec, phases=best_phases), log


def hadamard_mixing(n_inputs: int) -> MixingMatrix:
    """Hadamard mixing T = H_n / sqrt(n), valid for power-of-two channel counts.

    Built from the recursive Kronecker construction H_2 = [[1, 1], [1, -1]],
    H_{2^m} = H_2 (x) H_{2^{m-1}}.  Rows are orthonormal and all entries are
    +-1/sqrt(n), so every experiment is realizable with a single generator
    plus inverters.
    """
    if n_inputs < 1 or (n_inputs & (n_inputs - 1)) != 0:
        raise ValueError(
            f"Hadamard mixing needs a power-of-two channel count (got {n_inputs}); "
            "use orthogonal_mixing for arbitrary counts"
        )
    T = _scipy_hadamard(n_inputs).astype(float) / np.sqrt(n_inputs)
    mix = MixingMatrix(n_inputs, T, kind="hadamard")
    mix.validate()
    return mix


def orthogonal_mixing(n_inputs: int) -> MixingMatrix:
    """DFT-based mixing T_pq = exp(j 2 pi (p-1)(q-1) / n) / sqrt(n), any n >= 1."""
    if n_inputs < 1:
        raise ValueError("n_inputs must be >= 1")
    p = np.arange(n_inputs)
    T = np.exp(1j * _TWO_PI * np.outer(p, p) / n_inputs) / np.sqrt(n_inputs)
    mix = MixingMatrix(n_inputs, T, kind="orthogonal")
    mix.validate()
    return mix


def realize_experiment(exc_set: ExcitationSet,
                       for_nonlinear_variance: bool = False) -> RealizedExperiment:
    """Realize all (realization, experiment) input records of an excitation set.

    With a mixing matrix T, experiment e drives channel i with the base
    multisine of realization r scaled/phase-shifted by T[i, e]; without one,
    a single-channel single experiment is produced.  Output is deterministic
    for a given seed.
    """
    exc_set.validate()
    spec = exc_set.spec
    if for_nonlinear_variance and exc_set.phase_mode == "fixed":
        warnings.warn(
            "fixed-phase (Schroeder/CF-minimized) excitation makes the nonlinear "
            "contribution unquantifiable: realization-to-realization variance "
            "needs independent random phases",
            stacklevel=2,
        )
    if exc_set.mixing is not None:
        T = np.asarray(exc_set.mixing.entries)
        if T.shape[0] != exc_set.mixing.n_inputs:
            raise ValueError("mixing matrix size mismatch")
        n_exp = n_chan = exc_set.mixing.n_inputs
    else:
        T = np.ones((1, 1), dtype=complex)
        n_exp = n_chan = 1

    n = spec.n_samples_per_period
    n_per = exc_set.periods_per_realization
    scale = _rms_scale(spec)
    amps = spec.amplitudes * scale
    rng = np.random.default_rng(exc_set.seed)

    u = np.empty((exc_set.realizations, n_exp, n_chan, n_per * n))
    phases_used = np.empty((exc_set.realizations, spec.n_lines))
    for r in range(exc_set.realizations):
        if exc_set.phase_mode == "random":
            phases = rng.uniform(0.0, _TWO_PI, size=spec.n_lines)
        else:
            phases = spec.phases.copy()
        phases_used[r] = phases
        base = amps * np.exp(1j * phases)
        for e in range(n_exp):
            for i in range(n_chan):
                coeff = T[i, e]
                one_period = _synth(n, spec.active_lines,
                                    np.abs(coeff) * amps,
                                    phases + np.angle(coeff))
                u[r, e, i] = np.tile(one_period, n_per)
        del base
    t = np.arange(n_per * n) / spec.f_sample
    return RealizedExperiment(t=t, u=u, phases=phases_used, exc_set=exc_set)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_spec(spec: MultisineSpec, path):
    """Write a multisine spec as JSON (fields mirror MultisineSpec)."""
    payload = {
        "f_sample": spec.f_sample,
        "n_samples_per_period": int(spec.n_samples_per_period),
        "active_lines": spec.active_lines.tolist(),
        "amplitudes": spec.amplitudes.tolist(),
        "phases": spec.phases.tolist(),
        "rms_target": spec.rms_target,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_spec(path) -> MultisineSpec:
    with open(path) as fh:
        payload = json.load(fh)
    spec = MultisineSpec(
        f_sample=float(payload["f_sample"]),
        n_samples_per_period=int(payload["n_samples_per_period"]),
        active_lines=np.asarray(payload["active_lines"], dtype=int),
        amplitudes=np.asarray(payload["amplitudes"], dtype=float),
        phases=np.asarray(payload["phases"], dtype=float),
        rms_target=float(payload["rms_target"]),
    )
    spec.validate()
    return spec


def write_signal_csv(path, t, u):
    """Write a realized signal as CSV with header ``t,u1,...,um``."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[1] != t.size and u.shape[0] == t.size:
        u = u.T
    header = "t," + ",".join(f"u{i + 1}" for i in range(u.shape[0]))
    data = np.column_stack([np.asarray(t, dtype=float)] + [row for row in u])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
