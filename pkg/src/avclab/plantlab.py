"""Simulated plants and disturbance sources for closed-loop and identification studies.

Contains the discrete LTI plant x(k+1) = A x + B u + H d with seeded process
and measurement noise, autonomous disturbance generators w(k+1) = S w,
d = E w, actuator saturation/dead-zone maps, a cubic-feedback nonlinear plant
(used to inject nonlinear variance into spectral tests), the single-mode
harmonic-balance amplitude oracle, and a canonical lightly damped
three-mode "benchmark beam".
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import cont2discrete

from .sysid import StateSpaceModel

__all__ = [
    "LtiPlant",
    "DisturbanceModel",
    "SaturationSpec",
    "HbCoefficients",
    "PolynomialPlant",
    "SimTrace",
    "SimulationDivergence",
    "step_plant",
    "simulate_plant",
    "step_disturbance",
    "disturbance_series",
    "saturate",
    "dead_zone",
    "polynomial_plant_step",
    "simulate_polynomial_plant",
    "hb_amplitude_curve",
    "benchmark_beam",
    "benchmark_disturbance",
    "rotation_disturbance",
    "periodic_steady_state",
    "run_multireference",
]


class SimulationDivergence(RuntimeError):
    """Raised when a simulated state stops being finite."""


@dataclass
class LtiPlant:
    """Discrete LTI plant with a disturbance channel and Gaussian noise.

        x(k+1) = A x(k) + B u(k) + H d(k) + w(k),   y(k) = C x(k) + D u(k) + v(k)

    One seeded PRNG stream drives both noises; per step, the process draw
    comes first and the measurement draw second.
    """

    model: StateSpaceModel
    H: np.ndarray
    meas_noise_std: np.ndarray = None
    process_noise_std: np.ndarray = None
    seed: int = 0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if self.H.shape[0] != self.model.order:
            raise ValueError("H row count must match the state dimension")
        p, n = self.model.n_outputs, self.model.order
        if self.meas_noise_std is None:
            self.meas_noise_std = np.zeros(p)
        if self.process_noise_std is None:
            self.process_noise_std = np.zeros(n)
        self.meas_noise_std = np.asarray(self.meas_noise_std, dtype=float).reshape(p)
        self.process_noise_std = np.asarray(self.process_noise_std,
                                            dtype=float).reshape(n)
        if np.any(self.meas_noise_std < 0) or np.any(self.process_noise_std < 0):
            raise ValueError("noise standard deviations must be >= 0")

    @property
    def n_dist(self) -> int:
        return self.H.shape[1]

    def make_rng(self):
        return np.random.default_rng(self.seed)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "H": self.H.tolist(),
            "meas_noise_std": self.meas_noise_std.tolist(),
            "process_noise_std": self.process_noise_std.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "LtiPlant":
        return cls(
            model=StateSpaceModel.from_dict(payload["model"]),
            H=np.asarray(payload["H"], dtype=float),
            meas_noise_std=np.asarray(payload["meas_noise_std"], dtype=float),
            process_noise_std=np.asarray(payload["process_noise_std"], dtype=float),
            seed=int(payload.get("seed", 0)),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "LtiPlant":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class DisturbanceModel:
    """Autonomous generator w(k+1) = S w(k), d(k) = E w(k).

    Eigenvalues of S must lie in the closed unit disk and the ones on the
    boundary must be simple, so the non-vanishing disturbance components stay
    bounded and periodic.
    """

    S: np.ndarray
    E: np.ndarray
    w0: np.ndarray

    def __post_init__(self):
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        self.E = np.atleast_2d(np.asarray(self.E, dtype=float))
        self.w0 = np.asarray(self.w0, dtype=float).reshape(-1)
        if self.S.shape[0] != self.S.shape[1]:
            raise ValueError("S must be square")
        if self.E.shape[1] != self.S.shape[0] or self.w0.size != self.S.shape[0]:
            raise ValueError("E / w0 dimensions must match S")

    @property
    def order(self) -> int:
        return self.S.shape[0]

    def validate(self, tol: float = 1e-9):
        lam = np.linalg.eigvals(self.S)
        if np.any(np.abs(lam) > 1.0 + tol):
            raise ValueError("disturbance generator has eigenvalues outside "
                             "the closed unit disk")
        boundary = lam[np.abs(lam) > 1.0 - 1e-9]
        for i, z in enumerate(boundary):
            dup = np.sum(np.abs(boundary - z) < 1e-8)
            if dup > 1:
                raise ValueError(
                    "unit-circle eigenvalues of the disturbance generator must "
                    f"be simple (repeated eigenvalue near {z:.6f})"
                )


@dataclass
class SaturationSpec:
    """Per-channel actuator limits u_min < u_max."""

    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(-1)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(-1)
        if self.u_min.shape != self.u_max.shape:
            raise ValueError("u_min and u_max must have the same length")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("need u_min < u_max per channel")

    @classmethod
    def symmetric(cls, limits):
        limits = np.asarray(limits, dtype=float).reshape(-1)
        return cls(-limits, limits)


@dataclass
class SimTrace:
    """Column store for a simulation run; all arrays share the step axis."""

    t: np.ndarray
    y: np.ndarray
    x: np.ndarray = None
    u: np.ndarray = None
    d: np.ndarray = None
    diverged_at: int = -1
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# stepping and simulation
# ---------------------------------------------------------------------------

def step_plant(plant: LtiPlant, state, u, d, rng):
    """One plant step; returns (next_state, measured_output).

    Pure given (state, inputs, rng state).  Aborts with
    SimulationDivergence when the state stops being finite.
    """
    m = plant.model
    state = np.asarray(state, dtype=float).reshape(m.order)
    u = np.asarray(u, dtype=float).reshape(m.n_inputs)
    d = np.asarray(d, dtype=float).reshape(plant.n_dist)
    w = plant.process_noise_std * rng.standard_normal(m.order) \
        if np.any(plant.process_noise_std) else 0.0
    v = plant.meas_noise_std * rng.standard_normal(m.n_outputs) \
        if np.any(plant.meas_noise_std) else 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        y = m.C @ state + m.D @ u + v
        x_next = m.A @ state + m.B @ u + plant.H @ d + w
    if not np.all(np.isfinite(x_next)):
        raise SimulationDivergence("plant state diverged (non-finite entries)")
    return x_next, y


def simulate_plant(plant: LtiPlant, u_seq=None, d_seq=None, x0=None,
                   n_steps=None, rng=None, keep_states=False) -> SimTrace:
    """Run the plant over a full input/disturbance record."""
    m = plant.model
    if n_steps is None:
        n_steps = len(u_seq) if u_seq is not None else len(d_seq)
    u_seq = np.zeros((n_steps, m.n_inputs)) if u_seq is None \
        else np.asarray(u_seq, dtype=float).reshape(n_steps, m.n_inputs)
    d_seq = np.zeros((n_steps, plant.n_dist)) if d_seq is None \
        else np.asarray(d_seq, dtype=float).reshape(n_steps, plant.n_dist)
    x = np.zeros(m.order) if x0 is None else np.asarray(x0, dtype=float).copy()
    rng = plant.make_rng() if rng is None else rng
    y = np.empty((n_steps, m.n_outputs))
    xs = np.empty((n_steps, m.order)) if keep_states else None
    for k in range(n_steps):
        if keep_states:
            xs[k] = x
        x, y[k] = step_plant(plant, x, u_seq[k], d_seq[k], rng)
    t = np.arange(n_steps) * m.T_s
    return SimTrace(t=t, y=y, x=xs, u=u_seq, d=d_seq)


def step_disturbance(model: DisturbanceModel, w):
    """Exact autonomous recursion; returns (w_next, d) with d = E w."""
    w = np.asarray(w, dtype=float).reshape(model.order)
    return model.S @ w, model.E @ w


def disturbance_series(model: DisturbanceModel, n_steps: int) -> np.ndarray:
    """d(0..n_steps-1) generated from w0."""
    d = np.empty((n_steps, model.E.shape[0]))
    w = model.w0.copy()
    for k in range(n_steps):
        w, d[k] = step_disturbance(model, w)
    return d


def saturate(u, spec: SaturationSpec):
    """Elementwise clamp of u into [u_min, u_max]."""
    return np.clip(np.asarray(u, dtype=float), spec.u_min, spec.u_max)


def dead_zone(u, spec: SaturationSpec):
    """dz(u) = u - sat(u); dz + sat reproduces u exactly."""
    u = np.asarray(u, dtype=float)
    return u - saturate(u, spec)


@dataclass
class PolynomialPlant:
    """Linear core with a cubic state feedback: x+ = A x + B u + H d - kappa s(x)^3 g.

    s(x) = selector . x is a scalar probe (defaults to the first output row)
    and g the injection direction (defaults to the first disturbance column).
    kappa = 0 reduces exactly to the linear plant.
    """

    core: LtiPlant
    kappa: float
    selector: np.ndarray = None
    injector: np.ndarray = None

    def __post_init__(self):
        n = self.core.model.order
        if not np.isfinite(self.kappa):
            raise ValueError("kappa must be finite")
        if self.selector is None:
            self.selector = self.core.model.C[0].copy()
        if self.injector is None:
            self.injector = self.core.H[:, 0].copy()
        self.selector = np.asarray(self.selector, dtype=float).reshape(n)
        self.injector = np.asarray(self.injector, dtype=float).reshape(n)


def polynomial_plant_step(plant: PolynomialPlant, state, u, d, rng):
    """One nonlinear step; same contract as step_plant."""
    x_next, y = step_plant(plant.core, state, u, d, rng)
    s = float(plant.selector @ np.asarray(state, dtype=float))
    x_next = x_next - plant.kappa * s**3 * plant.injector
    if not np.all(np.isfinite(x_next)):
        raise SimulationDivergence("nonlinear plant state diverged")
    return x_next, y


def simulate_polynomial_plant(plant: PolynomialPlant, u_seq=None, d_seq=None,
                              x0=None, n_steps=None, rng=None) -> SimTrace:
    core = plant.core
    m = core.model
    if n_steps is None:
        n_steps = len(u_seq) if u_seq is not None else len(d_seq)
    u_seq = np.zeros((n_steps, m.n_inputs)) if u_seq is None \
        else np.asarray(u_seq, dtype=float).reshape(n_steps, m.n_inputs)
    d_seq = np.zeros((n_steps, core.n_dist)) if d_seq is None \
        else np.asarray(d_seq, dtype=float).reshape(n_steps, core.n_dist)
    x = np.zeros(m.order) if x0 is None else np.asarray(x0, dtype=float).copy()
    rng = core.make_rng() if rng is None else rng
    y = np.empty((n_steps, m.n_outputs))
    for k in range(n_steps):
        x, y[k] = polynomial_plant_step(plant, x, u_seq[k], d_seq[k], rng)
    return SimTrace(t=np.arange(n_steps) * m.T_s, y=y, u=u_seq, d=d_seq)


# ---------------------------------------------------------------------------
# harmonic-balance amplitude oracle
# ---------------------------------------------------------------------------

@dataclass
class HbCoefficients:
    """Single-mode harmonic-balance coefficients (consistent modal units).

    The imaginary stiffness parts scale linearly with the drive frequency:
    K_im(w) = k_im_slope * w and likewise for the cubic term.
    """

    mass: float
    k_re: float
    k_im_slope: float
    k_nl_re: float
    k_nl_im_slope: float
    force: float

    def __post_init__(self):
        if self.mass == 0.0:
            raise ValueError("modal mass must be nonzero")

    def cubic_coefficients(self, omega: float):
        """Coefficients (c3, c2, c1, c0) of the amplitude cubic in s = r^2."""
        k_im = self.k_im_slope * omega
        k_nl_im = self.k_nl_im_slope * omega
        k_abs2 = self.k_re**2 + k_im**2
        k_nl_abs2 = self.k_nl_re**2 + k_nl_im**2
        w2m = omega**2 * self.mass
        c3 = k_nl_abs2
        c2 = 2.0 * (self.k_re * self.k_nl_re + k_im * k_nl_im) - 2.0 * w2m * self.k_nl_re
        c1 = w2m**2 + k_abs2 - 2.0 * w2m * self.k_re
        c0 = -self.force**2
        return c3, c2, c1, c0


def _cubic_real_roots(c3, c2, c1, c0):
    """Real roots of c3 s^3 + c2 s^2 + c1 s + c0 via the depressed cubic.

    Degenerate leading coefficients fall back to the quadratic/linear case.
    Roots from the trigonometric / Cardano formulas get a Newton polish.
    """
    scale = max(abs(c3), abs(c2), abs(c1), abs(c0))
    if scale == 0.0:
        return np.array([])
    tol = 1e-14 * scale
    if abs(c3) <= tol:
        if abs(c2) <= tol:
            if abs(c1) <= tol:
                return np.array([])
            return np.array([-c0 / c1])
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc < 0.0:
            return np.array([])
        sq = np.sqrt(disc)
        return np.array([(-c1 + sq) / (2.0 * c2), (-c1 - sq) / (2.0 * c2)])
    b, c, d = c2 / c3, c1 / c3, c0 / c3
    # depressed form t^3 + p t + q with s = t - b/3
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    shift = -b / 3.0
    disc = -4.0 * p**3 - 27.0 * q * q
    if disc > 0.0:
        # three distinct real roots: trigonometric form
        rho = 2.0 * np.sqrt(-p / 3.0)
        arg = np.clip(3.0 * q / (p * rho), -1.0, 1.0)
        theta = np.arccos(arg) / 3.0
        t = rho * np.cos(theta - 2.0 * np.pi * np.arange(3) / 3.0)
        roots = t + shift
    else:
        # one real root: Cardano
        half_q = -q / 2.0
        sq = np.sqrt(max(q * q / 4.0 + p**3 / 27.0, 0.0))
        t = np.cbrt(half_q + sq) + np.cbrt(half_q - sq)
        roots = np.array([t + shift])
    # Newton polish on the original cubic
    for _ in range(3):
        f = ((c3 * roots + c2) * roots + c1) * roots + c0
        fp = (3.0 * c3 * roots + 2.0 * c2) * roots + c1
        upd = np.where(np.abs(fp) > 0, f / np.where(fp == 0, 1.0, fp), 0.0)
        roots = roots - upd
    return roots


def hb_amplitude_curve(coeffs: HbCoefficients, omega_grid,
                       residual_tol: float = 1e-9):
    """Amplitude branches of the single-mode harmonic-balance equation.

    For each drive frequency the cubic in s = r^2 is solved in closed form
    and every non-negative real root is returned as an amplitude r = sqrt(s).
    Each root satisfies the relative residual bound; frequencies with no
    admissible root are returned empty and flagged.

    Returns (branches, flags): branches is a list of sorted amplitude arrays
    (one per frequency), flags a boolean array marking empty results.
    """
    omega_grid = np.atleast_1d(np.asarray(omega_grid, dtype=float))
    if not np.all(np.isfinite(omega_grid)):
        raise ValueError("frequency grid must be finite")
    branches = []
    flags = np.zeros(omega_grid.size, dtype=bool)
    for i, w in enumerate(omega_grid):
        c3, c2, c1, c0 = coeffs.cubic_coefficients(w)
        roots = _cubic_real_roots(c3, c2, c1, c0)
        scale_terms = lambda s: max(abs(c3 * s**3), abs(c2 * s**2),
                                    abs(c1 * s), abs(c0), 1e-300)
        keep = []
        for s in roots:
            if s < -1e-12 * max(abs(s), 1.0):
                continue
            s = max(s, 0.0)
            res = abs(((c3 * s + c2) * s + c1) * s + c0) / scale_terms(s)
            if res < residual_tol:
                keep.append(np.sqrt(s))
        if coeffs.force == 0.0 and not any(abs(v) < 1e-12 for v in keep):
            keep.append(0.0)   # r = 0 always solves the unforced equation
        if not keep:
            flags[i] = True
        branches.append(np.array(sorted(set(np.round(keep, 14)))))
    return branches, flags


# ---------------------------------------------------------------------------
# canonical test plant and experiment plumbing
# ---------------------------------------------------------------------------

def _modal_continuous(freqs_hz, dampings, b_rows, h_rows, c_vel):
    n_modes = len(freqs_hz)
    n = 2 * n_modes
    A = np.zeros((n, n))
    B = np.zeros((n, len(b_rows[0])))
    H = np.zeros((n, 1))
    C = np.zeros((1, n))
    for i, (f, z) in enumerate(zip(freqs_hz, dampings)):
        w = 2.0 * np.pi * f
        A[2 * i, 2 * i + 1] = 1.0
        A[2 * i + 1, 2 * i] = -w * w
        A[2 * i + 1, 2 * i + 1] = -2.0 * z * w
        B[2 * i + 1, :] = b_rows[i]
        H[2 * i + 1, 0] = h_rows[i]
        C[0, 2 * i + 1] = c_vel[i]
    return A, B, C, H


def benchmark_beam(T_s: float = 5e-4, meas_noise_std=0.0,
                   process_noise_std=0.0, seed: int = 0) -> LtiPlant:
    """Canonical 6th-order lightly damped test plant (synthetic numbers).

    Three transverse modes with damping ratios between 0.006 and 0.018, two
    control inputs, one velocity output, one disturbance channel; discretized
    zero-order-hold at T_s.  All coefficients are synthetic and exist only to
    give the test suite a repeatable plant with realistic structure.
    """
    freqs = [14.5, 58.0, 139.0]
    damps = [0.006, 0.010, 0.018]
    b_rows = [(0.9, 0.50), (-0.6, 0.80), (0.35, -0.45)]
    h_rows = [1.0, 0.7, 0.5]
    c_vel = [1.0, 0.8, 0.6]
    Ac, Bc, Cc, Hc = _modal_continuous(freqs, damps, b_rows, h_rows, c_vel)
    BH = np.hstack([Bc, Hc])
    (A, BHd, C, D, _) = cont2discrete((Ac, BH, Cc, np.zeros((1, 3))), T_s,
                                      method="zoh")
    model = StateSpaceModel(A, BHd[:, :2], C, np.zeros((1, 2)), T_s,
                            input_labels=["piezo_1", "piezo_2"],
                            output_labels=["tip_velocity"])
    n = model.order
    meas = np.atleast_1d(np.asarray(meas_noise_std, dtype=float))
    proc = np.atleast_1d(np.asarray(process_noise_std, dtype=float))
    return LtiPlant(model=model, H=BHd[:, 2:3],
                    meas_noise_std=np.broadcast_to(meas, (1,)).copy(),
                    process_noise_std=np.broadcast_to(
                        proc if proc.size == n else proc[:1], (n,)).copy(),
                    seed=seed)


def rotation_disturbance(freq_hz: float, T_s: float,
                         amplitude: float = 1.0) -> DisturbanceModel:
    """Single-frequency generator: S = plane rotation, d(k) = amplitude*cos(w k T_s)."""
    th = 2.0 * np.pi * freq_hz * T_s
    S = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    E = np.array([[1.0, 0.0]])
    return DisturbanceModel(S=S, E=E, w0=np.array([amplitude, 0.0]))


def benchmark_disturbance(T_s: float = 5e-4, freq_hz: float = 20.0,
                          amplitude: float = 1.0) -> DisturbanceModel:
    """Default in-band sinusoidal disturbance for the benchmark beam."""
    return rotation_disturbance(freq_hz, T_s, amplitude)


def periodic_steady_state(plant: LtiPlant, u_period=None, d_period=None):
    """Initial state that makes the (noise-free) response exactly periodic.

    Solves (I - A^L) x0 = forced response over one period of length L.
    """
    m = plant.model
    L = len(u_period) if u_period is not None else len(d_period)
    u_period = np.zeros((L, m.n_inputs)) if u_period is None \
        else np.asarray(u_period, dtype=float).reshape(L, m.n_inputs)
    d_period = np.zeros((L, plant.n_dist)) if d_period is None \
        else np.asarray(d_period, dtype=float).reshape(L, plant.n_dist)
    x = np.zeros(m.order)
    for k in range(L):
        x = m.A @ x + m.B @ u_period[k] + plant.H @ d_period[k]
    A_L = np.linalg.matrix_power(m.A, L)
    return np.linalg.solve(np.eye(m.order) - A_L, x)


def run_multireference(plant, realized, warmup_periods: int = 0,
                       start_at_steady_state: bool = False, rng_seed=None,
                       nonlinear: PolynomialPlant = None):
    """Drive a plant with every (realization, experiment) record.

    Returns an output array shaped (realizations, experiments, n_outputs, L)
    aligned with realized.u.  With start_at_steady_state the linear periodic
    initial state is used: exact steady state for the linear plant, an
    approximate one (small residual transient) for a nonlinear plant.
    warmup_periods additionally settles the plant on the (possibly nonlinear)
    attractor by driving unrecorded periods before the records start.
    """
    R, E, m_chan, L = realized.u.shape
    n_per = realized.exc_set.periods_per_realization
    period = L // n_per
    p = plant.model.n_outputs
    y = np.empty((R, E, p, L))
    base_seed = plant.seed if rng_seed is None else rng_seed
    for r in range(R):
        for e in range(E):
            u_seq = realized.u[r, e].T
            rng = np.random.default_rng(base_seed + 7919 * r + 13 * e)
            x0 = periodic_steady_state(plant, u_period=u_seq[:period]) \
                if start_at_steady_state else None
            if warmup_periods > 0:
                u_warm = np.tile(u_seq[:period], (warmup_periods, 1))
                if nonlinear is not None:
                    x0 = _settle_polynomial(nonlinear, u_warm, x0)
                else:
                    x0 = _settle_linear(plant, u_warm, x0)
            if nonlinear is not None:
                trace = simulate_polynomial_plant(nonlinear, u_seq=u_seq,
                                                  x0=x0, rng=rng)
            else:
                trace = simulate_plant(plant, u_seq=u_seq, x0=x0, rng=rng)
            y[r, e] = trace.y.T
    return y


def _settle_linear(plant, u_warm, x0):
    m = plant.model
    x = np.zeros(m.order) if x0 is None else np.asarray(x0, dtype=float).copy()
    for u in u_warm:
        x = m.A @ x + m.B @ u
    return x


def _settle_polynomial(nl, u_warm, x0):
    m = nl.core.model
    x = np.zeros(m.order) if x0 is None else np.asarray(x0, dtype=float).copy()
    for u in u_warm:
        s = float(nl.selector @ x)
        x = m.A @ x + m.B @ u - nl.kappa * s**3 * nl.injector
    return x


def write_trace_csv(path, trace: SimTrace, include_states: bool = False):
    """Simulation trace as CSV ``k, t, u*, d*, y*, x*(optional)``."""
    cols = [np.arange(trace.t.size), trace.t]
    header = ["k", "t"]
    for name, arr in (("u", trace.u), ("d", trace.d), ("y", trace.y)):
        if arr is None:
            continue
        arr2 = np.atleast_2d(arr.T if arr.ndim == 2 else arr[None, :])
        for i, row in enumerate(arr2):
            cols.append(row)
            header.append(f"{name}{i + 1}")
    if include_states and trace.x is not None:
        for i, row in enumerate(trace.x.T):
            cols.append(row)
            header.append(f"x{i + 1}")
    np.savetxt(path, np.column_stack(cols), delimiter=",",
               header=",".join(header), comments="", fmt="%.17g")
