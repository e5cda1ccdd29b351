"""avclab: excitation design, frequency-domain identification, and repetitive MPC.

An end-to-end simulation toolkit for lightly damped structures: design
periodic multisine excitations (random / Schroeder / crest-factor
minimized, single- or multi-reference), estimate frequency response
matrices with variance decomposition (classical H1 and the robust local
polynomial method), identify discrete state-space models with
frequency-domain subspace methods, and synthesize/evaluate an
observer-based repetitive MPC with Laguerre parameterization under
actuator saturation.
"""

from . import cli, excitation, plantlab, rmpc, spectral, sysid
from .excitation import (ExcitationSet, MixingMatrix, MultisineSpec,
                         crest_factor, hadamard_mixing, minimize_crest_factor,
                         orthogonal_mixing, realize_experiment,
                         schroeder_phases, synthesize_multisine)
from .plantlab import (DisturbanceModel, HbCoefficients, LtiPlant,
                       PolynomialPlant, SaturationSpec, benchmark_beam,
                       dead_zone, hb_amplitude_curve, saturate,
                       simulate_plant, step_disturbance, step_plant)
from .rmpc import (RmpcConfig, RmpcController, augment, closed_loop_run,
                   hildreth_solve, internal_model_from, kalman_schedule,
                   laguerre_basis, synthesize)
from .spectral import (FrmEstimate, LpmConfig, SpectralConfig, h1_estimate,
                       lpm_estimate, transient_contribution)
from .sysid import (HankelConfig, IdentResult, StateSpaceModel,
                    impulse_from_frm, monte_carlo_uncertainty,
                    refine_output_error, stability_scan, subspace_identify,
                    subspace_identify_weighted)

__version__ = "0.1.0"
