"""Numerical engine for Feller semigroups perturbed by Levy-type operators.

The package evaluates semigroups ``S = T + (Dyson-Phillips correction)``
where ``T`` is a translation-invariant base semigroup (heat, symmetric
stable, Cauchy, or a custom exponent) and the perturbation is a Levy-type
operator with bounded, merely measurable drift and jump coefficients.
Everything acts on functions tabulated over a uniform one-dimensional grid;
an independent Monte Carlo simulator of the matching SDE provides
cross-validation.
"""

from .gridfn import (
    Extension,
    Grid,
    GridFunction,
    bump,
    default_grid,
    fft_convolve,
    grid_function,
    holder_norm,
    holder_seminorm,
    indicator,
    make_grid,
    one,
    read_csv,
    step,
    sup_norm,
    write_csv,
)
from .basesg import (
    BaseSemigroup,
    KernelTable,
    LevyExponent,
    apply_base,
    base_resolvent,
    build_base,
    estimate_regularity,
)
from .levyop import (
    Cutoff,
    LevyCharacteristics,
    RankOnePerturbation,
    SymbolEval,
    apply_perturbation,
    beta_moment,
    compensated_drift,
    continuity_diagnostics,
    jump_integral,
    perturbation_bound_constant,
    perturbation_matrix,
    positive_maximum_check,
    split_jumps,
    symbol,
    tightness_profile,
)
from .dyson import (
    DysonConfig,
    OperatorMatrix,
    SeriesDivergence,
    bt_apply,
    duhamel_solve,
    dyson_phillips_terms,
    estimate_BR_norm,
    last_solve_info,
    load_operator_matrix,
    one_step_matrix,
    perturbed_resolvent,
    propagate,
    semigroup_laplace,
)
from .mcsim import (
    Brownian,
    CompoundPoisson,
    MCResult,
    SdeSpec,
    Secondary,
    Stable,
    compare_mc_pde,
    sample_stable,
    simulate_sde,
    weak_convergence_study,
)
from .props import (
    DEFAULT_THRESHOLDS,
    PropertyReport,
    check_cinfty_decay,
    check_conservative,
    check_submarkov,
    convergence_experiment,
    g_norm,
    strong_feller_modulus,
)
from .scenarios import (
    Scenario,
    build_registry,
    builtin_scenarios,
    run_scenario,
)

__version__ = "0.1.0"
