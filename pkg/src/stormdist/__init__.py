"""Deterministic simulator for distributed momentum-variance-reduced optimization."""

__version__ = "0.1.0"

from .algorithms import (
    IterateReservoir,
    MetricsRecord,
    RunResult,
    WorkerState,
    run_adstorm,
    run_dsgd,
    run_dstorm,
    select_output,
)
from .errors import (
    ContractViolation,
    DivergenceError,
    ProtocolError,
    StormdistError,
    UnknownConfigKey,
    ValidationFailure,
)
from .estimator import DirectionState, error_vector, init_direction, update_direction
from .harness import (
    CSV_COLUMNS,
    RunConfig,
    cli_run,
    cli_sweep,
    fit_slope,
    parse_config,
    speedup_table,
    summarize,
)
from .problems import (
    FAMILIES,
    ProblemSpec,
    Sample,
    SampleStream,
    estimate_constants,
    fd_check,
    full_gradient,
    full_value,
    local_gradient,
    local_value,
    make_problem,
    problem_from_json,
    problem_to_json,
    stoch_gradient,
)
from .runtime import (
    Message,
    MessageKind,
    RoundAccounting,
    TraceWriter,
    Transport,
    WorkerPool,
    decode_message,
    encode_message,
    mean_reducer,
    read_trace,
    run_round,
    scalar_message,
)
from .schedule import (
    B_CUBED_MIN,
    ScheduleParams,
    ScheduleState,
    adaptive_step,
    aggregate_gradnorm,
    derive_params,
    init_state,
    momentum,
    nonadaptive_step,
)
