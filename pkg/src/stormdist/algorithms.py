"""Distributed optimization loops over the simulated worker-server fabric.

Three runners share one round skeleton: evaluate diagnostics at the current
(identical) iterate, advance the step-size schedule, let every worker take
the step and refresh its direction on one fresh sample, then average the
directions through the server. The adaptive and non-adaptive variants differ
*only* in the schedule phase: the adaptive one spends an extra scalar
exchange per round on gradient-norm feedback, the non-adaptive one advances
on the declared noise constant without touching the network. The SGD runner
is the degenerate endpoint (momentum weight pinned to 1) and doubles as the
reference for the equivalence guarantee: with force_a_one the variance-
reduced runner reproduces it bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .errors import ContractViolation, DivergenceError, ValidationFailure
from .estimator import DirectionState, init_direction, update_direction
from .problems import ProblemSpec, SampleStream, as_param_vector, full_gradient, full_value, mix64, stoch_gradient
from .runtime import (
    Message,
    MessageKind,
    RoundAccounting,
    TraceWriter,
    Transport,
    WorkerPool,
    mean_reducer,
    run_round,
    scalar_message,
)
from .schedule import (
    ScheduleParams,
    ScheduleState,
    adaptive_step,
    aggregate_gradnorm,
    init_state,
    nonadaptive_step,
)

# a run is declared divergent once the iterate norm exceeds this multiple of
# the problem's region radius (or goes non-finite)
DIVERGENCE_FACTOR = 1e3

RESERVOIR_CAPACITY = 4096


@dataclass
class WorkerState:
    """One simulated worker: private iterate, direction, and sample stream."""

    worker_id: int
    x: np.ndarray
    direction: DirectionState
    stream: SampleStream
    iteration: int
    ifo: int
    draws: int  # next draw index; one draw per round keeps replay trivial


@dataclass(frozen=True)
class MetricsRecord:
    """One emitted row; field order matches the CSV schema exactly."""

    run_id: str
    algo: str
    K: int
    d: int
    t: int
    eta: float
    a: float
    grad_norm: float
    f_val: float
    err_norm: float
    potential: float
    ifo_per_worker: int
    bytes_up: int
    bytes_down: int
    clamped: bool
    out_of_region: bool


@dataclass
class RunResult:
    run_id: str
    algo: str
    problem: ProblemSpec
    params: ScheduleParams | None
    T: int
    master_seed: int
    metrics: list[MetricsRecord]
    accounting: RoundAccounting
    x_out: np.ndarray
    x_out_round: int
    final_x: np.ndarray


class IterateReservoir:
    """Uniform subsample of offered iterates without storing the full history.

    Classic reservoir replacement keeps each offered item with equal
    probability, so drawing uniformly from the buffer afterwards is an exact
    uniform draw over all T offers while holding at most ``capacity`` arrays.
    """

    def __init__(self, capacity: int, rng: Generator):
        if capacity < 1:
            raise ContractViolation("reservoir capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.entries: list[tuple[int, np.ndarray]] = []
        self.seen = 0

    def offer(self, t: int, x: np.ndarray):
        self.seen += 1
        if len(self.entries) < self.capacity:
            self.entries.append((t, x))
        else:
            j = int(self.rng.integers(self.seen))
            if j < self.capacity:
                self.entries[j] = (t, x)


def select_output(iterates, rng: Generator):
    """Uniform draw from (round, iterate) candidates; returns one pair."""
    if len(iterates) == 0:
        raise ContractViolation("cannot select an output from zero iterates")
    return iterates[int(rng.integers(len(iterates)))]


class _RunContext:
    """State shared by the round hooks of a single run."""

    def __init__(self, spec, params, run_id, algo, master_seed, threads, trace, reservoir_capacity):
        self.spec = spec
        self.params = params
        self.run_id = run_id
        self.algo = algo
        self.master_seed = master_seed
        self.accounting = RoundAccounting()
        self.transport = Transport(spec.num_workers, self.accounting, trace)
        self.pool = WorkerPool(threads)
        self.records: list[MetricsRecord] = []
        self.select_rng = Generator(Philox(key=mix64(master_seed, 0x5E1EC7)))
        self.reservoir = IterateReservoir(reservoir_capacity, self.select_rng)
        self.potential_L = params.L if params is not None else spec.L

    def evaluate(self, t, x_bar, d_bar, eta_prev):
        """Diagnostics at the round's entry iterate, plus the divergence guard."""
        spec = self.spec
        # one finite scalar implies every entry is finite (NaN/Inf propagate)
        x_sq = float(x_bar @ x_bar)
        if not math.isfinite(x_sq):
            raise DivergenceError(
                f"{self.run_id}: non-finite iterate at round {t}", record=self.records
            )
        x_norm = math.sqrt(x_sq)
        if x_norm > DIVERGENCE_FACTOR * spec.region_radius:
            raise DivergenceError(
                f"{self.run_id}: iterate norm {x_norm:.3g} exceeded "
                f"{DIVERGENCE_FACTOR:g} * region_radius at round {t}",
                record=self.records,
            )
        grad = full_gradient(spec, x_bar)
        grad_norm = math.sqrt(float(grad @ grad))
        f_val = full_value(spec, x_bar)
        e = d_bar - grad
        err_sq = float(e @ e)
        err = math.sqrt(err_sq)
        L = self.potential_L
        potential = f_val + spec.num_workers * err_sq / (48.0 * L * L * eta_prev)
        return grad_norm, f_val, err, potential, x_norm > spec.region_radius

    def record(self, workers, t, evals, eta, a, clamped) -> MetricsRecord:
        ifo = workers[0].ifo
        for w in workers[1:]:
            if w.ifo != ifo:
                raise ContractViolation(f"worker {w.worker_id} ifo {w.ifo} != {ifo}")
        self.accounting.rounds += 1
        self.accounting.ifo_per_worker = ifo
        grad_norm, f_val, err, potential, out_of_region = evals
        return MetricsRecord(
            run_id=self.run_id,
            algo=self.algo,
            K=self.spec.num_workers,
            d=self.spec.dim,
            t=t,
            eta=eta,
            a=a,
            grad_norm=grad_norm,
            f_val=f_val,
            err_norm=err,
            potential=potential,
            ifo_per_worker=ifo,
            bytes_up=self.accounting.bytes_up,
            bytes_down=self.accounting.bytes_down,
            clamped=clamped,
            out_of_region=out_of_region,
        )

    def check_direction(self, d_bar, t):
        if not math.isfinite(float(d_bar @ d_bar)):
            raise DivergenceError(
                f"{self.run_id}: non-finite aggregated direction at round {t}",
                record=self.records,
            )


class _StormHooks:
    """Round body shared by the adaptive and non-adaptive variants."""

    def __init__(self, ctx: _RunContext, adaptive: bool, force_a_one: bool, fresh_feedback_sample: bool):
        self.ctx = ctx
        self.adaptive = adaptive
        self.force_a_one = force_a_one
        self.fresh_feedback_sample = fresh_feedback_sample

    def execute(self, workers, server: ScheduleState):
        ctx = self.ctx
        spec = ctx.spec
        t = workers[0].iteration
        x_bar = workers[0].x
        evals = ctx.evaluate(t, x_bar, workers[0].direction.d, eta_prev=server.eta)
        ctx.reservoir.offer(t, x_bar)

        if self.adaptive:
            msgs = []
            for w in workers:
                if self.fresh_feedback_sample:
                    s = w.stream.draw(w.draws)
                    w.draws += 1
                    w.ifo += 1
                    g = stoch_gradient(spec, w.x, s)
                    g_norm = math.sqrt(float(g @ g))
                else:
                    # the cached sample gradient at x_t is exactly the norm
                    # feedback wants; reusing it keeps cost at 1 + 2t calls
                    g = w.direction.cached_grad_new
                    g_norm = math.sqrt(float(g @ g))
                msgs.append(scalar_message(MessageKind.GRAD_NORM_UP, w.worker_id, t, g_norm))
            payloads = ctx.transport.gather(msgs, MessageKind.GRAD_NORM_UP, t)
            feedback = aggregate_gradnorm([p[0] for p in payloads])
            server = adaptive_step(server, ctx.params, feedback)
            ctx.transport.broadcast(MessageKind.ETA_DOWN, t, np.array([server.eta]))
        else:
            server = nonadaptive_step(server, ctx.params)

        eta = server.eta
        if self.force_a_one:
            a, clamped = 1.0, False
        else:
            a, clamped = server.a_next, server.clamped

        def local(w: WorkerState) -> Message:
            x_new = w.x - eta * w.direction.d
            s = w.stream.draw(w.draws)
            w.draws += 1
            g_new = stoch_gradient(spec, x_new, s)
            g_old = stoch_gradient(spec, w.x, s)
            w.ifo += 2
            w.direction = update_direction(w.direction, g_new, g_old, a)
            w.x = x_new
            w.iteration = t + 1
            return Message(MessageKind.DIRECTION_UP, w.worker_id, t + 1, w.direction.d)

        msgs = ctx.pool.map(local, workers)
        d_bar = ctx.transport.gather_reduce(msgs, mean_reducer, MessageKind.DIRECTION_UP, t + 1)
        ctx.check_direction(d_bar, t)
        d_bar.flags.writeable = False
        ctx.transport.broadcast(MessageKind.DIRECTION_DOWN, t + 1, d_bar)
        for w in workers:
            w.direction.d = d_bar

        return server, ctx.record(workers, t, evals, eta, a, clamped)


class _SgdHooks:
    """Plain averaged SGD; one oracle call per worker per round."""

    def __init__(self, ctx: _RunContext, eta_schedule):
        self.ctx = ctx
        self.eta_schedule = eta_schedule  # None means: drive the non-adaptive schedule

    def execute(self, workers, server: ScheduleState | None):
        ctx = self.ctx
        spec = ctx.spec
        t = workers[0].iteration
        x_bar = workers[0].x

        if self.eta_schedule is not None:
            eta = float(self.eta_schedule[t - 1])
            eta_prev = float(self.eta_schedule[t - 2]) if t >= 2 else float(self.eta_schedule[0])
        else:
            eta_prev = server.eta
            server = nonadaptive_step(server, ctx.params)
            eta = server.eta

        def local(w: WorkerState) -> Message:
            s = w.stream.draw(w.draws)
            w.draws += 1
            g = stoch_gradient(spec, w.x, s)
            w.ifo += 1
            return Message(MessageKind.DIRECTION_UP, w.worker_id, t, g)

        msgs = ctx.pool.map(local, workers)
        g_bar = ctx.transport.gather_reduce(msgs, mean_reducer, MessageKind.DIRECTION_UP, t)
        ctx.check_direction(g_bar, t)
        evals = ctx.evaluate(t, x_bar, g_bar, eta_prev)
        ctx.reservoir.offer(t, x_bar)
        g_bar.flags.writeable = False
        ctx.transport.broadcast(MessageKind.DIRECTION_DOWN, t, g_bar)
        for w in workers:
            w.direction = DirectionState(d=g_bar, cached_grad_new=g_bar, t=t)
            w.x = w.x - eta * g_bar
            w.iteration = t + 1

        return server, ctx.record(workers, t, evals, eta, 1.0, False)


def _resolve_x1(spec, x1):
    if x1 is None:
        return np.zeros(spec.dim)
    return as_param_vector(x1, spec.dim)


def _init_storm_workers(ctx: _RunContext, x1: np.ndarray):
    """Each worker evaluates its first sample gradient; the mean seeds d.

    This initial direction exchange is charged like any other round's, so
    cumulative byte counters lead the steady-state per-round formula by one
    direction exchange.
    """
    spec = ctx.spec
    workers = []
    msgs = []
    for k in range(spec.num_workers):
        stream = SampleStream(ctx.master_seed, k, spec.dim, spec.noise_std)
        g = stoch_gradient(spec, x1, stream.draw(0))
        workers.append(
            WorkerState(k, x1.copy(), init_direction(g), stream, iteration=1, ifo=1, draws=1)
        )
        msgs.append(Message(MessageKind.DIRECTION_UP, k, 1, g))
    d_bar = ctx.transport.gather_reduce(msgs, mean_reducer, MessageKind.DIRECTION_UP, 1)
    ctx.check_direction(d_bar, 0)
    d_bar.flags.writeable = False
    ctx.transport.broadcast(MessageKind.DIRECTION_DOWN, 1, d_bar)
    for w in workers:
        w.direction.d = d_bar
    return workers


def _init_sgd_workers(ctx: _RunContext, x1: np.ndarray):
    spec = ctx.spec
    zero = np.zeros(spec.dim)
    zero.flags.writeable = False
    workers = []
    for k in range(spec.num_workers):
        stream = SampleStream(ctx.master_seed, k, spec.dim, spec.noise_std)
        workers.append(
            WorkerState(k, x1.copy(), DirectionState(zero, zero, 0), stream, iteration=1, ifo=0, draws=0)
        )
    return workers


def _finish(ctx: _RunContext, workers, T) -> RunResult:
    t_out, x_out = select_output(ctx.reservoir.entries, ctx.select_rng)
    return RunResult(
        run_id=ctx.run_id,
        algo=ctx.algo,
        problem=ctx.spec,
        params=ctx.params,
        T=T,
        master_seed=ctx.master_seed,
        metrics=ctx.records,
        accounting=ctx.accounting,
        x_out=x_out,
        x_out_round=t_out,
        final_x=workers[0].x,
    )


def _check_run_args(spec, params, T):
    if T < 1:
        raise ValidationFailure("T >= 1 required")
    if params is not None and params.num_workers != spec.num_workers:
        raise ContractViolation(
            f"schedule derived for K={params.num_workers} but problem has K={spec.num_workers}"
        )


def _run_storm(spec, params, T, master_seed, *, adaptive, algo, force_a_one, fresh_feedback_sample,
               threads, trace_path, run_id, x1, reservoir_capacity):
    _check_run_args(spec, params, T)
    x1 = _resolve_x1(spec, x1)
    trace = TraceWriter(trace_path) if trace_path else None
    try:
        ctx = _RunContext(spec, params, run_id or algo, algo, master_seed, threads, trace, reservoir_capacity)
        try:
            workers = _init_storm_workers(ctx, x1)
            hooks = _StormHooks(ctx, adaptive, force_a_one, fresh_feedback_sample)
            server = init_state(params)
            for _ in range(T):
                workers, server, rec = run_round(workers, server, hooks)
                ctx.records.append(rec)
            return _finish(ctx, workers, T)
        finally:
            ctx.pool.close()
    finally:
        if trace:
            trace.close()


def run_adstorm(spec: ProblemSpec, params: ScheduleParams, T: int, master_seed: int, *,
                force_a_one: bool = False, fresh_feedback_sample: bool = False, threads: int = 1,
                trace_path=None, run_id: str | None = None, x1=None,
                reservoir_capacity: int = RESERVOIR_CAPACITY) -> RunResult:
    """Adaptive variant: per-round gradient-norm feedback tunes the step size."""
    return _run_storm(
        spec, params, T, master_seed, adaptive=True, algo="adstorm", force_a_one=force_a_one,
        fresh_feedback_sample=fresh_feedback_sample, threads=threads, trace_path=trace_path,
        run_id=run_id, x1=x1, reservoir_capacity=reservoir_capacity,
    )


def run_dstorm(spec: ProblemSpec, params: ScheduleParams, T: int, master_seed: int, *,
               force_a_one: bool = False, threads: int = 1, trace_path=None,
               run_id: str | None = None, x1=None,
               reservoir_capacity: int = RESERVOIR_CAPACITY) -> RunResult:
    """Non-adaptive variant: the step size follows the declared noise constant."""
    return _run_storm(
        spec, params, T, master_seed, adaptive=False, algo="dstorm", force_a_one=force_a_one,
        fresh_feedback_sample=False, threads=threads, trace_path=trace_path,
        run_id=run_id, x1=x1, reservoir_capacity=reservoir_capacity,
    )


def run_dsgd(spec: ProblemSpec, T: int, master_seed: int, *, params: ScheduleParams | None = None,
             eta_schedule=None, threads: int = 1, trace_path=None, run_id: str | None = None,
             x1=None, reservoir_capacity: int = RESERVOIR_CAPACITY) -> RunResult:
    """Synchronized SGD baseline.

    Steps follow either the provided eta_schedule (indexed by round, 1-based)
    or the same non-adaptive schedule the variance-reduced runner would use,
    which is what makes the force_a_one equivalence exact.
    """
    if (params is None) == (eta_schedule is None):
        raise ContractViolation("run_dsgd needs exactly one of params or eta_schedule")
    if eta_schedule is not None:
        eta_schedule = np.asarray(eta_schedule, dtype=np.float64)
        if eta_schedule.ndim != 1 or eta_schedule.shape[0] < T:
            raise ContractViolation("eta_schedule must provide one step size per round")
        if not (np.isfinite(eta_schedule).all() and (eta_schedule > 0).all()):
            raise ContractViolation("eta_schedule entries must be finite and positive")
    _check_run_args(spec, params, T)
    x1 = _resolve_x1(spec, x1)
    trace = TraceWriter(trace_path) if trace_path else None
    try:
        ctx = _RunContext(spec, params, run_id or "dsgd", "dsgd", master_seed, threads, trace, reservoir_capacity)
        try:
            workers = _init_sgd_workers(ctx, x1)
            hooks = _SgdHooks(ctx, eta_schedule)
            server = init_state(params) if params is not None else None
            for _ in range(T):
                workers, server, rec = run_round(workers, server, hooks)
                ctx.records.append(rec)
            return _finish(ctx, workers, T)
        finally:
            ctx.pool.close()
    finally:
        if trace:
            trace.close()
