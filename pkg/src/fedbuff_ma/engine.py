"""Discrete-event simulator of buffered asynchronous federated learning.

Client delays are integer ticks of wall-clock time. When server iteration
t starts, the current model goes to K sampled clients, and a client with
delay d delivers its update d ticks later. Arrivals are processed one at
a time in tick order, with updates landing on the same tick taken in a
seeded random order. An update whose staleness (iterations completed
since its version was sent) exceeds ``tau_max`` is dropped and does not
count toward the buffer. The C-th accepted update triggers the server
step, and iteration t + 1 starts at once, possibly within the same tick.
Same-tick arrivals that were not needed then carry over to iteration
t + 1 with their version unchanged. Staleness in iterations is therefore an
outcome of the arrival process rather than an input.
"""

from __future__ import annotations

import heapq
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import MA_METHODS, SimConfig
from .errors import CausalityViolation, DivergedError, ProtocolError
from .momentum import LightweightState, MomentumMatrix, lightweight_step, solve_lightweight, solve_ma_weights
from .optimizers import ServerOptState, ema_update, server_step
from .privacy import PrivatePayload, make_payload, privatize_round
from .staleness import StalenessMatrix, VersionOneHot, apply_staleness_bound, downscale, sample_delays
from .tasks import Task, make_logistic_task, make_quadratic_task

STREAMS = ("task", "sampling", "delays", "shuffle", "client", "dp-noise", "bounds")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component of a run.

    Streams are keyed by name, so adding or removing draws in one component
    never shifts another's sequence.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()),)))


def build_task(config: SimConfig) -> Task:
    tc = config.task
    rng = substream(config.seed, "task")
    if tc.kind == "quadratic":
        return make_quadratic_task(
            tc.dim, config.population, tc.heterogeneity, rng,
            optimum_scale=tc.optimum_scale, curvature_min=tc.curvature_min, grad_noise=tc.grad_noise,
        )
    return make_logistic_task(
        tc.dim, config.population, tc.heterogeneity, rng,
        samples_per_client=tc.samples_per_client, label_noise=tc.label_noise, l2=tc.l2,
    )


@dataclass
class PendingUpdate:
    """An update in flight or waiting in the server pool."""

    client: int
    version: int
    arrival: int
    delta: np.ndarray | None
    payload: PrivatePayload | None = None

    def __post_init__(self) -> None:
        if self.arrival < 0:
            raise CausalityViolation("arrival tick must be non-negative")

    def one_hot(self, horizon: int) -> VersionOneHot:
        return VersionOneHot(horizon, self.version)


@dataclass
class ArrivalCounters:
    enqueued: int = 0
    accepted: int = 0
    dropped_stale: int = 0
    dropped_surplus: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_stale + self.dropped_surplus


class ArrivalProcess:
    """Client sampling, delays and arrival ordering, independent of training.

    Args:
        config: Run configuration (population, K, delays, tau_max).
        seed: Root seed for the ``sampling``, ``delays`` and ``shuffle`` streams.
    """

    def __init__(self, config: SimConfig, seed: int) -> None:
        self.config = config
        self.delay = config.delay.distribution()
        self.zero_delay = config.method == "sync"
        self.rng_sampling = substream(seed, "sampling")
        self.rng_delays = substream(seed, "delays")
        self.rng_shuffle = substream(seed, "shuffle")
        self.now = 0
        self._heap: list[tuple[int, float, int, PendingUpdate]] = []
        self._seq = 0
        self.counters = ArrivalCounters()

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        """Clients for a new iteration and their integer delays."""
        m, k = self.config.population, self.config.K
        if self.config.sampling == "poisson":
            clients = np.flatnonzero(self.rng_sampling.random(m) < k / m)
        else:
            clients = self.rng_sampling.choice(m, size=k, replace=False)
        if self.zero_delay:
            delays = np.zeros(clients.shape[0], dtype=np.int64)
        else:
            delays = sample_delays(self.delay, self.rng_delays, clients.shape[0])
        return clients, delays

    def enqueue(self, update: PendingUpdate) -> None:
        """Schedule an update; its tie-break key realises the random arrival order."""
        if update.arrival < self.now:
            raise CausalityViolation(f"arrival tick {update.arrival} is in the past (now {self.now})")
        heapq.heappush(self._heap, (update.arrival, float(self.rng_shuffle.random()), self._seq, update))
        self._seq += 1
        self.counters.enqueued += 1

    def pop(self) -> PendingUpdate | None:
        """Next arrival in time order, advancing the clock; None when nothing is in flight."""
        if not self._heap:
            return None
        tick, _, _, update = heapq.heappop(self._heap)
        self.now = tick
        return update

    def admit(self, update: PendingUpdate, t: int) -> bool:
        """Staleness check for an arrival processed during iteration ``t``."""
        if update.version > t:
            raise CausalityViolation(f"update of version {update.version} seen at iteration {t}")
        if apply_staleness_bound(t - update.version, self.config.tau_max):
            self.counters.accepted += 1
            return True
        self.counters.dropped_stale += 1
        return False

    def discard_in_flight(self) -> None:
        """Cancel every outstanding update (synchronous over-selection)."""
        self.counters.dropped_surplus += len(self._heap)
        self._heap = []

    def pending_count(self) -> int:
        return len(self._heap)


@dataclass
class RunResult:
    """Outcome of one run.

    Attributes:
        config: The configuration that produced it.
        theta: Final model.
        ema_theta: Exponential moving average of the models.
        metrics: One record per completed server iteration.
        summary: Final and best metrics, arrival counters, DP audit values.
        diverged: True when the run stopped on non-finite values.
        staleness: The W matrix built during the run.
        coefficients: Full MA coefficient matrix A (ma-full) or the
            light-weight recursive coefficients (ma-light), else None.
        thetas: Models ``theta_1..theta_T`` when history was retained.
        history: Aggregates R (d x T) when history was retained or ma-full.
    """

    config: SimConfig
    theta: np.ndarray
    ema_theta: np.ndarray
    metrics: list[dict]
    summary: dict
    diverged: bool
    staleness: StalenessMatrix
    coefficients: np.ndarray | None = None
    thetas: np.ndarray | None = None
    history: np.ndarray | None = None
    second_moments: list[np.ndarray] = field(default_factory=list)


def update_historical_ema(x_h: np.ndarray, r_t: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * x_h + (1 - alpha) * r_t``."""
    return alpha * x_h + (1.0 - alpha) * r_t


def weight_prediction_client(theta, tau: int, step_direction, task: Task, client: int, lr: float, steps: int, rng=None) -> np.ndarray:
    """Update computed from a model extrapolated ``tau`` server steps ahead.

    ``step_direction`` is the preconditioned per-step move ``eta H^-1 x_h``
    supplied by the server. The update is measured from the extrapolated
    model.
    """
    predicted = np.asarray(theta) - tau * np.asarray(step_direction)
    delta = task.local_updates(np.array([client]), predicted, lr, steps, rng)[0]
    if not np.all(np.isfinite(delta)):
        raise DivergedError("non-finite local update", client=client)
    return delta


def _finite(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def run(config: SimConfig, task: Task | None = None, *, keep_second_moments: bool = False) -> RunResult:
    """Simulate ``config.horizon`` server iterations of buffered async FL.

    Args:
        config: Validated run configuration.
        task: Objective to train; built from ``config.task`` when omitted.
        keep_second_moments: Record FedAdam's second moment after every step.
    """
    task = task if task is not None else build_task(config)
    T, C, d = config.horizon, config.cohort, task.dim
    method = config.method
    rng_client = substream(config.seed, "client")
    rng_noise = substream(config.seed, "dp-noise")
    arrivals = ArrivalProcess(config, config.seed)
    staleness = StalenessMatrix(T, C, config.staleness_exponent)
    momentum = MomentumMatrix(config.beta, T) if method in MA_METHODS else None
    opt = ServerOptState.create(config.optimizer, d, beta=config.beta, beta2=config.beta2, eps=config.adam_eps)
    optimum = task.optimum
    optimum_loss = task.loss(optimum)

    theta = np.zeros(d)
    ema = theta.copy()
    keep_history = method == "ma-full" or config.retain_history
    history = np.zeros((d, T)) if keep_history else None
    thetas = np.zeros((T, d)) if config.retain_history else None
    coefficients = np.zeros((T, T)) if method in MA_METHODS else None
    light = LightweightState.initial(T, d) if method == "ma-light" else None
    x_hist = np.zeros(d)
    second_moments: list[np.ndarray] = []

    def launch(t: int) -> None:
        clients, delays = arrivals.sample()
        if method == "weight-prediction":
            # A client cannot know how many server steps its delay will span,
            # so it extrapolates with the iteration rate observed so far.
            direction = config.server_lr * x_hist / opt.preconditioner()
            rate = (t - 1) / arrivals.now if arrivals.now > 0 else 1.0
            deltas = np.array(
                [
                    weight_prediction_client(theta, round(delay * rate), direction, task, client, config.local_lr, config.local_steps, rng_client)
                    for client, delay in zip(clients.tolist(), delays.tolist())
                ]
            ).reshape(len(clients), d)
        else:
            deltas = task.local_updates(clients, theta, config.local_lr, config.local_steps, rng_client)
        if not np.all(np.isfinite(deltas)):
            raise DivergedError("non-finite local update", iteration=t)
        for i, (client, delay) in enumerate(zip(clients.tolist(), delays.tolist())):
            delta, payload = deltas[i], None
            if config.dp is not None:
                payload = make_payload(delta, t, T, config.dp)
                delta = None
            arrivals.enqueue(PendingUpdate(client, t, arrivals.now + delay, delta, payload))

    metrics: list[dict] = []
    diverged = False
    best_loss, best_iter = math.inf, 0
    threshold_iter = None
    light_err_max = 0.0

    t = 1
    if thetas is not None:
        thetas[0] = theta
    launch(1)
    buffer: list[PendingUpdate] = []
    last_dispatch = 0
    dropped_this = 0
    resampled = 0
    while t <= T:
        upd = arrivals.pop()
        if upd is None:
            # Only reachable with Poisson sampling: too few clients in flight.
            launch(t)
            resampled += 1
            continue
        if not arrivals.admit(upd, t):
            dropped_this += 1
            continue
        buffer.append(upd)
        if len(buffer) < C:
            continue

        staleness_vals = np.array([t - u.version for u in buffer])
        if config.dp is None:
            scales = downscale(staleness_vals, config.staleness_exponent)
            r_t = np.zeros(d)
            for u, s in zip(buffer, scales):
                r_t += s * u.delta
                staleness.record_arrival(t, u.one_hot(T))
            r_t /= C
        else:
            r_t, w_row = privatize_round([u.payload for u in buffer], C, config.dp, rng_noise, t)
            staleness.set_row(t, w_row)

        rec: dict = {"iteration": t}
        try:
            if history is not None:
                history[:, t - 1] = r_t
            if method == "ma-full":
                a = solve_ma_weights(staleness, momentum, t)
                coefficients[t - 1] = a.coef
                drive = history[:, :t] @ a.active
                target = momentum.prefix(t)[t - 1]
                diff = a.active @ staleness.prefix(t) - target
                rec["ma_residual"] = float(diff @ diff) / float(target @ target)
                theta_new = server_step(opt, theta, drive, config.server_lr, raw=r_t, premomentum=True)
            elif method == "ma-light":
                u_t, v_t = solve_lightweight(light.coef, staleness, momentum, t, prev_product=light.product)
                light = lightweight_step(light, r_t, u_t, v_t, w_row=staleness.row(t))
                coefficients[t - 1] = light.coef.coef
                drive = light.buffer
                target = momentum.prefix(t)[t - 1]
                diff = light.product[:t] - target
                rec["ma_residual"] = float(diff @ diff) / float(target @ target)
                rec["u"], rec["v"] = u_t, v_t
                if history is not None:
                    explicit = history[:, :t] @ light.coef.active
                    err = float(np.linalg.norm(drive - explicit)) / max(float(np.linalg.norm(explicit)), 1e-300)
                    light_err_max = max(light_err_max, err)
                    rec["light_consistency"] = err
                theta_new = server_step(opt, theta, drive, config.server_lr, raw=r_t, premomentum=True)
            else:
                theta_new = server_step(opt, theta, r_t, config.server_lr)
        except DivergedError:
            diverged = True
            break
        if not np.all(np.isfinite(theta_new)):
            diverged = True
            break
        if method == "weight-prediction":
            x_hist = update_historical_ema(x_hist, r_t, config.wp_decay)
        if keep_second_moments and opt.second is not None:
            second_moments.append(opt.second.copy())
        theta = theta_new
        ema = ema_update(ema, theta, config.ema_decay)

        loss = task.loss(theta)
        rec.update(
            {
                "loss": loss,
                "excess_loss": loss - optimum_loss,
                "distance": float(np.linalg.norm(theta - optimum)),
                "ema_loss": task.loss(ema),
                "ema_distance": float(np.linalg.norm(ema - optimum)),
                "r_norm": float(np.linalg.norm(r_t)),
                "buffer_wait": arrivals.now - last_dispatch,
                "drops": dropped_this,
                "accepted": len(buffer),
                "mean_staleness": float(staleness_vals.mean()),
                "max_staleness": int(staleness_vals.max()),
            }
        )
        metrics.append(rec)
        if loss < best_loss:
            best_loss, best_iter = loss, t
        if threshold_iter is None and config.loss_threshold is not None and loss - optimum_loss <= config.loss_threshold:
            threshold_iter = t

        buffer = []
        last_dispatch = arrivals.now
        dropped_this = 0
        t += 1
        if method == "sync":
            arrivals.discard_in_flight()
        if t <= T:
            if thetas is not None:
                thetas[t - 1] = theta
            try:
                launch(t)
            except DivergedError:
                diverged = True
                break

    counters = arrivals.counters
    summary = {
        "method": method,
        "optimizer": config.optimizer,
        "seed": config.seed,
        "iterations": len(metrics),
        "diverged": diverged,
        "final_loss": _finite(metrics[-1]["loss"]) if metrics else None,
        "final_excess_loss": _finite(metrics[-1]["excess_loss"]) if metrics else None,
        "final_distance": _finite(metrics[-1]["distance"]) if metrics else None,
        "final_ema_loss": _finite(metrics[-1]["ema_loss"]) if metrics else None,
        "best_loss": _finite(best_loss) if metrics else None,
        "best_iteration": best_iter if metrics else None,
        "optimum_loss": optimum_loss,
        "iterations_to_threshold": threshold_iter,
        "ticks": arrivals.now,
        "enqueued": counters.enqueued,
        "accepted": counters.accepted,
        "dropped_stale": counters.dropped_stale,
        "dropped_surplus": counters.dropped_surplus,
        "pending_at_end": arrivals.pending_count() + len(buffer),
        "resampled_iterations": resampled,
    }
    if method == "ma-light" and history is not None:
        summary["light_consistency_max"] = light_err_max
    if config.dp is not None:
        summary["dp_gamma"] = config.dp.gamma
        summary["dp_sensitivity"] = config.dp.sensitivity
    return RunResult(
        config=config,
        theta=theta,
        ema_theta=ema,
        metrics=metrics,
        summary=summary,
        diverged=diverged,
        staleness=staleness,
        coefficients=coefficients,
        thetas=thetas,
        history=history,
        second_moments=second_moments,
    )


def simulate_staleness(config: SimConfig) -> StalenessMatrix:
    """Build W from the arrival process alone, with no training.

    Uses the same sampling, delay and shuffle streams as :func:`run`, so
    outside private aggregation it reproduces the W of a training run with
    the same config exactly.
    """
    T, C = config.horizon, config.cohort
    arrivals = ArrivalProcess(config, config.seed)
    staleness = StalenessMatrix(T, C, config.staleness_exponent)

    def launch(t: int) -> None:
        clients, delays = arrivals.sample()
        for client, delay in zip(clients.tolist(), delays.tolist()):
            arrivals.enqueue(PendingUpdate(client, t, arrivals.now + delay, None))

    t = 1
    launch(1)
    filled = 0
    while t <= T:
        upd = arrivals.pop()
        if upd is None:
            launch(t)
            continue
        if not arrivals.admit(upd, t):
            continue
        staleness.record_arrival(t, upd.one_hot(T))
        filled += 1
        if filled == C:
            filled = 0
            t += 1
            if config.method == "sync":
                arrivals.discard_in_flight()
            if t <= T:
                launch(t)
    return staleness
