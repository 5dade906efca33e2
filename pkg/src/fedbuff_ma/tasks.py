"""Synthetic federated objectives and the oracle quantities behind the bounds.

Two convex tasks are provided. :class:`QuadraticTask` has client objectives
``F_k(x) = 1/2 (x - c_k)^T H (x - c_k)`` with a shared diagonal curvature H
(the identity by default), so local training and the optimum have closed
forms. :class:`LogisticTask` is binary logistic regression with per-client
feature shifts and an L2 penalty.

The second half of the module evaluates how far a run's final model is
from the ideal full-participation momentum trajectory replayed on the same
model sequence, and the matching theoretical error bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import optimize, special

from .errors import ContractViolation, DiagnosticError, DivergedError, InvalidParameter
from .momentum import MomentumMatrix


class Task(Protocol):
    """Interface the engine needs from a federated objective."""

    dim: int
    num_clients: int

    def loss(self, theta: np.ndarray) -> float: ...

    @property
    def optimum(self) -> np.ndarray: ...

    def local_updates(self, clients: np.ndarray, theta: np.ndarray, lr: float, steps: int, rng: np.random.Generator | None = None) -> np.ndarray: ...


@dataclass
class QuadraticTask:
    """Heterogeneous quadratic clients sharing one diagonal curvature.

    Attributes:
        centers: Client minimisers ``c_k``, shape ``(m, d)``.
        curvature: Diagonal of H, length d, all positive.
        grad_noise: Std of Gaussian noise added to every local gradient.
            Zero gives full-batch local steps.
    """

    centers: np.ndarray
    curvature: np.ndarray
    grad_noise: float = 0.0

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.curvature = np.asarray(self.curvature, dtype=np.float64)
        if self.centers.ndim != 2 or self.curvature.shape != (self.centers.shape[1],):
            raise ContractViolation("centers must be (m, d) and curvature length d")
        if np.any(self.curvature <= 0):
            raise InvalidParameter("curvature entries must be positive")
        self._center_mean = self.centers.mean(axis=0)
        diff = self.centers - self._center_mean
        self._floor = 0.5 * float(np.mean(np.sum(self.curvature * diff * diff, axis=1)))

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def num_clients(self) -> int:
        return self.centers.shape[0]

    @property
    def optimum(self) -> np.ndarray:
        return self._center_mean.copy()

    def loss(self, theta: np.ndarray) -> float:
        """Global objective ``(1/m) sum_k F_k(theta)``."""
        diff = theta - self._center_mean
        return 0.5 * float(np.sum(self.curvature * diff * diff)) + self._floor

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.curvature * (theta - self._center_mean)

    def local_updates(self, clients, theta, lr, steps, rng=None) -> np.ndarray:
        """Rows ``theta - theta'_k`` after ``steps`` local gradient steps."""
        clients = np.asarray(clients, dtype=np.int64)
        offset = theta[None, :] - self.centers[clients]
        if self.grad_noise == 0.0 or steps == 0:
            shrink = 1.0 - (1.0 - lr * self.curvature) ** steps
            return offset * shrink
        if rng is None:
            raise InvalidParameter("a random stream is required when grad_noise > 0")
        x = offset.copy()
        for _ in range(steps):
            noise = rng.normal(0.0, self.grad_noise, size=x.shape)
            x = x - lr * (self.curvature * x + noise)
        return offset - x

    def all_updates(self, theta, lr, steps) -> np.ndarray:
        """Noise-free updates of every client from ``theta``."""
        offset = theta[None, :] - self.centers
        return offset * (1.0 - (1.0 - lr * self.curvature) ** steps)


def make_quadratic_task(
    dim: int,
    num_clients: int,
    heterogeneity: float,
    rng: np.random.Generator,
    optimum_scale: float = 1.0,
    curvature_min: float = 1.0,
    grad_noise: float = 0.0,
) -> QuadraticTask:
    """Centers ``c* + heterogeneity * N(0, I)`` around ``c* ~ N(0, optimum_scale^2 I)``.

    Curvature is geometrically spaced from ``curvature_min`` to 1, so the
    default of 1 gives the isotropic objective ``1/2 ||x - c_k||^2``.
    """
    if heterogeneity < 0 or optimum_scale < 0:
        raise InvalidParameter("heterogeneity and optimum_scale must be >= 0")
    if not 0 < curvature_min <= 1:
        raise InvalidParameter(f"curvature_min must lie in (0, 1], got {curvature_min}")
    center = optimum_scale * rng.normal(size=dim)
    centers = center + heterogeneity * rng.normal(size=(num_clients, dim))
    curvature = np.geomspace(curvature_min, 1.0, dim) if curvature_min < 1 else np.ones(dim)
    return QuadraticTask(centers=centers, curvature=curvature, grad_noise=grad_noise)


@dataclass
class LogisticTask:
    """Binary logistic regression split across clients.

    Client k holds ``features[k]`` of shape ``(n, d)`` and labels in {0, 1}.
    The global objective is the mean client loss plus ``l2 / 2 ||theta||^2``,
    and each client applies the same penalty locally.
    """

    features: np.ndarray
    labels: np.ndarray
    l2: float = 1e-2

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 3 or self.labels.shape != self.features.shape[:2]:
            raise ContractViolation("features must be (m, n, d) and labels (m, n)")
        res = optimize.minimize(
            self.loss, np.zeros(self.dim), jac=self.grad, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000}
        )
        self._optimum = res.x

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def num_clients(self) -> int:
        return self.features.shape[0]

    @property
    def optimum(self) -> np.ndarray:
        return self._optimum.copy()

    def _client_grads(self, clients: np.ndarray, thetas: np.ndarray) -> np.ndarray:
        x = self.features[clients]
        z = np.einsum("knd,kd->kn", x, thetas)
        resid = special.expit(z) - self.labels[clients]
        return np.einsum("knd,kn->kd", x, resid) / x.shape[1] + self.l2 * thetas

    def loss(self, theta: np.ndarray) -> float:
        z = self.features @ theta
        per = np.logaddexp(0.0, z) - self.labels * z
        return float(per.mean()) + 0.5 * self.l2 * float(theta @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        clients = np.arange(self.num_clients)
        return self._client_grads(clients, np.broadcast_to(theta, (self.num_clients, self.dim))).mean(axis=0)

    def local_updates(self, clients, theta, lr, steps, rng=None) -> np.ndarray:
        clients = np.asarray(clients, dtype=np.int64)
        start = np.broadcast_to(theta, (clients.shape[0], self.dim)).copy()
        x = start.copy()
        for _ in range(steps):
            x = x - lr * self._client_grads(clients, x)
        if not np.all(np.isfinite(x)):
            raise DivergedError("local training produced non-finite parameters")
        return start - x

    def all_updates(self, theta, lr, steps) -> np.ndarray:
        return self.local_updates(np.arange(self.num_clients), theta, lr, steps)


def make_logistic_task(
    dim: int,
    num_clients: int,
    heterogeneity: float,
    rng: np.random.Generator,
    samples_per_client: int = 20,
    label_noise: float = 0.05,
    l2: float = 1e-2,
) -> LogisticTask:
    """Features ``N(shift_k, I)`` with ``shift_k ~ heterogeneity * N(0, I)``;
    labels from a random linear teacher, each flipped with probability
    ``label_noise``."""
    if not 0 <= label_noise < 0.5:
        raise InvalidParameter(f"label_noise must lie in [0, 0.5), got {label_noise}")
    teacher = rng.normal(size=dim) / math.sqrt(dim)
    shifts = heterogeneity * rng.normal(size=(num_clients, 1, dim))
    features = shifts + rng.normal(size=(num_clients, samples_per_client, dim))
    labels = (features @ teacher > 0).astype(np.float64)
    flip = rng.random(labels.shape) < label_noise
    labels = np.where(flip, 1.0 - labels, labels)
    return LogisticTask(features=features, labels=labels, l2=l2)


def client_local_train(theta: np.ndarray, task: Task, client: int, lr: float, steps: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Update ``theta - theta'`` of one client after ``steps`` local steps."""
    if not 0 <= client < task.num_clients:
        raise ContractViolation(f"client {client} outside [0, {task.num_clients})")
    delta = task.local_updates(np.array([client]), theta, lr, steps, rng)[0]
    if not np.all(np.isfinite(delta)):
        raise DivergedError("non-finite local update", client=client)
    return delta


def oracle_population_update(theta: np.ndarray, task: Task, lr: float, steps: int) -> np.ndarray:
    """Noise-free average update ``d*`` of all m clients from ``theta``."""
    if task.num_clients > 2000:
        raise InvalidParameter("population oracle is limited to m <= 2000 clients")
    return task.all_updates(theta, lr, steps).mean(axis=0)


def ideal_trajectory(theta1: np.ndarray, thetas: np.ndarray, task: Task, lr: float, steps: int, beta: float, eta: float) -> np.ndarray:
    """Final model ``theta_1 - eta D* M^T 1`` of ideal full-participation momentum.

    ``thetas`` holds the run's own model sequence ``theta_1..theta_T`` (shape
    ``(T, d)``); column t of ``D*`` is the population update at ``theta_t``.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    horizon = thetas.shape[0]
    weights = MomentumMatrix(beta, horizon).dense().sum(axis=0)
    total = np.zeros(thetas.shape[1])
    for t in range(horizon):
        total += weights[t] * oracle_population_update(thetas[t], task, lr, steps)
    return np.asarray(theta1, dtype=np.float64) - eta * total


@dataclass(frozen=True)
class TheoremBoundInputs:
    """Measured constants entering the error bounds.

    ``rho`` is a Monte-Carlo estimate, so any bound using it is an
    estimate rather than a certificate.
    """

    S: float
    G: float
    rho: float
    tau_max: int
    cohort: int
    horizon: int
    eta: float
    a_frob_sq: float | None = None


def measure_bound_inputs(
    thetas: np.ndarray | None,
    task: Task,
    lr: float,
    steps: int,
    sample_size: int,
    cohort: int,
    tau_max: int,
    eta: float,
    rng: np.random.Generator,
    n_subsets: int = 1000,
    n_iterations: int = 10,
    a_frob_sq: float | None = None,
) -> TheoremBoundInputs:
    """Empirical S, G and Monte-Carlo rho from a retained model trace.

    S is the largest ``||d*_t||`` over the run and G the largest
    ``sqrt(E_k ||Delta_k(theta_t) - d*_t||^2)``. For rho, ``n_iterations``
    evenly spaced iterations are examined; at each, ``n_subsets`` random
    client subsets of size ``sample_size`` give ``mean ||Delta_k - d*||^2 -
    ||d_K - d*||^2`` and the largest positive value is kept.
    """
    if thetas is None or len(thetas) == 0:
        raise DiagnosticError("bound measurement needs the run's model trace")
    thetas = np.asarray(thetas, dtype=np.float64)
    horizon = thetas.shape[0]
    m = task.num_clients
    if not 1 <= sample_size <= m:
        raise InvalidParameter(f"sample size {sample_size} outside [1, {m}]")
    s_max = g_sq_max = 0.0
    probe = set(np.linspace(0, horizon - 1, min(n_iterations, horizon)).round().astype(int).tolist())
    rho_sq = 0.0
    for t in range(horizon):
        upd = task.all_updates(thetas[t], lr, steps)
        d_star = upd.mean(axis=0)
        dev = upd - d_star
        dev_sq = np.sum(dev * dev, axis=1)
        s_max = max(s_max, float(np.linalg.norm(d_star)))
        g_sq_max = max(g_sq_max, float(dev_sq.mean()))
        if t in probe:
            for _ in range(n_subsets):
                idx = rng.choice(m, size=sample_size, replace=False)
                mean_dev = dev[idx].mean(axis=0)
                gap = float(dev_sq[idx].mean()) - float(mean_dev @ mean_dev)
                rho_sq = max(rho_sq, gap)
    return TheoremBoundInputs(
        S=s_max,
        G=math.sqrt(g_sq_max),
        rho=math.sqrt(rho_sq),
        tau_max=tau_max,
        cohort=cohort,
        horizon=horizon,
        eta=eta,
        a_frob_sq=a_frob_sq,
    )


@dataclass(frozen=True)
class BoundCheck:
    """Outcome of comparing a run against one error bound."""

    name: str
    lhs: float
    rhs: float
    satisfied: bool
    estimated: bool = True

    def as_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "satisfied": self.satisfied, "estimated": self.estimated}


def sync_bound(b: TheoremBoundInputs) -> float:
    return 0.5 * b.eta**2 * b.horizon * b.G**2


def async_bound(b: TheoremBoundInputs) -> float:
    return b.eta**2 * (2 * b.horizon * b.S**2 + b.horizon * b.G**2 + 2 * b.rho**2 / b.cohort)


def ma_bound(b: TheoremBoundInputs) -> float:
    if b.a_frob_sq is None:
        raise DiagnosticError("the approximation bound needs ||A||_F^2")
    return b.eta**2 * (b.horizon * b.G**2 + 2 * b.rho**2 / (b.horizon * b.cohort) * b.a_frob_sq)


def generalized_ma_bound(b: TheoremBoundInputs, one_minus_alpha: np.ndarray) -> float:
    """Bound for any rank of W, with ``A(T) = sum_i i (1 - alpha_i)``."""
    if b.a_frob_sq is None:
        raise DiagnosticError("the approximation bound needs ||A||_F^2")
    oma = np.asarray(one_minus_alpha, dtype=np.float64)
    a_t = float(np.sum(np.arange(1, oma.shape[0] + 1) * oma))
    return b.eta**2 * (2 * b.S**2 * a_t / b.horizon + b.G**2 * b.horizon + 2 * b.rho**2 / (b.horizon * b.cohort) * b.a_frob_sq)


def trajectory_gap(theta_star: np.ndarray, theta_final: np.ndarray, horizon: int) -> float:
    """``||(theta* - theta_final) / T||^2``."""
    diff = (np.asarray(theta_star) - np.asarray(theta_final)) / horizon
    return float(diff @ diff)


def theorem_gap_check(name: str, lhs: float, rhs: float, estimated: bool = True) -> BoundCheck:
    """Package one lhs/rhs comparison. ``estimated`` marks use of rho-hat."""
    return BoundCheck(name=name, lhs=float(lhs), rhs=float(rhs), satisfied=bool(lhs <= rhs), estimated=estimated)
