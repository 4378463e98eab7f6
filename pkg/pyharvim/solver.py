"""
MAP inpainting under the flow prior: gradient ascent on

    -|y - (1 - W) * x|^2 / (2 sigma^2) + lambda * log p(x)

with lambda annealed from 0 to its target over a fixed number of rounds.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .const import INNER_STEP_SIZE, LAMBDA_TARGET
from .exceptions import ConfigException, DivergenceException, ShapeMismatchException
from .flow import FlowModel
from .metrics import psnr
from .tensor import SeededRng, Tensor, _constant, as_tensor, enable_grad, grad, no_grad

_LOGGER = logging.getLogger(__name__)

# consecutive objective drops tolerated before an ascent is declared divergent
DIVERGENCE_PATIENCE = 5
DIVERGENCE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ContinuationSchedule:
    lambda_target: float = LAMBDA_TARGET
    rounds: int = 10
    inner_steps: int = 1
    step_size: float = INNER_STEP_SIZE
    mle_steps: int = 50

    def __post_init__(self):
        if self.lambda_target < 0:
            raise ConfigException("lambda target must be >= 0")
        if self.rounds < 1:
            raise ConfigException("continuation needs at least one round")
        if self.inner_steps < 0 or self.mle_steps < 0:
            raise ConfigException("step counts must be >= 0")
        if self.step_size <= 0:
            raise ConfigException("inner step size must be positive")

    def lambda_at(self, round_index: int) -> float:
        """ lambda_t = lambda * t / T, with the last round pinned to the target """
        if round_index >= self.rounds:
            return self.lambda_target
        return self.lambda_target * round_index / self.rounds


@dataclass(frozen=True)
class InverseProblem:
    observation: Tensor
    coverage: Tensor
    sigma: float
    prior: FlowModel

    def __post_init__(self):
        object.__setattr__(self, "observation", as_tensor(self.observation))
        object.__setattr__(self, "coverage", as_tensor(self.coverage))
        if self.observation.shape != self.coverage.shape:
            raise ShapeMismatchException(
                f"observation {self.observation.shape} and coverage {self.coverage.shape} differ in shape"
            )
        if self.observation.shape != (self.prior.dim,):
            raise ShapeMismatchException(
                f"prior expects {self.prior.dim} pixels, observation has {self.observation.shape}"
            )
        if self.sigma <= 0:
            raise ConfigException("noise sigma must be positive")

    @property
    def size(self) -> int:
        return self.prior.dim


@dataclass
class SolveState:
    x: np.ndarray
    lam: float
    round: int
    objective: float


def objective(x, problem: InverseProblem, lam: float) -> Tensor:
    x = as_tensor(x)
    residual = problem.observation - (1.0 - problem.coverage) * x
    value = (residual * residual).sum() * (-0.5 / problem.sigma ** 2)
    if lam != 0.0:
        value = value + problem.prior.log_prob(x) * lam
    return value


def objective_gradient(
    x: Tensor, observation: Tensor, coverage: Tensor, sigma: float, prior: FlowModel, lam: float, create_graph=False
) -> Tensor:
    """
    d objective / dx. The data term is written out analytically so it stays differentiable
    w.r.t. the observation and the coverage.
    """
    keep = 1.0 - coverage
    value = keep * (observation - keep * x) / (sigma * sigma)
    if lam != 0.0:
        value = value + prior.grad_log_prob(x, create_graph=create_graph) * lam
    return value


def initial_guess(problem: InverseProblem) -> Tensor:
    """ Observed pixels copied from y, masked pixels (W > 0.5) filled with the observed mean """
    observation = problem.observation.numpy()
    masked = problem.coverage.numpy() > 0.5
    fill = float(observation[~masked].mean()) if np.any(~masked) else 0.0
    return Tensor(np.where(masked, fill, observation))


def _value_and_gradient(x: np.ndarray, problem: InverseProblem, lam: float):
    point = Tensor(x, requires_grad=True)
    with enable_grad():
        value = objective(point, problem, lam)
        (gradient,) = grad(value, [point])
    return value.item(), gradient.data


def _ascend(problem: InverseProblem, x: np.ndarray, lam: float, steps: int, step_size: float, label: str):
    """ Fixed-length gradient ascent; returns (x, objective at x) """
    previous = None
    drops = 0
    for step in range(steps):
        value, gradient = _value_and_gradient(x, problem, lam)
        if previous is not None and value < previous - DIVERGENCE_TOLERANCE * abs(previous):
            drops += 1
            if drops >= DIVERGENCE_PATIENCE:
                _LOGGER.error(
                    "%s diverged at step %d (lambda %.4g, step size %.3g): objective %.6g after %.6g",
                    label,
                    step,
                    lam,
                    step_size,
                    value,
                    previous,
                )
                raise DivergenceException(
                    f"{label}: objective dropped {drops} steps in a row (now {value:.6g}); lower the step size"
                )
        else:
            drops = 0
        previous = value
        x = x + step_size * gradient
        _LOGGER.debug("%s step %d: objective %.6g", label, step, value)
    with no_grad():
        final = objective(_constant(x), problem, lam).item()
    return x, final


def mle_solve(problem: InverseProblem, steps: int, step_size: float, x_init=None) -> Tensor:
    """ Ascent on the data term alone (lambda = 0) """
    if steps < 1:
        raise ConfigException("mle_solve needs at least one step")
    start = initial_guess(problem) if x_init is None else as_tensor(x_init)
    x, value = _ascend(problem, start.numpy(), 0.0, steps, step_size, "MLE solve")
    _LOGGER.debug("MLE solve finished after %d steps: objective %.6g", steps, value)
    return Tensor(x)


def random_start(problem: InverseProblem, rng: SeededRng, scale: float = 0.1) -> Tensor:
    """ Observation on observed pixels, zero on masked ones, plus scale * N(0, 1) everywhere """
    keep = 1.0 - problem.coverage.numpy()
    return Tensor(keep * problem.observation.numpy() + rng.normal((problem.size,), scale))


def continuation_solve(
    problem: InverseProblem,
    schedule: ContinuationSchedule,
    rng: Optional[SeededRng] = None,
    x_init=None,
) -> List[SolveState]:
    """
    Run schedule.rounds rounds of schedule.inner_steps ascent steps at lambda_t = lambda * t / T,
    warm-starting each round from the last. Returns the state at the end of every round.

    Without x_init the start is random when rng is given and initial_guess() otherwise.
    """
    if x_init is not None:
        x = as_tensor(x_init).numpy()
    elif rng is not None:
        x = random_start(problem, rng).numpy()
    else:
        x = initial_guess(problem).numpy()
    states = []
    for round_index in range(1, schedule.rounds + 1):
        lam = schedule.lambda_at(round_index)
        x, value = _ascend(problem, x, lam, schedule.inner_steps, schedule.step_size, f"round {round_index}")
        states.append(SolveState(np.array(x), lam, round_index, value))
        _LOGGER.debug("Continuation round %d: lambda %.4g, objective %.6g", round_index, lam, value)
    return states


def binarize(coverage) -> Tensor:
    data = as_tensor(coverage).numpy()
    return Tensor((data > 0.5).astype(data.dtype))


def flow_r_remove(
    observation,
    coverage,
    prior: FlowModel,
    schedule: ContinuationSchedule,
    rng: SeededRng,
    sigma: float,
    binarize_mask: bool = False,
    init_scale: float = 0.1,
) -> List[SolveState]:
    """
    Worst-case remover that knows the mask: MLE warm-up then continuation from a random start.
    The reconstruction is the x of the last returned state.
    """
    if binarize_mask:
        coverage = binarize(coverage)
    problem = InverseProblem(observation, coverage, sigma, prior)
    start = random_start(problem, rng, init_scale)
    if schedule.mle_steps:
        start = mle_solve(problem, schedule.mle_steps, schedule.step_size, start)
    return continuation_solve(problem, schedule, x_init=start)


def trajectory_rows(states: List[SolveState], x_true=None) -> List[dict]:
    """ One CSV-ready row per round; psnr is blank without a ground truth """
    rows = []
    for state in states:
        value = ""
        if x_true is not None:
            value = psnr(state.x, x_true)
        rows.append({"round": state.round, "lambda": state.lam, "objective": state.objective, "psnr": value})
    return rows
