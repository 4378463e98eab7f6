"""
Outer loop: learn watermark placement and scale so that MAP inpainting under the prior
reconstructs the covered pixels as badly as possible.

Every round draws fresh observation noise, unrolls the inner ascent steps with the watermark
parameters live, and takes one AdamW step on the gradient of

    PSNR(x_t(m), x_T) + c * |m|_1 / n

The iterate from the previous round enters as a constant.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .const import (
    ADAMW_WEIGHT_DECAY,
    GRID_EDGE,
    GRID_MLE_STEPS,
    GRID_RATIOS,
    INNER_STEP_SIZE,
    LAMBDA_TARGET,
    LEARNING_RATE,
    MASK_ALPHA,
    MASK_BETA,
    META_STEPS,
    NOISE_SIGMA,
    PSNR_CAP,
    REG_COEFF,
    MetaGradientMode,
)
from .exceptions import ConfigException, NonFiniteException, ShapeMismatchException
from .flow import FlowModel
from .optim import AdamW
from .solver import ContinuationSchedule, InverseProblem, initial_guess, mle_solve, objective_gradient
from .tensor import SeededRng, Tensor, _constant, as_tensor, enable_grad, grad, no_grad
from .watermark import (
    WatermarkGenerator,
    WatermarkParams,
    compose_display,
    draw_noise,
    observe,
    size_regularizer,
    soft_mask,
)

_LOGGER = logging.getLogger(__name__)

AUDIT_FIELDS = (
    "round",
    "lambda",
    "similarity",
    "regularizer",
    "upper_loss",
    "grad_norm",
    "p_left",
    "p_bottom",
    "scale",
)


@dataclass(frozen=True)
class HarvimConfig:
    rounds: int = 10
    inner_steps: int = META_STEPS
    lambda_target: float = LAMBDA_TARGET
    sigma: float = NOISE_SIGMA
    learning_rate: float = LEARNING_RATE
    weight_decay: float = ADAMW_WEIGHT_DECAY
    reg_coeff: float = REG_COEFF
    alpha: float = MASK_ALPHA
    beta: float = MASK_BETA
    step_size: float = INNER_STEP_SIZE
    mle_steps: int = 50
    grid_mle_steps: int = GRID_MLE_STEPS
    meta_mode: MetaGradientMode = MetaGradientMode.EXACT_K1
    init_log_scale: float = 0.0
    glyph_tone: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.meta_mode, str):
            object.__setattr__(self, "meta_mode", MetaGradientMode(self.meta_mode))
        if self.rounds < 0:
            raise ConfigException("rounds must be >= 0")
        if self.inner_steps < 1:
            raise ConfigException("inner steps must be >= 1")
        if self.meta_mode is MetaGradientMode.EXACT_K1 and self.inner_steps != 1:
            raise ConfigException("meta mode exact-k1 needs inner_steps = 1; use hvp or first-order for K > 1")
        if self.reg_coeff < 0:
            raise ConfigException("regularizer coefficient must be >= 0")
        if self.sigma <= 0 or self.beta <= 0 or self.learning_rate <= 0 or self.step_size <= 0:
            raise ConfigException("sigma, beta, learning rate and step size must be positive")
        if self.lambda_target < 0 or self.weight_decay < 0:
            raise ConfigException("lambda target and weight decay must be >= 0")
        if self.mle_steps < 1 or self.grid_mle_steps < 1:
            raise ConfigException("MLE step counts must be >= 1")
        if self.glyph_tone is not None and not 0.0 <= self.glyph_tone <= 1.0:
            raise ConfigException("glyph tone must lie in [0, 1]")

    @property
    def schedule(self) -> ContinuationSchedule:
        return ContinuationSchedule(
            self.lambda_target, max(self.rounds, 1), self.inner_steps, self.step_size, self.mle_steps
        )


@dataclass
class MetaGradient:
    grads: Dict[str, np.ndarray]
    norm: float
    mode: MetaGradientMode


@dataclass
class RoundOutcome:
    """ Everything one differentiated round produces besides the gradient """

    x: np.ndarray
    m: np.ndarray
    similarity: float
    regularizer: float
    upper_loss: float


@dataclass
class HarvimState:
    params: WatermarkParams
    x: np.ndarray
    lam: float = 0.0
    round: int = 0
    optimizer: Optional[AdamW] = None
    history: List[dict] = field(default_factory=list)


@dataclass
class GridResult:
    params: WatermarkParams
    scores: List[Tuple[float, float, float]]
    mle_steps: int


@dataclass
class HarvimResult:
    params: WatermarkParams
    m: np.ndarray
    display: np.ndarray
    audit: List[dict]
    grid: GridResult
    state: HarvimState


def similarity(x, x_true) -> Tensor:
    """ PSNR in dB through the MSE chain; exact equality is capped and carries no gradient """
    x, x_true = as_tensor(x), as_tensor(x_true)
    if x.shape != x_true.shape:
        raise ShapeMismatchException(f"similarity needs equal shapes, got {x.shape} and {x_true.shape}")
    difference = x - x_true
    mse = (difference * difference).mean()
    if mse.item() == 0.0:
        _LOGGER.warning("Reconstruction equals the ground truth; similarity capped at %.0f dB", PSNR_CAP)
        return _constant(np.asarray(PSNR_CAP, dtype=x.dtype))
    return mse.log() * (-10.0 / math.log(10.0))


def upper_loss(x, x_true, m, reg_coeff: float) -> Tensor:
    """ similarity + c * R(m) / n """
    m = as_tensor(m)
    return similarity(x, x_true) + size_regularizer(m) * (reg_coeff / m.size)


class Harvim:
    def __init__(self, prior: FlowModel, generator: WatermarkGenerator, config: HarvimConfig):
        if generator.size != prior.dim:
            raise ShapeMismatchException(f"generator renders {generator.size} pixels, prior expects {prior.dim}")
        self.prior = prior
        self.generator = generator
        self.config = config

    def _coverage(self, m):
        return soft_mask(m, self.config.alpha, self.config.beta).coverage

    def unroll(self, x_start: Tensor, observation: Tensor, coverage: Tensor, lam: float) -> Tensor:
        """ K ascent steps from x_start with the observation and coverage left live """
        config = self.config
        x = x_start
        for _ in range(config.inner_steps):
            if config.meta_mode is MetaGradientMode.FIRST_ORDER:
                point, create_graph = x.detach(), False
            else:
                point, create_graph = x, config.meta_mode is MetaGradientMode.HVP
            step = objective_gradient(point, observation, coverage, config.sigma, self.prior, lam, create_graph)
            x = x + step * config.step_size
        return x

    def meta_grad(
        self, params: WatermarkParams, x_prev: np.ndarray, x_true, noise: np.ndarray, lam: float
    ) -> Tuple[MetaGradient, RoundOutcome]:
        """
        Gradient of the upper loss w.r.t. every learnable watermark field, through
        render -> mask -> observe -> K inner steps. Noise is held fixed.
        """
        x_true = as_tensor(x_true)
        leaves = self.generator.leaves(params)
        with enable_grad():
            m = self.generator.render(params, leaves)
            coverage = self._coverage(m)
            observation = observe(x_true, coverage, noise)
            x = self.unroll(_constant(np.asarray(x_prev, dtype=x_true.dtype)), observation, coverage, lam)
            score = similarity(x, x_true)
            regularizer = size_regularizer(m) * (1.0 / m.size)
            loss = score + regularizer * self.config.reg_coeff
            gradients = grad(loss, list(leaves.values()))
        grads = {name: g.numpy() for name, g in zip(leaves.keys(), gradients)}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if not math.isfinite(norm):
            _LOGGER.error("Non-finite meta-gradient at %s: %s", params, grads)
            raise NonFiniteException("meta-gradient is not finite")
        outcome = RoundOutcome(x.numpy(), m.numpy(), score.item(), regularizer.item(), loss.item())
        return MetaGradient(grads, norm, self.config.meta_mode), outcome

    def grid_init(self, x_true, glyph: str, rng: SeededRng) -> GridResult:
        """
        Score each (p_left, p_bottom) on the 3x3 grid by the PSNR of a short MLE reconstruction and
        keep the lowest. Candidates share one noise draw; ties keep the earlier candidate.
        """
        config = self.config
        x_true = as_tensor(x_true)
        noise = draw_noise(rng, x_true.size, config.sigma)
        best = None
        scores = []
        for p_left in GRID_RATIOS:
            for p_bottom in GRID_RATIOS:
                candidate = self.generator.initial_params(
                    glyph,
                    float(np.clip(p_left, GRID_EDGE, 1.0 - GRID_EDGE)),
                    float(np.clip(p_bottom, GRID_EDGE, 1.0 - GRID_EDGE)),
                    config.init_log_scale,
                )
                with no_grad():
                    m = self.generator.render(candidate)
                    coverage = self._coverage(m)
                    observation = observe(x_true, coverage, noise)
                problem = InverseProblem(observation, coverage, config.sigma, self.prior)
                x = mle_solve(problem, config.grid_mle_steps, config.step_size, initial_guess(problem))
                score = similarity(x, x_true).item()
                scores.append((p_left, p_bottom, score))
                _LOGGER.debug("Grid candidate (%.1f, %.1f): PSNR %.3f dB", p_left, p_bottom, score)
                if best is None or score < best[0]:
                    best = (score, candidate)
        score, chosen = best
        _LOGGER.info("Grid search picked p_left=%.2f p_bottom=%.2f (%.3f dB)", chosen.p_left, chosen.p_bottom, score)
        return GridResult(chosen, scores, len(scores) * config.grid_mle_steps)

    def _audit_row(self, round_index, lam, params, outcome: RoundOutcome, gradient: MetaGradient) -> dict:
        placement = self.generator.placement(params)
        return {
            "round": round_index,
            "lambda": lam,
            "similarity": outcome.similarity,
            "regularizer": outcome.regularizer,
            "upper_loss": outcome.upper_loss,
            "grad_norm": gradient.norm,
            "p_left": placement["p_left"],
            "p_bottom": placement["p_bottom"],
            "scale": placement["side_fraction"],
        }

    def run(self, x_true, glyph: str, rng: Optional[SeededRng] = None) -> HarvimResult:
        config = self.config
        x_true = as_tensor(x_true)
        if x_true.shape != (self.prior.dim,):
            raise ShapeMismatchException(f"image has shape {x_true.shape}, prior expects ({self.prior.dim},)")
        rng = rng or SeededRng(config.seed)
        grid = self.grid_init(x_true, glyph, rng.spawn(0))
        round_rng = rng.spawn(1)
        params = grid.params
        schedule = config.schedule

        # lambda_0 = 0: plain MLE reconstruction of the first observation
        with no_grad():
            m = self.generator.render(params)
            coverage = self._coverage(m)
            observation = observe(x_true, coverage, draw_noise(round_rng, x_true.size, config.sigma))
        problem = InverseProblem(observation, coverage, config.sigma, self.prior)
        x = mle_solve(problem, config.mle_steps, config.step_size, initial_guess(problem)).numpy()

        state = HarvimState(params, x, 0.0, 0, AdamW(config.learning_rate, weight_decay=config.weight_decay))
        for round_index in range(1, config.rounds + 1):
            lam = schedule.lambda_at(round_index)
            noise = draw_noise(round_rng, x_true.size, config.sigma)
            gradient, outcome = self.meta_grad(state.params, state.x, x_true, noise, lam)
            row = self._audit_row(round_index, lam, state.params, outcome, gradient)
            state.history.append(row)
            _LOGGER.debug("Round %d: %s", round_index, row)
            updated = state.optimizer.step(state.params.arrays(), gradient.grads)
            state.params = state.params.with_values(updated)
            state.x = outcome.x
            state.lam = lam
            state.round = round_index
        if config.rounds:
            _LOGGER.info(
                "HARVIM finished %d rounds: upper loss %.3f -> %.3f",
                config.rounds,
                state.history[0]["upper_loss"],
                state.history[-1]["upper_loss"],
            )

        with no_grad():
            m = self.generator.render(state.params)
            tone = float(x_true.numpy().mean()) if config.glyph_tone is None else config.glyph_tone
            display = compose_display(x_true, m, tone, config.alpha, config.beta)
        return HarvimResult(state.params, m.numpy(), display.numpy(), state.history, grid, state)
