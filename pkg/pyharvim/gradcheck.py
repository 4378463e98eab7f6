"""
Finite-difference oracle suites for every gradient the package relies on.

Each suite draws random small problems, differentiates them with the tape and compares against
central differences in 64-bit. Both the `gradcheck` command and the tests run these.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .const import MASK_BETA, MetaGradientMode
from .exceptions import GradientCheckException
from .flow import FlowModel, identity_flow
from .harvim import Harvim, HarvimConfig, similarity
from .solver import objective_gradient
from .tensor import (
    SeededRng,
    Tensor,
    _constant,
    add,
    broadcast_to,
    div,
    enable_grad,
    exp,
    finite_diff_grad,
    grad,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    sigmoid,
    sub,
    sum_to,
    tabs,
    tanh,
    transpose,
    tsum,
)
from .utils import relative_error
from .watermark import WatermarkGenerator, WatermarkParams, default_atlas, observe, size_regularizer, soft_mask

_LOGGER = logging.getLogger(__name__)

CORE_TOLERANCE = 1e-4
META_TOLERANCE = 1e-3
# every fifth meta case runs the default sharp mask, where differences are noisier
SHARP_META_TOLERANCE = 1e-2
SHARP_META_EVERY = 5
STEP = 1e-5
DEFAULT_CASES = 100
# render is piecewise smooth; points that straddle a kink of the bilinear stamp are redrawn
MAX_REDRAWS = 10


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    redrawn: int = 0
    worst: float = 0.0
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.cases > 0

    def __str__(self):
        status = "ok" if self.passed else f"FAILED ({len(self.failures)})"
        return (
            f"{self.name:<8} {self.cases:>4} cases  worst rel-err {self.worst:.2e}  "
            f"redrawn {self.redrawn:>3}  {status}"
        )


def check_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = STEP) -> Tuple[float, np.ndarray]:
    """ Relative error between the tape gradient of scalar f at x and central differences """
    point = Tensor(x, requires_grad=True, dtype=np.float64)
    with enable_grad():
        (analytic,) = grad(f(point), [point])
    numeric = finite_diff_grad(f, x, h)
    return relative_error(analytic.numpy(), numeric.numpy()), analytic.numpy()


def _is_smooth(f, x: np.ndarray, h: float, tolerance: float) -> bool:
    coarse = finite_diff_grad(f, x, h).numpy()
    fine = finite_diff_grad(f, x, h / 4.0).numpy()
    return relative_error(coarse, fine) < tolerance / 10.0


def _record(result: SuiteResult, label: str, error: float, tolerance: float):
    result.cases += 1
    result.worst = max(result.worst, error)
    if error > tolerance:
        result.failures.append(f"{label}: rel-err {error:.3e} > {tolerance:.0e}")
        _LOGGER.warning("Gradient check %s/%s failed: rel-err %.3e", result.name, label, error)
    else:
        _LOGGER.debug("Gradient check %s/%s: rel-err %.3e", result.name, label, error)


def _shape(rng: SeededRng) -> Tuple[int, int]:
    return int(rng.integers(1, 4)), int(rng.integers(1, 5))


def _away_from_zero(rng: SeededRng, shape, low: float = 0.2) -> np.ndarray:
    magnitude = rng.uniform(low, 1.5, shape)
    signs = np.where(rng.uniform(0.0, 1.0, shape) < 0.5, -1.0, 1.0)
    return magnitude * signs


def _weighted(value: Tensor, weights: np.ndarray) -> Tensor:
    return (value * _constant(weights)).sum()


def _unary(op, sampler=None):
    def build(rng: SeededRng):
        shape = _shape(rng)
        x = sampler(rng, shape) if sampler else rng.normal(shape)
        weights = rng.normal(shape)
        return x, lambda t: _weighted(op(t), weights)

    return build


def _binary(op, side: int, sampler=None, broadcast: bool = False):
    """ Differentiate w.r.t. one operand (side 0 or 1) with the other held constant """

    def build(rng: SeededRng):
        shape = _shape(rng)
        other_shape = (1, shape[1]) if broadcast else shape
        shapes = (shape, other_shape) if side == 0 else (other_shape, shape)
        operands = [rng.normal(shapes[0]), sampler(rng, shapes[1]) if sampler else rng.normal(shapes[1])]
        weights = rng.normal(shape)
        fixed = operands[1 - side]

        def f(t):
            args = (t, _constant(fixed)) if side == 0 else (_constant(fixed), t)
            return _weighted(op(*args), weights)

        return operands[side], f

    return build


def _matmul(side: int):
    def build(rng: SeededRng):
        rows, inner = _shape(rng)
        cols = int(rng.integers(1, 4))
        a, b = rng.normal((rows, inner)), rng.normal((inner, cols))
        weights = rng.normal((rows, cols))
        if side == 0:
            return a, lambda t: _weighted(matmul(t, _constant(b)), weights)
        return b, lambda t: _weighted(matmul(_constant(a), t), weights)

    return build


def _reduction(op):
    def build(rng: SeededRng):
        shape = _shape(rng)
        axis = (None, 0, 1)[int(rng.integers(0, 3))]
        x = rng.normal(shape)
        reduced_shape = np.shape(np.sum(x, axis=axis, keepdims=True))
        weights = rng.normal(reduced_shape)
        return x, lambda t: _weighted(op(t, axis=axis, keepdims=True), weights)

    return build


def _broadcast(rng: SeededRng):
    cols = int(rng.integers(1, 5))
    rows = int(rng.integers(1, 4))
    x = rng.normal((1, cols))
    weights = rng.normal((rows, cols))
    return x, lambda t: _weighted(broadcast_to(t, (rows, cols)), weights)


def _sum_to(rng: SeededRng):
    rows, cols = _shape(rng)
    x = rng.normal((rows, cols))
    weights = rng.normal((1, cols))
    return x, lambda t: _weighted(sum_to(t, (1, cols)), weights)


def _reshape(rng: SeededRng):
    rows, cols = _shape(rng)
    x = rng.normal((rows, cols))
    weights = rng.normal((rows * cols,))
    return x, lambda t: _weighted(reshape(t, (rows * cols,)), weights)


def _transpose(rng: SeededRng):
    rows, cols = _shape(rng)
    x = rng.normal((rows, cols))
    weights = rng.normal((cols, rows))
    return x, lambda t: _weighted(transpose(t), weights)


def _power(rng: SeededRng):
    shape = _shape(rng)
    exponent = (2.0, 3.0, 0.5, -1.0, 1.5)[int(rng.integers(0, 5))]
    x = rng.uniform(0.3, 2.0, shape)
    weights = rng.normal(shape)
    return x, lambda t: _weighted(power(t, exponent), weights)


def _second_order(rng: SeededRng):
    """ d/dx <grad f(x), v>, which differentiates a backward pass recorded with create_graph """
    shape = _shape(rng)
    x = rng.normal(shape)
    direction = rng.normal(shape)

    def inner(t):
        return (tanh(t) * exp(t * 0.5)).sum()

    def f(t):
        point = t if t.requires_grad else Tensor(t.data, requires_grad=True, dtype=np.float64)
        with enable_grad():
            (gradient,) = grad(inner(point), [point], create_graph=True)
        return _weighted(gradient, direction)

    return x, f


def _positive(rng, shape):
    return rng.uniform(0.2, 2.0, shape)


OPS: Dict[str, Callable] = {
    "add.a": _binary(add, 0),
    "add.b": _binary(add, 1, broadcast=True),
    "sub.a": _binary(sub, 0, broadcast=True),
    "sub.b": _binary(sub, 1),
    "mul.a": _binary(mul, 0),
    "mul.b": _binary(mul, 1, broadcast=True),
    "div.a": _binary(div, 0, _away_from_zero),
    "div.b": _binary(div, 1, _away_from_zero, broadcast=True),
    "neg": _unary(neg),
    "power": _power,
    "exp": _unary(exp),
    "log": _unary(log, _positive),
    "tanh": _unary(tanh),
    "sigmoid": _unary(sigmoid),
    "abs": _unary(tabs, _away_from_zero),
    "relu": _unary(relu, _away_from_zero),
    "matmul.a": _matmul(0),
    "matmul.b": _matmul(1),
    "transpose": _transpose,
    "reshape": _reshape,
    "sum": _reduction(tsum),
    "mean": _reduction(mean),
    "broadcast": _broadcast,
    "sum_to": _sum_to,
    "second-order": _second_order,
}


def check_ops(rng: SeededRng, cases: int = DEFAULT_CASES) -> SuiteResult:
    result = SuiteResult("ops")
    names = list(OPS)
    for case in range(max(cases, len(names))):
        name = names[case % len(names)]
        x, f = OPS[name](rng)
        error, _ = check_gradient(f, x)
        _record(result, f"{name}#{case}", error, CORE_TOLERANCE)
    return result


def _small_flow(rng: SeededRng, dim: int) -> FlowModel:
    layers = int(rng.integers(1, 4))
    return FlowModel(dim, num_layers=layers, hidden=int(rng.integers(2, 6)), rng=rng, init_scale=0.3)


def check_flow(rng: SeededRng, cases: int = DEFAULT_CASES) -> SuiteResult:
    """ grad_log_prob of small random flows against differences of log_prob """
    result = SuiteResult("flow")
    for case in range(cases):
        dim = int(rng.integers(2, 7))
        model = _small_flow(rng, dim)
        x = rng.normal((dim,))
        score = model.grad_log_prob(Tensor(x, dtype=np.float64)).numpy()
        numeric = finite_diff_grad(model.log_prob, x, STEP).numpy()
        _record(result, f"{model!r}#{case}", relative_error(score, numeric), CORE_TOLERANCE)
    return result


def _random_params(rng: SeededRng, glyph: str) -> WatermarkParams:
    return WatermarkParams(
        glyph, float(rng.normal(()) * 1.5), float(rng.normal(()) * 1.5), float(rng.uniform(-1.5, 1.5))
    )


def _vector(params: WatermarkParams) -> np.ndarray:
    return np.array([params.raw_left, params.raw_bottom, params.log_scale], dtype=np.float64)


def _from_vector(params: WatermarkParams, vector: Tensor) -> WatermarkParams:
    values = vector.numpy()
    return WatermarkParams(params.glyph, float(values[0]), float(values[1]), float(values[2]), params.latent)


def _leaf_gradient(compute: Callable[[Dict[str, Tensor]], Tensor], generator, params) -> np.ndarray:
    leaves = generator.leaves(params)
    with enable_grad():
        gradients = grad(compute(leaves), list(leaves.values()))
    return np.array([float(g.item()) for g in gradients])


def _smooth_case(result: SuiteResult, draw, value, tolerance):
    """ Draw until the objective is smooth around the drawn point, or give up after MAX_REDRAWS """
    for _ in range(MAX_REDRAWS):
        case = draw()
        if _is_smooth(lambda v: value(case, v), _vector(case[0]), STEP, tolerance):
            return case
        result.redrawn += 1
    return case


def check_render(rng: SeededRng, cases: int = DEFAULT_CASES) -> SuiteResult:
    """ d <m(params), w> / d (raw_left, raw_bottom, log_scale) """
    result = SuiteResult("render")
    atlas = default_atlas()
    characters = atlas.characters
    for case_index in range(cases):
        side = int(rng.integers(6, 13))
        generator = WatermarkGenerator(atlas, side)
        glyph = characters[int(rng.integers(0, len(characters)))]
        weights = rng.normal((side * side,))

        def draw():
            return _random_params(rng, glyph), weights

        def value(case, vector):
            return _weighted(generator.render(_from_vector(case[0], vector)), case[1])

        params, _ = _smooth_case(result, draw, value, CORE_TOLERANCE)
        def weighted_render(leaves):
            return _weighted(generator.render(params, leaves), weights)

        analytic = _leaf_gradient(weighted_render, generator, params)
        numeric = finite_diff_grad(lambda v: value((params, weights), v), _vector(params), STEP).numpy()
        _record(result, f"{glyph}@{side}#{case_index}", relative_error(analytic, numeric), CORE_TOLERANCE)
    return result


def pipeline_loss(harvim: Harvim, params: WatermarkParams, x_prev, x_true, noise, lam: float) -> Tensor:
    """
    The round objective evaluated forward only and exactly: render, mask, observe, K full ascent
    steps, upper loss.
    """
    config = harvim.config
    x_true = _constant(np.asarray(x_true, dtype=np.float64))
    m = harvim.generator.render(params)
    coverage = soft_mask(m, config.alpha, config.beta).coverage
    observation = observe(x_true, coverage, noise)
    x = _constant(np.asarray(x_prev, dtype=np.float64))
    for _ in range(config.inner_steps):
        x = x + objective_gradient(x, observation, coverage, config.sigma, harvim.prior, lam) * config.step_size
    return similarity(x, x_true) + size_regularizer(m) * (config.reg_coeff / m.size)


def _meta_setup(rng: SeededRng, case_index: int) -> Tuple[Harvim, str, float]:
    side = (4, 6, 8)[case_index % 3]
    dim = side * side
    modes = (
        (MetaGradientMode.EXACT_K1, 1),
        (MetaGradientMode.HVP, 2),
        (MetaGradientMode.EXACT_K1, 1),
    )
    mode, steps = modes[case_index % len(modes)]
    prior = identity_flow(dim) if case_index % 2 == 0 else _small_flow(rng, dim)
    sharp = case_index % SHARP_META_EVERY == SHARP_META_EVERY - 1
    beta = MASK_BETA if sharp else 0.05
    config = HarvimConfig(
        inner_steps=steps,
        meta_mode=mode,
        beta=beta,
        sigma=0.1,
        step_size=2e-3,
        lambda_target=1.0,
        reg_coeff=float(rng.uniform(0.0, 0.01)),
    )
    tolerance = SHARP_META_TOLERANCE if sharp else META_TOLERANCE
    harvim = Harvim(prior, WatermarkGenerator(default_atlas(), side), config)
    return harvim, f"{mode.value}/n={dim}/beta={beta}", tolerance


def check_meta(rng: SeededRng, cases: int = DEFAULT_CASES) -> SuiteResult:
    """ meta_grad against differences of the whole round, noise and previous iterate held fixed """
    result = SuiteResult("meta")
    for case_index in range(cases):
        harvim, label, tolerance = _meta_setup(rng, case_index)
        dim = harvim.prior.dim
        glyph = "CHO"[case_index % 3]
        x_true = rng.uniform(0.0, 1.0, (dim,))
        x_prev = np.clip(x_true + rng.normal((dim,), 0.1), 0.0, 1.0)
        noise = rng.normal((dim,), harvim.config.sigma)
        lam = float(rng.uniform(0.0, 1.0))

        def draw():
            return (_random_params(rng, glyph),)

        def value(case, vector):
            return pipeline_loss(harvim, _from_vector(case[0], vector), x_prev, x_true, noise, lam)

        (params,) = _smooth_case(result, draw, value, tolerance)
        gradient, _ = harvim.meta_grad(params, x_prev, x_true, noise, lam)
        analytic = np.array([float(gradient.grads[name]) for name in ("raw_left", "raw_bottom", "log_scale")])
        numeric = finite_diff_grad(lambda v: value((params,), v), _vector(params), STEP).numpy()
        _record(result, f"{label}#{case_index}", relative_error(analytic, numeric), tolerance)
    return result


SUITES: Dict[str, Callable[[SeededRng, int], SuiteResult]] = {
    "ops": check_ops,
    "flow": check_flow,
    "render": check_render,
    "meta": check_meta,
}


def run_suites(
    names: Optional[Sequence[str]] = None, cases: int = DEFAULT_CASES, seed: int = 0, strict: bool = True
) -> List[SuiteResult]:
    """
    Run the named suites (all by default) in 64-bit. With strict, any failing case raises
    GradientCheckException after every suite has run.
    """
    names = list(names or SUITES)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise GradientCheckException(f"unknown gradient suites {unknown}, expected some of {list(SUITES)}")
    results = []
    with precision("float64"), no_grad():
        for index, name in enumerate(names):
            result = SUITES[name](SeededRng(seed, 100 + index), cases)
            _LOGGER.info("%s", result)
            results.append(result)
    failed = [result for result in results if not result.passed]
    if strict and failed:
        details = "; ".join(f"{r.name}: {', '.join(r.failures[:3]) or 'no cases'}" for r in failed)
        raise GradientCheckException(f"gradient check failed: {details}")
    return results
