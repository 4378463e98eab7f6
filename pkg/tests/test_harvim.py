import math
from dataclasses import replace

import numpy as np
import pytest
from pyharvim import (
    AUDIT_FIELDS,
    AdamW,
    ConfigException,
    Harvim,
    HarvimConfig,
    MASK_BETA,
    MetaGradientMode,
    SeededRng,
    ShapeMismatchException,
    WatermarkGenerator,
    default_atlas,
    finite_diff_grad,
    half_textured_image,
    identity_flow,
    precision,
    relative_error,
    similarity,
    toy_corpus,
    upper_loss,
)
from pyharvim.gradcheck import SHARP_META_TOLERANCE, check_meta, pipeline_loss

FIELDS = ("raw_left", "raw_bottom", "log_scale")


def make_harvim(side: int, **overrides) -> Harvim:
    config = HarvimConfig(**{"rounds": 3, "mle_steps": 5, "grid_mle_steps": 5, **overrides})
    return Harvim(identity_flow(side * side), WatermarkGenerator(default_atlas(), side), config)


def round_inputs(side: int, seed: int = 0):
    rng = SeededRng(seed)
    x_true = rng.uniform(0.0, 1.0, (side * side,)).astype(np.float64)
    x_prev = np.clip(x_true + rng.normal((side * side,), 0.1), 0.0, 1.0)
    noise = rng.normal((side * side,), 0.1).astype(np.float64)
    return x_prev, x_true, noise


def numeric_gradient(harvim, params, x_prev, x_true, noise, lam):
    def loss(vector):
        values = vector.numpy()
        moved = replace(params, **{name: float(values[i]) for i, name in enumerate(FIELDS)})
        return pipeline_loss(harvim, moved, x_prev, x_true, noise, lam)

    start = np.array([getattr(params, name) for name in FIELDS])
    return finite_diff_grad(loss, start, 1e-5).numpy()


def analytic_gradient(harvim, params, x_prev, x_true, noise, lam):
    gradient, _ = harvim.meta_grad(params, x_prev, x_true, noise, lam)
    return np.array([float(gradient.grads[name]) for name in FIELDS])


def test_config_validation():
    with pytest.raises(ConfigException):
        HarvimConfig(rounds=-1)
    with pytest.raises(ConfigException):
        HarvimConfig(inner_steps=0, meta_mode="hvp")
    with pytest.raises(ConfigException):
        HarvimConfig(inner_steps=2)
    with pytest.raises(ConfigException):
        HarvimConfig(glyph_tone=1.5)
    assert HarvimConfig(inner_steps=3, meta_mode="hvp").meta_mode is MetaGradientMode.HVP


def test_generator_and_prior_sizes_must_agree():
    with pytest.raises(ShapeMismatchException):
        Harvim(identity_flow(10), WatermarkGenerator(default_atlas(), 8), HarvimConfig())


def test_similarity_is_psnr_in_decibels():
    x_true = np.zeros(16)
    assert similarity(np.full(16, math.sqrt(1e-3)), x_true).item() == pytest.approx(30.0, rel=1e-5)
    assert similarity(x_true, x_true).item() == 99.0


def test_upper_loss_is_linear_in_the_regularizer_coefficient():
    x, x_true = np.full(16, 0.2), np.full(16, 0.3)
    m = np.linspace(0.0, 1.0, 16)
    base = upper_loss(x, x_true, m, 0.0).item()
    assert upper_loss(x, x_true, m, 2.0).item() - base == pytest.approx(2.0 * m.sum() / 16, rel=1e-5)


def test_meta_gradient_oracle_suite():
    with precision("float64"):
        result = check_meta(SeededRng(0), cases=6)
    assert result.passed, result.failures


def test_hvp_meta_gradient_is_exact_for_two_inner_steps():
    with precision("float64"):
        harvim = make_harvim(6, inner_steps=2, meta_mode="hvp", beta=0.05, sigma=0.1, step_size=2e-3)
        params = harvim.generator.initial_params("C", 0.3, 0.6, 0.2)
        inputs = round_inputs(6) + (0.5,)
        analytic = analytic_gradient(harvim, params, *inputs)
        numeric = numeric_gradient(harvim, params, *inputs)
    assert relative_error(analytic, numeric) < 1e-3


def test_meta_gradient_with_the_default_sharp_mask():
    with precision("float64"):
        harvim = make_harvim(6, beta=MASK_BETA, sigma=0.1, step_size=2e-3)
        params = harvim.generator.initial_params("C", 0.3, 0.6, 0.2)
        inputs = round_inputs(6, seed=2) + (0.5,)
        analytic = analytic_gradient(harvim, params, *inputs)
        numeric = numeric_gradient(harvim, params, *inputs)
    assert relative_error(analytic, numeric) < SHARP_META_TOLERANCE


def test_first_order_meta_gradient_points_the_same_way():
    with precision("float64"):
        exact = make_harvim(6, inner_steps=2, meta_mode="hvp", beta=0.05, sigma=0.1, step_size=2e-3)
        first_order = replace(exact.config, meta_mode=MetaGradientMode.FIRST_ORDER)
        approximate = Harvim(exact.prior, exact.generator, first_order)
        params = exact.generator.initial_params("C", 0.3, 0.6, 0.2)
        inputs = round_inputs(6, seed=1) + (0.5,)
        reference = analytic_gradient(exact, params, *inputs)
        estimate = analytic_gradient(approximate, params, *inputs)
    assert np.dot(reference, estimate) > 0.0
    assert not np.allclose(reference, estimate)


def test_regularizer_pushes_the_scale_down():
    with precision("float64"):
        plain = make_harvim(8, reg_coeff=0.0)
        penalized = Harvim(plain.prior, plain.generator, replace(plain.config, reg_coeff=5.0))
        params = plain.generator.initial_params("C")
        inputs = round_inputs(8) + (1.0,)
        gap = analytic_gradient(penalized, params, *inputs) - analytic_gradient(plain, params, *inputs)
    assert gap[2] > 0.0


def test_stronger_regularizer_learns_a_smaller_watermark():
    image = toy_corpus(1, side=8)[0]
    plain = make_harvim(8, reg_coeff=0.01)
    penalized = Harvim(plain.prior, plain.generator, replace(plain.config, reg_coeff=100 * plain.config.reg_coeff))
    light = plain.run(image, "C", SeededRng(2))
    heavy = penalized.run(image, "C", SeededRng(2))
    assert heavy.m.sum() < light.m.sum()


def textured_right_half(side: int) -> np.ndarray:
    image = np.full((side, side), 0.5)
    checker = (np.indices((side, side // 2)).sum(axis=0) % 2) * 0.8 - 0.4
    image[:, side // 2:] += checker
    return image.reshape(-1)


def test_grid_init_picks_the_textured_half():
    harvim = make_harvim(16)
    grid = harvim.grid_init(textured_right_half(16), "C", SeededRng(0))
    assert len(grid.scores) == 9
    assert grid.mle_steps == 9 * harvim.config.grid_mle_steps
    assert grid.params.p_left == pytest.approx(0.99)
    best = min(grid.scores, key=lambda score: score[2])
    assert best[0] == 1.0


TEXTURED_CORNERS = {"left": (0, 0.0), "right": (0, 1.0), "bottom": (1, 0.0), "top": (1, 1.0)}


@pytest.mark.parametrize("seed", range(10))
def test_grid_init_lands_in_the_textured_half(seed):
    textured = list(TEXTURED_CORNERS)[seed % 4]
    image = half_textured_image(16, SeededRng(seed, 1), textured)
    grid = make_harvim(16).grid_init(image, "C", SeededRng(seed))
    best = min(grid.scores, key=lambda score: score[2])
    axis, ratio = TEXTURED_CORNERS[textured]
    assert best[axis] == ratio
    assert (grid.params.p_left, grid.params.p_bottom)[axis] == pytest.approx(min(max(ratio, 0.01), 0.99))


def test_run_without_rounds_returns_the_grid_choice():
    harvim = make_harvim(8, rounds=0)
    result = harvim.run(toy_corpus(1, side=8)[0], "C", SeededRng(0))
    assert result.params == result.grid.params
    assert result.audit == []
    assert result.display.shape == (64,)


def test_run_records_one_audit_row_per_round():
    harvim = make_harvim(8)
    result = harvim.run(toy_corpus(1, side=8)[0], "C", SeededRng(0))
    assert [row["lambda"] for row in result.audit] == pytest.approx([1 / 3, 2 / 3, 1.0])
    assert all(set(row) == set(AUDIT_FIELDS) for row in result.audit)
    placement = harvim.generator.placement(result.params)
    assert 0.0 <= placement["p_left"] <= 1.0
    assert 0.0 <= placement["p_bottom"] <= 1.0
    assert result.state.round == 3
    assert result.m.min() >= 0.0 and result.m.max() <= 1.0 + 1e-6


def test_run_is_deterministic_for_a_seed():
    image = toy_corpus(1, side=8)[0]
    first = make_harvim(8).run(image, "C", SeededRng(4))
    second = make_harvim(8).run(image, "C", SeededRng(4))
    assert first.params == second.params
    assert np.array_equal(first.display, second.display)


def test_run_rejects_wrong_image_size():
    with pytest.raises(ShapeMismatchException):
        make_harvim(8).run(np.zeros(10), "C")


@pytest.mark.slow
def test_one_optimizer_step_lowers_the_round_loss_on_most_images():
    images = toy_corpus(6, side=16)
    lowered = 0
    with precision("float64"):
        harvim = make_harvim(16)
        for index, image in enumerate(images):
            params = harvim.generator.initial_params("C", 0.3, 0.4)
            x_prev = np.full(image.size, image.mean())
            noise = SeededRng(index).normal((image.size,), harvim.config.sigma).astype(np.float64)
            gradient, outcome = harvim.meta_grad(params, x_prev, image, noise, 0.5)
            updated = AdamW(1e-3, weight_decay=0.0).step(params.arrays(), gradient.grads)
            after = pipeline_loss(harvim, params.with_values(updated), x_prev, image, noise, 0.5).item()
            lowered += after < outcome.upper_loss
    assert lowered >= 5
