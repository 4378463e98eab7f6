import math

import numpy as np
import pytest
from pyharvim import (
    MAX_GLYPH_AREA,
    MIN_GLYPH_AREA,
    ConfigException,
    DecoderGenerator,
    DecoderTrainConfig,
    GlyphAtlas,
    GlyphTooLargeException,
    SeededRng,
    ShapeMismatchException,
    Tensor,
    WatermarkGenerator,
    WatermarkParams,
    compose_display,
    compose_observation,
    default_atlas,
    enable_grad,
    grad,
    load_decoder,
    mask_image,
    observe,
    precision,
    save_decoder,
    scale_bounds,
    size_regularizer,
    soft_mask,
    train_decoder,
)
from pyharvim.gradcheck import check_render


@pytest.fixture
def generator():
    return WatermarkGenerator(default_atlas(), 32)


def test_atlas_covers_digits_and_letters():
    atlas = default_atlas()
    assert atlas.characters == "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    assert atlas.shape("C") == (7, 5)
    assert set(np.unique(atlas.bitmap("C"))) == {0.0, 1.0}


def test_initials_are_joined_with_a_gap():
    atlas = default_atlas()
    bitmap = atlas.bitmap("NJ")
    assert bitmap.shape == (7, 11)
    assert not bitmap[:, 5].any()
    assert np.array_equal(bitmap[:, 6:], atlas.bitmap("J"))
    assert np.array_equal(atlas.bitmap("nj"), bitmap)


def test_unknown_or_empty_glyph_raises():
    with pytest.raises(ConfigException):
        default_atlas().bitmap("?")
    with pytest.raises(ConfigException):
        default_atlas().bitmap("")


def test_atlas_rejects_blank_and_out_of_range_bitmaps():
    with pytest.raises(ConfigException):
        GlyphAtlas({"A": np.zeros((7, 5))})
    with pytest.raises(ConfigException):
        GlyphAtlas({"A": np.full((7, 5), 2.0)})


def test_scale_bounds_keep_glyph_area_within_limits():
    bounds = scale_bounds((7, 5))
    aspect = 7 / 5
    for log_scale in np.linspace(-20.0, 20.0, 41):
        area = bounds.fraction(log_scale) ** 2 / aspect
        assert MIN_GLYPH_AREA - 1e-12 <= area <= MAX_GLYPH_AREA + 1e-12
    assert bounds.fraction(0.0) == pytest.approx(math.sqrt(bounds.low * bounds.high))


def test_log_scale_for_inverts_fraction():
    bounds = scale_bounds((7, 5))
    assert bounds.fraction(bounds.log_scale_for(0.5)) == pytest.approx(0.5)


def test_wide_initials_fit_while_too_many_characters_do_not():
    assert scale_bounds(default_atlas().shape("ABCDEFG")).high <= 7 / 41
    with pytest.raises(GlyphTooLargeException):
        scale_bounds(default_atlas().shape("A" * 30))


def test_render_shape_range_and_mass(generator):
    params = generator.initial_params("C", 0.5, 0.5, 0.0)
    m = generator.render(params).numpy()
    assert m.shape == (32 * 32,)
    assert m.min() >= 0.0 and m.max() <= 1.0 + 1e-6
    scale = generator.placement(params)["scale"]
    ink = default_atlas().bitmap("C").sum()
    assert m.sum() == pytest.approx(ink * scale ** 2, rel=0.1)


def test_placement_ratios_move_the_glyph(generator):
    def column_of_mass(p_left):
        m = mask_image(generator.render(generator.initial_params("H", p_left, 0.5)))
        return (m.sum(axis=0) * np.arange(32)).sum() / m.sum()

    assert column_of_mass(0.1) < column_of_mass(0.5) < column_of_mass(0.9)


def test_bottom_ratio_measures_from_the_bottom(generator):
    low = mask_image(generator.render(generator.initial_params("H", 0.5, 0.05)))
    rows = np.nonzero(low.sum(axis=1))[0]
    assert rows.max() == 31


def test_placement_reports_squashed_values(generator):
    params = WatermarkParams("C", 0.0, 2.0, 0.0)
    placement = generator.placement(params)
    assert placement["p_left"] == pytest.approx(0.5)
    assert placement["p_bottom"] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)))


def test_render_is_differentiable_in_every_field(generator):
    params = generator.initial_params("C", 0.3, 0.6, 0.2)
    leaves = generator.leaves(params)
    weights = Tensor(SeededRng(0).normal((32 * 32,)))
    with enable_grad():
        gradients = grad((generator.render(params, leaves) * weights).sum(), list(leaves.values()))
    assert all(abs(g.item()) > 0.0 for g in gradients)


def test_render_oracle_suite():
    with precision("float64"):
        result = check_render(SeededRng(0), cases=100)
    assert result.passed, result.failures


def test_soft_mask_midpoint_and_validation():
    coverage = soft_mask(np.array([0.15, 1.0, 0.0]), 0.15, 0.01).coverage.numpy()
    assert coverage[0] == pytest.approx(0.5)
    assert coverage[1] == pytest.approx(1.0)
    assert coverage[2] == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ConfigException):
        soft_mask(np.zeros(3), 0.15, 0.0)


def test_observe_without_mask_or_noise_is_the_image():
    x = np.linspace(0.0, 1.0, 16)
    assert np.allclose(observe(x, np.zeros(16), np.zeros(16)).numpy(), x)


def test_observe_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchException):
        observe(np.zeros(16), np.zeros(9), np.zeros(16))


def test_compose_observation_is_seeded(generator):
    x = np.full(32 * 32, 0.5)
    m = generator.render(generator.initial_params("C"))
    first = compose_observation(x, m, 0.05, SeededRng(3)).numpy()
    second = compose_observation(x, m, 0.05, SeededRng(3)).numpy()
    assert np.array_equal(first, second)


def test_observation_noise_has_the_requested_spread():
    x = SeededRng(0).uniform(0.0, 1.0, (1024,))
    y = compose_observation(x, np.zeros(1024), 0.05, SeededRng(1)).numpy()
    assert np.std(y - x) == pytest.approx(0.05, rel=0.1)


def test_fully_masked_noiseless_observation_is_blank():
    x = SeededRng(0).uniform(0.0, 1.0, (64,))
    assert np.allclose(compose_observation(x, np.ones(64), 0.0, SeededRng(1)).numpy(), 0.0, atol=1e-6)


def test_display_paints_the_glyph_tone():
    display = compose_display(np.zeros(4), np.array([1.0, 1.0, 0.0, 0.0]), 0.7).numpy()
    assert np.allclose(display, [0.7, 0.7, 0.0, 0.0], atol=1e-6)


def test_size_regularizer_is_l1():
    assert size_regularizer(np.array([0.0, 0.25, 1.0])).item() == pytest.approx(1.25)


def test_decoder_output_shape_and_range():
    decoder = DecoderGenerator(latent_dim=4, hidden=8, rng=SeededRng(0))
    bitmap = decoder.decode(Tensor(np.zeros(4)), Tensor(0.5), Tensor(0.5)).numpy()
    assert bitmap.shape == (7, 5)
    assert bitmap.min() > 0.0 and bitmap.max() < 1.0


def test_decoder_training_reduces_reconstruction_error(tmp_path):
    config = DecoderTrainConfig(epochs=60, latent_dim=4, hidden=16, batch_size=16)
    decoder, losses = train_decoder(default_atlas(), config, SeededRng(0))
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert set(decoder.latents) == set(default_atlas().characters)

    path = tmp_path / "decoder.hvmf"
    save_decoder(path, decoder)
    loaded = load_decoder(path)
    assert loaded.latent_for("C") == decoder.latent_for("C")


def test_decoder_generator_learns_through_the_latent():
    decoder = DecoderGenerator(latent_dim=4, hidden=8, rng=SeededRng(0), latents={"C": np.full(4, 0.1)})
    generator = WatermarkGenerator(default_atlas(), 16, decoder)
    params = generator.initial_params("C")
    assert params.latent == pytest.approx((0.1,) * 4)
    leaves = generator.leaves(params)
    with enable_grad():
        (latent_grad,) = grad(generator.render(params, leaves).sum(), [leaves["latent"]])
    assert np.any(latent_grad.numpy() != 0.0)


def test_decoder_without_latent_for_glyph_raises():
    with pytest.raises(ConfigException):
        DecoderGenerator(latent_dim=2, hidden=2).latent_for("Q")
