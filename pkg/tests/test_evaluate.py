import os

import numpy as np
import pytest
from pyharvim import (
    ConfigException,
    ContinuationSchedule,
    DivergenceException,
    EmptyCorpusException,
    GauntletConfig,
    HarvimConfig,
    MetricsReport,
    MetricsRow,
    RemoverKind,
    SeededRng,
    ShapeMismatchException,
    StorageException,
    WatermarkGenerator,
    WatermarkParams,
    blind_threshold_inpaint,
    default_atlas,
    detect_tone_mask,
    heat_diffusion_inpaint,
    identity_flow,
    read_report,
    random_placement,
    run_gauntlet,
    run_gauntlet_async,
    summarize,
    toy_corpus,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

SIDE = 16
QUICK_HARVIM = HarvimConfig(rounds=2, mle_steps=5, grid_mle_steps=5)
QUICK_GAUNTLET = GauntletConfig(
    removers=("flow-r", "heat", "blind"), flow_r=ContinuationSchedule(1.0, 2, 3, 1e-3, 5), heat_iterations=50
)


@pytest.fixture
def report():
    return read_report(os.path.join(FIXTURES, "report.csv"))


def gauntlet_inputs():
    return toy_corpus(2, side=SIDE), identity_flow(SIDE * SIDE), WatermarkGenerator(default_atlas(), SIDE)


def test_heat_diffusion_without_mask_returns_the_image():
    image = SeededRng(0).uniform(0.0, 1.0, (64,))
    assert np.array_equal(heat_diffusion_inpaint(image, np.zeros(64)), image.astype(np.float64))


def test_heat_diffusion_fills_a_ramp():
    ramp = np.tile(np.linspace(0.0, 1.0, 8), (8, 1))
    coverage = np.zeros((8, 8))
    coverage[2:6, 3:5] = 1.0
    filled = heat_diffusion_inpaint(ramp.reshape(-1), coverage.reshape(-1), iterations=2000).reshape(8, 8)
    assert np.allclose(filled, ramp, atol=1e-3)
    assert np.allclose(filled[coverage == 0], ramp[coverage == 0], atol=1e-6)


def test_heat_diffusion_fills_a_disk_on_a_ramp():
    rows, cols = np.indices((32, 32))
    ramp = cols / 31.0
    disk = (rows - 16) ** 2 + (cols - 16) ** 2 <= 36
    filled = heat_diffusion_inpaint(ramp.reshape(-1), disk.reshape(-1).astype(float)).reshape(32, 32)
    assert np.abs(filled - ramp).max() <= 0.02


def test_heat_diffusion_of_a_single_pixel_is_its_neighbour_mean():
    image = np.array([[0.0, 0.2, 0.0], [0.4, 0.9, 0.6], [0.0, 0.8, 0.0]])
    coverage = np.zeros((3, 3))
    coverage[1, 1] = 1.0
    filled = heat_diffusion_inpaint(image.reshape(-1), coverage.reshape(-1), iterations=1).reshape(3, 3)
    assert filled[1, 1] == pytest.approx(0.5)
    assert filled[0, 1] == pytest.approx(0.2)


def test_heat_diffusion_of_a_fully_covered_image_is_blank():
    assert not heat_diffusion_inpaint(np.full(16, 0.7), np.ones(16)).any()


def test_heat_diffusion_needs_iterations():
    with pytest.raises(ConfigException):
        heat_diffusion_inpaint(np.zeros(16), np.zeros(16), iterations=0)


def test_tone_detector_keeps_large_components_only():
    display = np.full((12, 12), 0.9)
    display[2:6, 2:6] = 0.3
    display[9, 9] = 0.3
    guessed = detect_tone_mask(display.reshape(-1), 0.3).reshape(12, 12)
    assert guessed[2:6, 2:6].all()
    assert guessed.sum() == 16


def test_tone_detector_without_matches_flags_nothing():
    assert not detect_tone_mask(np.full(16, 0.9), 0.1).any()


def test_blind_remover_repaints_the_tone_region():
    display = np.full((12, 12), 0.8)
    display[3:7, 3:7] = 0.2
    repaired = blind_threshold_inpaint(display.reshape(-1), 0.2, iterations=500)
    assert np.allclose(repaired, 0.8, atol=1e-3)


def test_metrics_row_requires_every_column():
    with pytest.raises(StorageException):
        MetricsRow.from_dict({"image_id": "img000", "arm": "random", "remover": "heat", "psnr": "1"})


def test_summarize():
    assert summarize([1.0, 3.0]).mean == 2.0
    assert summarize([1.0, 3.0]).stderr == pytest.approx(1.0)
    assert summarize([5.0]).stderr == 0.0
    assert summarize([]).count == 0


def test_improvement_and_sign_test(report):
    assert report.removers == ["observation", "heat"]
    assert report.image_ids == ["img000", "img001"]
    assert report.improvement("heat", "psnr") == pytest.approx(4.5)
    assert report.sign_test("heat", "psnr") == pytest.approx(0.25)
    assert report.sign_test("heat", "v_ssim") == 1.0


def test_improvement_skips_unpaired_images(report):
    rows = [row for row in report.rows if not (row["image_id"] == "img001" and row["arm"] == "harvim")]
    partial = MetricsReport(rows)
    assert partial.improvement("heat", "psnr") == pytest.approx(5.0)


def test_table_matches_golden_layout(report):
    with open(os.path.join(FIXTURES, "report-table.txt"), encoding="utf-8") as handle:
        assert report.table() == handle.read()


def test_random_placement_keeps_glyph_and_scale():
    params = WatermarkParams("C", 0.1, -0.2, 0.3)
    moved = random_placement(params, SeededRng(0))
    assert (moved.glyph, moved.log_scale) == ("C", 0.3)
    assert 0.0 < moved.p_left < 1.0 and 0.0 < moved.p_bottom < 1.0
    assert moved == random_placement(params, SeededRng(0))


def test_gauntlet_config_validation():
    with pytest.raises(ConfigException):
        GauntletConfig(workers=0)
    with pytest.raises(ConfigException):
        GauntletConfig(removers=("eraser",))


def test_gauntlet_rejects_an_empty_corpus():
    _, prior, generator = gauntlet_inputs()
    with pytest.raises(EmptyCorpusException):
        run_gauntlet(np.zeros((0, SIDE * SIDE)), prior, QUICK_HARVIM, QUICK_GAUNTLET, generator)


@pytest.mark.asyncio
async def test_gauntlet_pairs_both_arms_for_every_remover():
    images, prior, generator = gauntlet_inputs()
    report = await run_gauntlet_async(images, prior, QUICK_HARVIM, QUICK_GAUNTLET, generator, seed=3)
    assert report.image_ids == ["img000", "img001"]
    assert report.removers == ["observation", "flow-r", "heat", "blind"]
    assert len(report.rows) == 2 * 2 * 4
    for remover in report.removers:
        assert not np.isnan(report.improvement(remover, "psnr"))
    table = report.table()
    assert table.count("\n") == 2 + 2 + 3 * 4


def test_gauntlet_is_deterministic_across_worker_counts():
    images, prior, generator = gauntlet_inputs()
    single = run_gauntlet(images, prior, QUICK_HARVIM, QUICK_GAUNTLET, generator, seed=3)
    pooled = run_gauntlet(
        images, prior, QUICK_HARVIM, GauntletConfig(**{**QUICK_GAUNTLET.__dict__, "workers": 2}), generator, seed=3
    )
    assert [row.get_data() for row in single.rows] == [row.get_data() for row in pooled.rows]


def test_failed_remover_drops_the_cell_for_both_arms(monkeypatch):
    import pyharvim.evaluate

    original = pyharvim.evaluate.apply_remover

    def flaky(kind, protected, *args):
        if kind is RemoverKind.HEAT_DIFFUSION and protected.arm.value == "harvim":
            raise DivergenceException("forced")
        return original(kind, protected, *args)

    monkeypatch.setattr(pyharvim.evaluate, "apply_remover", flaky)
    images, prior, generator = gauntlet_inputs()
    report = run_gauntlet(images[:1], prior, QUICK_HARVIM, QUICK_GAUNTLET, generator)
    assert "heat" not in report.removers
    assert report.removers == ["observation", "flow-r", "blind"]


def test_remover_usage_error_drops_the_cell_without_aborting(monkeypatch):
    import pyharvim.evaluate

    original = pyharvim.evaluate.apply_remover

    def broken(kind, protected, *args):
        if kind is RemoverKind.HEAT_DIFFUSION:
            raise ShapeMismatchException("forced")
        return original(kind, protected, *args)

    monkeypatch.setattr(pyharvim.evaluate, "apply_remover", broken)
    images, prior, generator = gauntlet_inputs()
    report = run_gauntlet(images[:1], prior, QUICK_HARVIM, QUICK_GAUNTLET, generator)
    assert report.removers == ["observation", "flow-r", "blind"]
    assert len(report.rows) == 2 * 3
