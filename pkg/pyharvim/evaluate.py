"""
Removal gauntlet: protect each image with a learned and a randomly placed watermark, attack both
with every remover, and report reconstruction metrics paired by image.
"""
import asyncio
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.stats import binomtest

from .const import OBSERVATION, RemoverKind, WatermarkArm
from .exceptions import (
    ConfigException,
    EmptyCorpusException,
    NumericalFailureException,
    StorageException,
    UsageException,
)
from .flow import FlowModel
from .harvim import Harvim, HarvimConfig
from .metrics import psnr, ssim, v_metric
from .solver import ContinuationSchedule, flow_r_remove
from .tensor import SeededRng, as_tensor, no_grad
from .utils import BaseDict, image_side_of, logit
from .watermark import WatermarkGenerator, WatermarkParams, compose_display, draw_noise, observe, soft_mask

_LOGGER = logging.getLogger(__name__)

REPORT_FIELDS = ("image_id", "arm", "remover", "psnr", "ssim", "v_psnr", "v_ssim")
TABLE_METRICS = ("v_psnr", "v_ssim", "psnr", "ssim")
ARMS = (WatermarkArm.RANDOM, WatermarkArm.HARVIM)


def _square(values) -> np.ndarray:
    data = as_tensor(values).numpy().astype(np.float64)
    side = image_side_of(data.size)
    return data.reshape(side, side)


def heat_diffusion_inpaint(observation, coverage, iterations: int = 2000) -> np.ndarray:
    """
    Replace pixels with W > 0.5 by Jacobi iterations of the 4-neighbour average over in-frame
    neighbours; observed pixels are never touched.
    """
    if iterations < 1:
        raise ConfigException("heat diffusion needs at least one iteration")
    image = _square(observation)
    masked = _square(coverage) > 0.5
    result = image.copy()
    if not masked.any():
        return result.reshape(-1)
    if masked.all():
        return np.zeros_like(result).reshape(-1)
    result[masked] = image[~masked].mean()
    kernel = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    neighbours = ndimage.convolve(np.ones_like(image), kernel, mode="constant", cval=0.0)
    for _ in range(iterations):
        average = ndimage.convolve(result, kernel, mode="constant", cval=0.0) / neighbours
        result[masked] = average[masked]
    return result.reshape(-1)


def detect_tone_mask(display, glyph_tone: float, tolerance: float = 0.05, min_component: int = 8) -> np.ndarray:
    """ Pixels within tolerance of the glyph tone that sit in connected components larger than min_component """
    image = _square(display)
    candidates = np.abs(image - glyph_tone) <= tolerance
    labels, count = ndimage.label(candidates)
    if count == 0:
        return np.zeros(image.size)
    sizes = np.bincount(labels.ravel())
    keep = sizes > min_component
    keep[0] = False
    return keep[labels].astype(np.float64).reshape(-1)


def blind_threshold_inpaint(
    display, glyph_tone: float, tolerance: float = 0.05, min_component: int = 8, iterations: int = 2000
) -> np.ndarray:
    """ Mask-free remover: guess the watermark from the glyph tone, then heat-diffuse it away """
    guessed = detect_tone_mask(display, glyph_tone, tolerance, min_component)
    _LOGGER.debug("Blind detector flagged %d pixels", int(guessed.sum()))
    return heat_diffusion_inpaint(display, guessed, iterations)


class MetricsRow(BaseDict):
    def __init__(self, image_id: str, arm: str, remover: str, psnr: float, ssim: float, v_psnr: float, v_ssim: float):
        super().__init__(
            OrderedDict(
                image_id=image_id, arm=arm, remover=remover, psnr=psnr, ssim=ssim, v_psnr=v_psnr, v_ssim=v_ssim
            )
        )

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> "MetricsRow":
        missing = [name for name in REPORT_FIELDS if name not in values]
        if missing:
            raise StorageException(f"report row lacks columns {missing}")
        return cls(
            values["image_id"],
            values["arm"],
            values["remover"],
            *(float(values[name]) for name in ("psnr", "ssim", "v_psnr", "v_ssim")),
        )


@dataclass
class CellSummary:
    mean: float
    stderr: float
    count: int


def summarize(values: Sequence[float]) -> CellSummary:
    """ Mean and standard error (sample std / sqrt(count)); a single value has zero error """
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return CellSummary(float("nan"), float("nan"), 0)
    stderr = float(data.std(ddof=1) / math.sqrt(data.size)) if data.size > 1 else 0.0
    return CellSummary(float(data.mean()), stderr, int(data.size))


@dataclass
class MetricsReport:
    rows: List[MetricsRow] = field(default_factory=list)

    @property
    def removers(self) -> List[str]:
        return list(OrderedDict.fromkeys(row["remover"] for row in self.rows))

    @property
    def image_ids(self) -> List[str]:
        return list(OrderedDict.fromkeys(row["image_id"] for row in self.rows))

    def values(self, arm: str, remover: str, metric: str) -> Dict[str, float]:
        return {row["image_id"]: row[metric] for row in self.rows if row["arm"] == arm and row["remover"] == remover}

    def _paired(self, remover: str, metric: str) -> Tuple[np.ndarray, np.ndarray]:
        random_values = self.values(WatermarkArm.RANDOM.value, remover, metric)
        learned_values = self.values(WatermarkArm.HARVIM.value, remover, metric)
        shared = [image for image in random_values if image in learned_values]
        return (
            np.array([random_values[i] for i in shared], dtype=np.float64),
            np.array([learned_values[i] for i in shared], dtype=np.float64),
        )

    def summary(self, arm: str, remover: str, metric: str) -> CellSummary:
        return summarize(list(self.values(arm, remover, metric).values()))

    def improvement(self, remover: str, metric: str) -> float:
        """ Paired Imp = mean(random) - mean(harvim) over images present in both arms """
        random_values, learned_values = self._paired(remover, metric)
        if random_values.size == 0:
            return float("nan")
        return float(random_values.mean() - learned_values.mean())

    def sign_test(self, remover: str, metric: str) -> float:
        """ One-sided paired sign test that the random arm scores higher; ties are dropped """
        random_values, learned_values = self._paired(remover, metric)
        wins = int(np.sum(random_values > learned_values))
        trials = int(np.sum(random_values != learned_values))
        if trials == 0:
            return 1.0
        return float(binomtest(wins, trials, 0.5, alternative="greater").pvalue)

    def table(self) -> str:
        """ Plain-text Random / HARVIM / Imp layout, one line per remover and metric """
        header = f"{'remover':<12}{'metric':<8}{'Random':>18}{'HARVIM':>18}{'Imp':>9}{'p':>9}"
        lines = [header, "-" * len(header)]
        for remover in self.removers:
            for metric in TABLE_METRICS:
                if remover == OBSERVATION and metric.startswith("v_"):
                    continue
                random_cell = self.summary(WatermarkArm.RANDOM.value, remover, metric)
                learned_cell = self.summary(WatermarkArm.HARVIM.value, remover, metric)
                lines.append(
                    f"{remover:<12}{metric:<8}"
                    f"{_format_cell(random_cell):>18}{_format_cell(learned_cell):>18}"
                    f"{self.improvement(remover, metric):>9.3f}{self.sign_test(remover, metric):>9.4f}"
                )
        return "\n".join(lines) + "\n"


def _format_cell(cell: CellSummary) -> str:
    return f"{cell.mean:.3f} ± {cell.stderr:.3f}"


@dataclass(frozen=True)
class GauntletConfig:
    glyph: str = "C"
    removers: Tuple[RemoverKind, ...] = (RemoverKind.FLOW_R, RemoverKind.HEAT_DIFFUSION, RemoverKind.BLIND_THRESHOLD)
    flow_r: ContinuationSchedule = ContinuationSchedule(1.0, 20, 25, 2e-3, 50)
    flow_r_init_scale: float = 0.1
    binarize_mask: bool = False
    heat_iterations: int = 2000
    blind_tolerance: float = 0.05
    blind_min_component: int = 8
    workers: int = 1

    def __post_init__(self):
        try:
            object.__setattr__(self, "removers", tuple(RemoverKind(kind) for kind in self.removers))
        except ValueError as err:
            raise ConfigException(f"unknown remover: {err}") from err
        if self.heat_iterations < 1 or self.blind_min_component < 0 or self.workers < 1:
            raise ConfigException("heat iterations and workers must be >= 1, min component >= 0")
        if self.blind_tolerance < 0 or self.flow_r_init_scale < 0:
            raise ConfigException("blind tolerance and Flow-R init scale must be >= 0")


@dataclass
class ProtectedImage:
    """ One arm of one image: what the removers get to see """

    arm: WatermarkArm
    params: WatermarkParams
    observation: np.ndarray
    coverage: np.ndarray
    display: np.ndarray


def apply_remover(
    kind: RemoverKind,
    protected: ProtectedImage,
    prior: FlowModel,
    sigma: float,
    tone: float,
    config: GauntletConfig,
    rng: SeededRng,
) -> Tuple[np.ndarray, np.ndarray]:
    """ Returns (reconstruction, the image the remover was given) """
    if kind is RemoverKind.FLOW_R:
        states = flow_r_remove(
            protected.observation,
            protected.coverage,
            prior,
            config.flow_r,
            rng,
            sigma,
            binarize_mask=config.binarize_mask,
            init_scale=config.flow_r_init_scale,
        )
        return states[-1].x, protected.observation
    if kind is RemoverKind.HEAT_DIFFUSION:
        reconstruction = heat_diffusion_inpaint(protected.observation, protected.coverage, config.heat_iterations)
        return reconstruction, protected.observation
    reconstruction = blind_threshold_inpaint(
        protected.display, tone, config.blind_tolerance, config.blind_min_component, config.heat_iterations
    )
    return reconstruction, protected.display


def protect_image(generator, params, x_true, noise, harvim_config: HarvimConfig, tone: float, arm) -> ProtectedImage:
    with no_grad():
        m = generator.render(params)
        coverage = soft_mask(m, harvim_config.alpha, harvim_config.beta).coverage
        observation = observe(x_true, coverage, noise)
        display = compose_display(x_true, m, tone, harvim_config.alpha, harvim_config.beta)
    return ProtectedImage(arm, params, observation.numpy(), coverage.numpy(), display.numpy())


def random_placement(params: WatermarkParams, rng: SeededRng) -> WatermarkParams:
    """ Same glyph, scale and latent; padding ratios uniform on [0, 1] """
    p_left, p_bottom = (float(np.clip(rng.uniform(), 1e-3, 1.0 - 1e-3)) for _ in range(2))
    return WatermarkParams(params.glyph, logit(p_left), logit(p_bottom), params.log_scale, params.latent)


def evaluate_image(
    image_id: str,
    x_true,
    prior: FlowModel,
    generator: WatermarkGenerator,
    harvim_config: HarvimConfig,
    config: GauntletConfig,
    rng: SeededRng,
) -> List[MetricsRow]:
    """ Protect one image with both arms and run every remover; cells are kept only when both arms succeed """
    x_true = as_tensor(x_true)
    learned = Harvim(prior, generator, harvim_config).run(x_true, config.glyph, rng.spawn(0))
    tone = float(x_true.numpy().mean()) if harvim_config.glyph_tone is None else harvim_config.glyph_tone
    noise = draw_noise(rng.spawn(1), x_true.size, harvim_config.sigma)
    placed = {WatermarkArm.RANDOM: random_placement(learned.params, rng.spawn(2)), WatermarkArm.HARVIM: learned.params}
    arms = {arm: protect_image(generator, placed[arm], x_true, noise, harvim_config, tone, arm) for arm in ARMS}

    rows = []
    for arm in ARMS:
        observation = arms[arm].observation
        rows.append(
            MetricsRow(image_id, arm.value, OBSERVATION, psnr(observation, x_true), ssim(observation, x_true), 0.0, 0.0)
        )
    for index, kind in enumerate(config.removers):
        cells = {}
        for arm_index, arm in enumerate(ARMS):
            try:
                reconstruction, given = apply_remover(
                    kind, arms[arm], prior, harvim_config.sigma, tone, config, rng.spawn(10 + 2 * index + arm_index)
                )
            except (NumericalFailureException, UsageException, ValueError) as err:
                _LOGGER.warning("Remover %s failed on %s (%s arm): %s", kind.value, image_id, arm.value, err)
                break
            cells[arm] = MetricsRow(
                image_id,
                arm.value,
                kind.value,
                psnr(reconstruction, x_true),
                ssim(reconstruction, x_true),
                v_metric(reconstruction, given, x_true, psnr),
                v_metric(reconstruction, given, x_true, ssim),
            )
        if len(cells) == len(ARMS):
            rows.extend(cells[arm] for arm in ARMS)
    _LOGGER.info("Gauntlet finished image %s", image_id)
    return rows


def _validate_images(images) -> np.ndarray:
    data = np.asarray(images)
    if data.ndim < 2 or len(data) == 0:
        raise EmptyCorpusException("the gauntlet needs at least one image")
    return data.reshape(len(data), -1)


async def run_gauntlet_async(
    images,
    prior: FlowModel,
    harvim_config: HarvimConfig,
    config: GauntletConfig,
    generator: WatermarkGenerator,
    seed: int = 0,
    image_ids: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """ Per-image jobs on a thread pool with seeds derived from (seed, image index) """
    data = _validate_images(images)
    ids = list(image_ids) if image_ids is not None else [f"img{index:03d}" for index in range(len(data))]
    master = SeededRng(seed)
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        jobs = [
            loop.run_in_executor(
                pool,
                partial(evaluate_image, ids[index], data[index], prior, generator, harvim_config, config),
                master.spawn(index),
            )
            for index in range(len(data))
        ]
        results = await asyncio.gather(*jobs)
    return MetricsReport([row for rows in results for row in rows])


def run_gauntlet(
    images,
    prior: FlowModel,
    harvim_config: HarvimConfig,
    config: GauntletConfig,
    generator: WatermarkGenerator,
    seed: int = 0,
    image_ids: Optional[Sequence[str]] = None,
) -> MetricsReport:
    return asyncio.run(run_gauntlet_async(images, prior, harvim_config, config, generator, seed, image_ids))
