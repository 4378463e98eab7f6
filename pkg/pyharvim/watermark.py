"""
Watermark generator: glyph atlas, learnable placement parameters, differentiable rendering,
the soft coverage mask and the watermarked observation.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .assets import FONT, GLYPH_HEIGHT, GLYPH_WIDTH, font_bitmap
from .checkpoint import load_checkpoint, save_checkpoint
from .const import MASK_ALPHA, MASK_BETA, MAX_GLYPH_AREA, MIN_GLYPH_AREA
from .exceptions import (
    CheckpointFormatException,
    ConfigException,
    GlyphTooLargeException,
    ShapeMismatchException,
)
from .optim import Adam
from .tensor import SeededRng, Tensor, _constant, as_tensor, enable_grad, get_default_dtype, grad
from .utils import image_side_of, logit, sigmoid

_LOGGER = logging.getLogger(__name__)

DECODER_RECORD = "meta.decoder"
DECODER_GLYPHS_RECORD = "meta.glyphs"


class GlyphAtlas:
    """
    Read-only bitmaps for digits and uppercase letters, GLYPH_HEIGHT x GLYPH_WIDTH each.

    A multi-character identifier such as "NJ" renders as the characters side by side with a
    one-column gap.
    """

    def __init__(self, bitmaps: Dict[str, np.ndarray]):
        for char, bitmap in bitmaps.items():
            if bitmap.min() < 0.0 or bitmap.max() > 1.0:
                raise ConfigException(f"glyph {char!r} has values outside [0, 1]")
            if not np.any(bitmap > 0.5):
                raise ConfigException(f"glyph {char!r} has no ink")
            bitmap.flags.writeable = False
        self._bitmaps = dict(bitmaps)

    @property
    def characters(self) -> str:
        return "".join(sorted(self._bitmaps))

    def bitmap(self, glyph: str) -> np.ndarray:
        if not glyph:
            raise ConfigException("glyph identifier is empty")
        pieces = []
        for index, char in enumerate(glyph.upper()):
            if char not in self._bitmaps:
                raise ConfigException(f"glyph {char!r} is not in the atlas ({self.characters})")
            if index:
                pieces.append(np.zeros((GLYPH_HEIGHT, 1)))
            pieces.append(self._bitmaps[char])
        return np.concatenate(pieces, axis=1)

    def shape(self, glyph: str) -> Tuple[int, int]:
        return self.bitmap(glyph).shape


def default_atlas() -> GlyphAtlas:
    return GlyphAtlas({char: font_bitmap(char) for char in FONT})


@dataclass(frozen=True)
class WatermarkParams:
    glyph: str
    raw_left: float = 0.0
    raw_bottom: float = 0.0
    log_scale: float = 0.0
    latent: Optional[Tuple[float, ...]] = None

    @property
    def p_left(self) -> float:
        return sigmoid(self.raw_left)

    @property
    def p_bottom(self) -> float:
        return sigmoid(self.raw_bottom)

    def with_values(self, values: Dict[str, np.ndarray]) -> "WatermarkParams":
        """ Copy with the learnable fields replaced from a name -> array mapping """
        changes = {name: float(values[name]) for name in ("raw_left", "raw_bottom", "log_scale") if name in values}
        if "latent" in values and self.latent is not None:
            changes["latent"] = tuple(float(v) for v in np.asarray(values["latent"]).ravel())
        return replace(self, **changes)

    def arrays(self) -> Dict[str, np.ndarray]:
        values = {
            "raw_left": np.asarray(self.raw_left, dtype=get_default_dtype()),
            "raw_bottom": np.asarray(self.raw_bottom, dtype=get_default_dtype()),
            "log_scale": np.asarray(self.log_scale, dtype=get_default_dtype()),
        }
        if self.latent is not None:
            values["latent"] = np.asarray(self.latent, dtype=get_default_dtype())
        return values


@dataclass(frozen=True)
class SoftMask:
    coverage: Tensor
    alpha: float
    beta: float


@dataclass(frozen=True)
class ScaleBounds:
    """ Bounds on the rendered glyph height as a fraction of the image side """

    low: float
    high: float

    @property
    def centre(self) -> float:
        return 0.5 * (math.log(self.low) + math.log(self.high))

    @property
    def radius(self) -> float:
        return 0.5 * (math.log(self.high) - math.log(self.low))

    def fraction(self, log_scale: float) -> float:
        if self.radius <= 0.0:
            return self.low
        return math.exp(self.centre + self.radius * math.tanh(log_scale / self.radius))

    def log_scale_for(self, fraction: float) -> float:
        """ Inverse of fraction(); fraction must lie strictly inside the bounds """
        if self.radius <= 0.0:
            return 0.0
        return self.radius * math.atanh((math.log(fraction) - self.centre) / self.radius)


def scale_bounds(glyph_shape: Tuple[int, int]) -> ScaleBounds:
    height, width = glyph_shape
    aspect = height / width
    low = math.sqrt(MIN_GLYPH_AREA * aspect)
    # the glyph must also fit the frame in both directions
    high = min(math.sqrt(MAX_GLYPH_AREA * aspect), 1.0, aspect)
    if low > high:
        raise GlyphTooLargeException(
            f"a {height}x{width} glyph cannot cover {MIN_GLYPH_AREA:.0%} of the image and still fit the frame"
        )
    return ScaleBounds(low, high)


def _hat_weights(positions: np.ndarray, origin: Tensor, scale: Tensor, count: int) -> Tensor:
    """ Bilinear weights relu(1 - |u - b|) between image pixel centres and glyph cells b """
    cells = np.arange(count, dtype=get_default_dtype()).reshape(1, count)
    offsets = (_constant(positions.reshape(-1, 1)) - origin) / scale - 0.5 - cells
    return (1.0 - offsets.abs()).relu()


class DecoderGenerator:
    """
    Fully-connected decoder (z, p_left, p_bottom) -> glyph bitmap with three tanh hidden layers and
    a logistic output. The padding ratios nudge the bitmap by up to half a cell in each direction.
    """

    def __init__(
        self,
        latent_dim: int = 8,
        hidden: int = 64,
        glyph_shape: Tuple[int, int] = (GLYPH_HEIGHT, GLYPH_WIDTH),
        params: Optional[Dict[str, np.ndarray]] = None,
        latents: Optional[Dict[str, np.ndarray]] = None,
        rng: Optional[SeededRng] = None,
    ):
        if latent_dim < 1 or hidden < 1:
            raise ConfigException("decoder needs latent_dim >= 1 and hidden >= 1")
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.glyph_shape = tuple(glyph_shape)
        self.params = params if params is not None else self.init_params(rng or SeededRng(0))
        self.latents = dict(latents or {})

    def init_params(self, rng: SeededRng) -> Dict[str, np.ndarray]:
        outputs = self.glyph_shape[0] * self.glyph_shape[1]
        sizes = [(self.latent_dim + 2, self.hidden), (self.hidden, self.hidden), (self.hidden, self.hidden)]
        params = {}
        for index, (fan_in, fan_out) in enumerate(sizes):
            params[f"w{index}"] = rng.normal((fan_in, fan_out), 1.0 / math.sqrt(fan_in))
            params[f"b{index}"] = np.zeros(fan_out, dtype=get_default_dtype())
        params["w3"] = rng.normal((self.hidden, outputs), 1.0 / math.sqrt(self.hidden))
        params["b3"] = np.zeros(outputs, dtype=get_default_dtype())
        return params

    def tensors(self, trainable: bool = False) -> Dict[str, Tensor]:
        if trainable:
            return {name: Tensor(value, requires_grad=True, name=name) for name, value in self.params.items()}
        return {name: _constant(np.asarray(value, dtype=get_default_dtype())) for name, value in self.params.items()}

    def decode_batch(self, inputs: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """ inputs is (B, latent_dim + 2) of [z, p_left, p_bottom]; returns (B, gh * gw) """
        params = params or self.tensors()
        hidden = inputs
        for index in range(3):
            hidden = (hidden @ params[f"w{index}"] + params[f"b{index}"]).tanh()
        return (hidden @ params["w3"] + params["b3"]).sigmoid()

    def decode(self, latent: Tensor, p_left: Tensor, p_bottom: Tensor) -> Tensor:
        if latent.shape != (self.latent_dim,):
            raise ShapeMismatchException(f"decoder latent must have shape ({self.latent_dim},), got {latent.shape}")
        # assemble [z, p_left, p_bottom] as one row through fixed selector matrices
        eye = np.eye(self.latent_dim + 2, dtype=get_default_dtype())
        row = (
            latent.reshape(1, self.latent_dim) @ _constant(eye[: self.latent_dim])
            + p_left.reshape(1, 1) @ _constant(eye[self.latent_dim:self.latent_dim + 1])
            + p_bottom.reshape(1, 1) @ _constant(eye[self.latent_dim + 1:])
        )
        return self.decode_batch(row).reshape(self.glyph_shape)

    def latent_for(self, glyph: str) -> Tuple[float, ...]:
        if glyph not in self.latents:
            raise ConfigException(f"decoder has no latent code for glyph {glyph!r}")
        return tuple(float(v) for v in self.latents[glyph])

    def to_records(self) -> Dict[str, np.ndarray]:
        glyphs = sorted(self.latents)
        records = {
            DECODER_RECORD: np.array([self.latent_dim, self.hidden, *self.glyph_shape], dtype=np.float32),
            DECODER_GLYPHS_RECORD: np.array([ord(g) for g in glyphs], dtype=np.float32),
        }
        records.update({f"decoder.{name}": value for name, value in self.params.items()})
        records.update({f"latent.{g}": self.latents[g] for g in glyphs})
        return records

    @classmethod
    def from_records(cls, records: Dict[str, np.ndarray]) -> "DecoderGenerator":
        if DECODER_RECORD not in records or DECODER_GLYPHS_RECORD not in records:
            raise CheckpointFormatException("checkpoint has no decoder architecture record")
        latent_dim, hidden, height, width = (int(v) for v in records[DECODER_RECORD].tolist())
        params = {name[len("decoder."):]: value for name, value in records.items() if name.startswith("decoder.")}
        glyphs = [chr(int(code)) for code in records[DECODER_GLYPHS_RECORD].tolist()]
        try:
            latents = {g: records[f"latent.{g}"] for g in glyphs}
        except KeyError as err:
            raise CheckpointFormatException(f"decoder checkpoint lacks latent record {err}")
        decoder = cls(latent_dim, hidden, (height, width), params=params, latents=latents)
        if set(params) != set(decoder.init_params(SeededRng(0))):
            raise CheckpointFormatException("decoder checkpoint parameter names do not match its architecture")
        return decoder


@dataclass(frozen=True)
class DecoderTrainConfig:
    epochs: int = 300
    latent_dim: int = 8
    hidden: int = 64
    learning_rate: float = 1e-2
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0 or self.latent_dim < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ConfigException("decoder training needs epochs >= 0 and positive sizes")
        if self.learning_rate <= 0:
            raise ConfigException("decoder learning rate must be positive")


def shifted_target(bitmap: np.ndarray, p_left: float, p_bottom: float) -> np.ndarray:
    """ Bitmap moved right by (p_left - 0.5) and up by (p_bottom - 0.5) cells, bilinear """
    return np.clip(ndimage.shift(bitmap, (0.5 - p_bottom, p_left - 0.5), order=1, mode="constant"), 0.0, 1.0)


def train_decoder(
    atlas: GlyphAtlas, config: DecoderTrainConfig, rng: SeededRng
) -> Tuple[DecoderGenerator, List[float]]:
    """ Fit decoder weights and one latent code per atlas character jointly on shifted glyphs """
    glyphs = list(atlas.characters)
    decoder = DecoderGenerator(config.latent_dim, config.hidden, rng=rng)
    latents = rng.normal((len(glyphs), config.latent_dim), 0.1)
    optimizer = Adam(config.learning_rate)
    losses = []
    for epoch in range(config.epochs):
        picks = rng.integers(0, len(glyphs), config.batch_size)
        ratios = rng.uniform(0.0, 1.0, (config.batch_size, 2))
        targets = np.stack(
            [shifted_target(atlas.bitmap(glyphs[i]), left, bottom) for i, (left, bottom) in zip(picks, ratios)]
        ).reshape(config.batch_size, -1).astype(get_default_dtype())
        params = decoder.tensors(trainable=True)
        codes = Tensor(latents, requires_grad=True, name="latents")
        selector = np.eye(len(glyphs), dtype=get_default_dtype())[picks]
        with enable_grad():
            chosen = _constant(selector) @ codes
            eye = np.eye(config.latent_dim + 2, dtype=get_default_dtype())
            inputs = chosen @ _constant(eye[: config.latent_dim]) + _constant(ratios @ eye[config.latent_dim:])
            residual = decoder.decode_batch(inputs, params) - targets
            loss = (residual * residual).mean()
            gradients = grad(loss, list(params.values()) + [codes])
        named = {name: g.data for name, g in zip(params.keys(), gradients)}
        named["latents"] = gradients[-1].data
        updated = optimizer.step({**decoder.params, "latents": latents}, named)
        latents = updated.pop("latents")
        decoder.params = updated
        losses.append(loss.item())
        if epoch % 50 == 0:
            _LOGGER.info("Decoder epoch %d: reconstruction MSE %.5f", epoch, losses[-1])
    decoder.latents = {glyph: latents[i].astype(np.float32) for i, glyph in enumerate(glyphs)}
    return decoder, losses


def save_decoder(path, decoder: DecoderGenerator):
    save_checkpoint(path, decoder.to_records())


def load_decoder(path) -> DecoderGenerator:
    return DecoderGenerator.from_records(load_checkpoint(path))


class WatermarkGenerator:
    """
    Renders m from WatermarkParams onto a square image_side x image_side frame.

    The glyph is stretched to side_fraction * image_side pixels tall and stamped by a bilinear warp
    at offset (p_left * (S - width), p_bottom * (S - height)) from the bottom-left corner.
    """

    def __init__(self, atlas: GlyphAtlas, image_side: int, decoder: Optional[DecoderGenerator] = None):
        if image_side < 1:
            raise ConfigException("image side must be positive")
        self.atlas = atlas
        self.image_side = image_side
        self.decoder = decoder

    @property
    def size(self) -> int:
        return self.image_side * self.image_side

    def glyph_shape(self, params: WatermarkParams) -> Tuple[int, int]:
        if params.latent is not None and self.decoder is not None:
            return self.decoder.glyph_shape
        return self.atlas.shape(params.glyph)

    def bounds(self, params: WatermarkParams) -> ScaleBounds:
        return scale_bounds(self.glyph_shape(params))

    def leaves(self, params: WatermarkParams) -> Dict[str, Tensor]:
        """ Fresh differentiable leaves for every learnable field """
        return {name: Tensor(value, requires_grad=True, name=name) for name, value in params.arrays().items()}

    def initial_params(self, glyph: str, p_left: float = 0.5, p_bottom: float = 0.5, log_scale: float = 0.0):
        latent = self.decoder.latent_for(glyph) if self.decoder is not None else None
        return WatermarkParams(glyph, logit(p_left), logit(p_bottom), log_scale, latent)

    def _scale_tensor(self, bounds: ScaleBounds, log_scale: Tensor) -> Tensor:
        if bounds.radius <= 0.0:
            return _constant(np.asarray(bounds.low, dtype=log_scale.dtype)) + log_scale * 0.0
        return (((log_scale / bounds.radius).tanh() * bounds.radius) + bounds.centre).exp()

    def render(self, params: WatermarkParams, leaves: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """ m as a flattened image in [0, 1], differentiable w.r.t. the leaves """
        leaves = leaves or {name: _constant(value) for name, value in params.arrays().items()}
        side = float(self.image_side)
        p_left = leaves["raw_left"].sigmoid()
        p_bottom = leaves["raw_bottom"].sigmoid()
        if params.latent is not None and self.decoder is not None:
            bitmap = self.decoder.decode(leaves["latent"], p_left, p_bottom)
        else:
            bitmap = _constant(self.atlas.bitmap(params.glyph).astype(get_default_dtype()))
        height, width = bitmap.shape
        bounds = scale_bounds((height, width))
        fraction = self._scale_tensor(bounds, leaves["log_scale"])
        scale = fraction * (side / height)
        left = p_left * (side - scale * width)
        bottom = p_bottom * (side - scale * height)
        top = (side - bottom) - scale * height
        centres = np.arange(self.image_side, dtype=get_default_dtype()) + 0.5
        across = _hat_weights(centres, left, scale, width)
        down = _hat_weights(centres, top, scale, height)
        return (down @ bitmap @ across.T).reshape(self.size)

    def placement(self, params: WatermarkParams) -> Dict[str, float]:
        bounds = self.bounds(params)
        fraction = bounds.fraction(params.log_scale)
        return {
            "p_left": params.p_left,
            "p_bottom": params.p_bottom,
            "side_fraction": fraction,
            "scale": fraction * self.image_side / self.glyph_shape(params)[0],
        }


def render(generator: WatermarkGenerator, params: WatermarkParams) -> Tensor:
    return generator.render(params)


def soft_mask(m, alpha: float = MASK_ALPHA, beta: float = MASK_BETA) -> SoftMask:
    """ W = sigmoid((m - alpha) / beta) """
    if beta <= 0:
        raise ConfigException(f"mask sharpness beta must be positive, got {beta}")
    coverage = ((as_tensor(m) - alpha) / beta).sigmoid()
    return SoftMask(coverage, alpha, beta)


def draw_noise(rng: SeededRng, size: int, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ConfigException("noise sigma must be >= 0")
    return rng.normal((size,), sigma)


def observe(x_true, coverage, noise) -> Tensor:
    """ y = (1 - W) * x_T + e """
    x_true, coverage = as_tensor(x_true), as_tensor(coverage)
    if x_true.shape != coverage.shape or np.shape(noise) != x_true.shape:
        raise ShapeMismatchException(
            f"observation shapes differ: image {x_true.shape}, mask {coverage.shape}, noise {np.shape(noise)}"
        )
    return (1.0 - coverage) * x_true + noise


def compose_observation(
    x_true, m, sigma: float, rng: SeededRng, alpha: float = MASK_ALPHA, beta: float = MASK_BETA
) -> Tensor:
    x_true = as_tensor(x_true)
    if as_tensor(m).shape != x_true.shape:
        raise ShapeMismatchException(f"watermark shape {as_tensor(m).shape} differs from image {x_true.shape}")
    coverage = soft_mask(m, alpha, beta).coverage
    return observe(x_true, coverage, draw_noise(rng, x_true.size, sigma).reshape(x_true.shape))


def compose_display(x_true, m, glyph_tone: float, alpha: float = MASK_ALPHA, beta: float = MASK_BETA) -> Tensor:
    """ The human-visible watermarked image: (1 - W) * x_T + W * tone """
    coverage = soft_mask(m, alpha, beta).coverage
    return (1.0 - coverage) * as_tensor(x_true) + coverage * glyph_tone


def size_regularizer(m) -> Tensor:
    """ R(m) = |m|_1, which is the plain sum since m >= 0 """
    return as_tensor(m).sum()


def mask_image(m) -> np.ndarray:
    data = m.numpy() if isinstance(m, Tensor) else np.asarray(m)
    side = image_side_of(data.size)
    return np.clip(data, 0.0, 1.0).reshape(side, side)
