"""
Affine coupling flow used as the generative prior.

Each coupling layer keeps the coordinates selected by its binary mask and transforms the rest:

    z = x * b + (1 - b) * (x * exp(s(x * b)) + t(x * b))

with s = clamp * tanh(.) so exp never overflows. log|det J| of a layer is the sum of s.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import (
    CheckpointFormatException,
    ConfigException,
    EmptyCorpusException,
    ShapeMismatchException,
)
from .optim import Adam
from .tensor import SeededRng, Tensor, _constant, as_tensor, enable_grad, get_default_dtype, grad, no_grad

_LOGGER = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
ARCHITECTURE_RECORD = "meta.architecture"


def checkerboard_mask(dim: int, parity: int) -> np.ndarray:
    """ Checkerboard over the square image the pixels form, alternating coordinates otherwise """
    side = math.isqrt(dim)
    index = np.arange(dim)
    if side * side == dim and side > 1:
        rows, cols = np.divmod(index, side)
        pattern = (rows + cols) % 2
    else:
        pattern = index % 2
    return (pattern == parity).astype(np.float64)


def half_mask(dim: int, parity: int) -> np.ndarray:
    first = np.arange(dim) < dim // 2
    return (first if parity == 0 else ~first).astype(np.float64)


def partition_mask(dim: int, layer: int) -> np.ndarray:
    """ Layers cycle checkerboard, checkerboard', half, half' """
    if dim < 2:
        raise ConfigException(f"a coupling layer needs at least 2 coordinates, got {dim}")
    parity = layer % 2
    if (layer // 2) % 2 == 0:
        return checkerboard_mask(dim, parity)
    return half_mask(dim, parity)


@dataclass(frozen=True)
class PriorTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    corpus_path: Optional[str] = None
    validation_fraction: float = 0.1
    dequantization: float = 1.0 / 256.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigException("prior epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigException("prior batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigException("prior learning rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigException("validation fraction must lie in [0, 1)")
        if self.dequantization < 0:
            raise ConfigException("dequantization amplitude must be >= 0")


@dataclass
class CouplingLayer:
    mask: np.ndarray
    prefix: str
    scale_clamp: float = 2.0

    def __post_init__(self):
        kept = int(self.mask.sum())
        if kept == 0 or kept == self.mask.size:
            raise ConfigException(f"{self.prefix}: partition mask must split coordinates into two non-empty sets")

    def _network(self, params: Dict[str, Tensor], kind: str, inputs: Tensor) -> Tensor:
        name = f"{self.prefix}.{kind}"
        hidden = (inputs @ params[f"{name}.w0"] + params[f"{name}.b0"]).tanh()
        hidden = (hidden @ params[f"{name}.w1"] + params[f"{name}.b1"]).tanh()
        return hidden @ params[f"{name}.w2"] + params[f"{name}.b2"]

    def conditioners(self, params: Dict[str, Tensor], x: Tensor) -> Tuple[Tensor, Tensor]:
        free = 1.0 - self.mask
        kept = x * self.mask
        log_scale = self._network(params, "scale", kept).tanh() * self.scale_clamp * free
        shift = self._network(params, "translate", kept) * free
        return log_scale, shift

    def forward(self, params: Dict[str, Tensor], x: Tensor) -> Tuple[Tensor, Tensor]:
        log_scale, shift = self.conditioners(params, x)
        z = x * self.mask + (x * log_scale.exp() + shift) * (1.0 - self.mask)
        return z, log_scale.sum(axis=-1)

    def inverse(self, params: Dict[str, Tensor], z: Tensor) -> Tensor:
        # the kept coordinates pass through unchanged, so the conditioners see the same input
        log_scale, shift = self.conditioners(params, z)
        return z * self.mask + ((z - shift) * (-log_scale).exp()) * (1.0 - self.mask)


@dataclass
class EpochStats:
    epoch: int
    train_nll: float
    validation_nll: float


class FlowModel:
    """
    Stack of affine coupling layers over a standard-normal base in `dim` dimensions.

    Parameters live in `params` as plain arrays; they are wrapped as tensors per call, so a
    model can be shared read-only between threads.
    """

    def __init__(
        self,
        dim: int,
        num_layers: int = 6,
        hidden: int = 128,
        scale_clamp: float = 2.0,
        params: Optional[Dict[str, np.ndarray]] = None,
        rng: Optional[SeededRng] = None,
        init_scale: float = 0.0,
    ):
        if dim < 1:
            raise ConfigException("flow dimension must be positive")
        if num_layers < 0 or hidden < 1 or scale_clamp <= 0:
            raise ConfigException("flow needs num_layers >= 0, hidden >= 1 and a positive scale clamp")
        self.dim = dim
        self.num_layers = num_layers
        self.hidden = hidden
        self.scale_clamp = scale_clamp
        self.layers: List[CouplingLayer] = [
            CouplingLayer(partition_mask(dim, i), f"layers.{i}", scale_clamp) for i in range(num_layers)
        ]
        if params is None:
            params = self.init_params(rng or SeededRng(0), init_scale)
        self._params: Dict[str, np.ndarray] = {}
        self._frozen: Optional[Dict[str, Tensor]] = None
        self.params = params

    def __repr__(self):
        return f"FlowModel(dim={self.dim}, layers={self.num_layers}, hidden={self.hidden})"

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self._params

    @params.setter
    def params(self, values: Dict[str, np.ndarray]):
        dtype = get_default_dtype()
        self._params = {name: np.asarray(value, dtype=dtype) for name, value in values.items()}
        self._frozen = None

    def init_params(self, rng: SeededRng, init_scale: float = 0.0) -> Dict[str, np.ndarray]:
        """
        Hidden layers get scaled normal weights; output layers are zero unless init_scale > 0,
        which makes a fresh model the identity flow.
        """
        params = {}
        for layer in self.layers:
            for kind in ("scale", "translate"):
                name = f"{layer.prefix}.{kind}"
                params[f"{name}.w0"] = rng.normal((self.dim, self.hidden), 1.0 / math.sqrt(self.dim))
                params[f"{name}.b0"] = np.zeros(self.hidden)
                params[f"{name}.w1"] = rng.normal((self.hidden, self.hidden), 1.0 / math.sqrt(self.hidden))
                params[f"{name}.b1"] = np.zeros(self.hidden)
                params[f"{name}.w2"] = rng.normal((self.hidden, self.dim), init_scale / math.sqrt(self.hidden))
                params[f"{name}.b2"] = np.zeros(self.dim)
        return params

    def param_names(self) -> List[str]:
        return [
            f"{layer.prefix}.{kind}.{piece}"
            for layer in self.layers
            for kind in ("scale", "translate")
            for piece in ("w0", "b0", "w1", "b1", "w2", "b2")
        ]

    def tensors(self, trainable: bool = False) -> Dict[str, Tensor]:
        if trainable:
            return {name: Tensor(value, requires_grad=True, name=name) for name, value in self._params.items()}
        if self._frozen is None:
            self._frozen = {name: _constant(value) for name, value in self._params.items()}
        return self._frozen

    def copy(self) -> "FlowModel":
        return FlowModel(
            self.dim,
            self.num_layers,
            self.hidden,
            self.scale_clamp,
            params={name: value.copy() for name, value in self._params.items()},
        )

    def _batch(self, x) -> Tuple[Tensor, bool]:
        x = as_tensor(x)
        if x.ndim not in (1, 2) or x.shape[-1] != self.dim:
            raise ShapeMismatchException(f"flow expects (..., {self.dim}) inputs, got {x.shape}")
        if x.ndim == 1:
            return x.reshape(1, self.dim), True
        return x, False

    def forward(self, x, params: Optional[Dict[str, Tensor]] = None) -> Tuple[Tensor, Tensor]:
        """ Data to latent space, returning (z, log|det J|) per row """
        params = params or self.tensors()
        z, single = self._batch(x)
        log_det = _constant(np.zeros(z.shape[0], dtype=z.dtype))
        for layer in self.layers:
            z, layer_log_det = layer.forward(params, z)
            log_det = log_det + layer_log_det
        if single:
            return z.reshape(self.dim), log_det.reshape(())
        return z, log_det

    def inverse(self, z, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        params = params or self.tensors()
        x, single = self._batch(z)
        for layer in reversed(self.layers):
            x = layer.inverse(params, x)
        return x.reshape(self.dim) if single else x

    def log_prob(self, x, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """ Exact change-of-variables log-density; scalar for a vector, one value per row for a batch """
        z, log_det = self.forward(x, params)
        base = (z * z).sum(axis=-1) * -0.5 - 0.5 * self.dim * LOG_2PI
        return base + log_det

    def grad_log_prob(self, x, create_graph: bool = False) -> Tensor:
        """
        Score d log p / dx. With create_graph and an x that is part of a live graph, the result stays
        differentiable, which is what Hessian-vector products through the prior need.
        """
        if create_graph and isinstance(x, Tensor) and x.requires_grad:
            point = x
        else:
            point = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
        with enable_grad():
            value = self.log_prob(point)
            total = value if value.ndim == 0 else value.sum()
            (score,) = grad(total, [point], create_graph=create_graph)
        return score

    def to_records(self) -> Dict[str, np.ndarray]:
        records = {
            ARCHITECTURE_RECORD: np.array([self.dim, self.num_layers, self.hidden, self.scale_clamp], dtype=np.float32)
        }
        records.update(self._params)
        return records

    @classmethod
    def from_records(cls, records: Dict[str, np.ndarray]) -> "FlowModel":
        if ARCHITECTURE_RECORD not in records:
            raise CheckpointFormatException("checkpoint has no flow architecture record")
        dim, num_layers, hidden, scale_clamp = records[ARCHITECTURE_RECORD].tolist()
        params = {name: value for name, value in records.items() if not name.startswith("meta.")}
        model = cls(int(dim), int(num_layers), int(hidden), float(scale_clamp), params=params)
        if set(params) != set(model.param_names()):
            raise CheckpointFormatException("checkpoint parameter names do not match the flow architecture")
        return model


def identity_flow(dim: int) -> FlowModel:
    """ Flow with no coupling layers: log_prob is the standard-normal log-density """
    return FlowModel(dim, num_layers=0)


def log_prob(model: FlowModel, x) -> Tensor:
    return model.log_prob(x)


def grad_log_prob(model: FlowModel, x, create_graph: bool = False) -> Tensor:
    return model.grad_log_prob(x, create_graph=create_graph)


def sample(model: FlowModel, rng: SeededRng, count: int) -> np.ndarray:
    """ Push `count` base draws through the inverse flow; rows are samples """
    if count < 0:
        raise ConfigException("sample count must be >= 0")
    if count == 0:
        return np.zeros((0, model.dim), dtype=get_default_dtype())
    base = rng.normal((count, model.dim))
    with no_grad():
        return model.inverse(base).numpy()


def _mean_nll(model: FlowModel, data: np.ndarray, batch_size: int) -> float:
    if len(data) == 0:
        return float("nan")
    total = 0.0
    with no_grad():
        for start in range(0, len(data), batch_size):
            total -= float(model.log_prob(data[start:start + batch_size]).numpy().sum())
    return total / len(data)


def train_mle(
    model: FlowModel, corpus, config: PriorTrainConfig, rng: SeededRng
) -> Tuple[FlowModel, List[EpochStats]]:
    """
    Fit the flow by maximum likelihood with dequantized mini-batches.

    Returns a trained copy plus per-epoch stats; entry 0 is the untrained model. The input model
    is left untouched.
    """
    data = np.asarray(corpus, dtype=get_default_dtype())
    if data.size == 0 or len(data) == 0:
        raise EmptyCorpusException("prior training corpus is empty")
    data = data.reshape(len(data), -1)
    if data.shape[1] != model.dim:
        raise ShapeMismatchException(f"corpus images have {data.shape[1]} pixels, flow expects {model.dim}")

    order = rng.permutation(len(data))
    validation_size = min(int(round(len(data) * config.validation_fraction)), len(data) - 1)
    validation = data[order[:validation_size]]
    training = data[order[validation_size:]]
    if validation_size == 0:
        validation = training

    trained = model.copy()
    batch_size = config.batch_size
    history = [EpochStats(0, _mean_nll(trained, training, batch_size), _mean_nll(trained, validation, batch_size))]
    _LOGGER.info("Prior epoch 0: train NLL %.4f, validation NLL %.4f", history[0].train_nll, history[0].validation_nll)
    if trained.num_layers == 0:
        return trained, history

    optimizer = Adam(config.learning_rate)
    for epoch in range(1, config.epochs + 1):
        permutation = rng.permutation(len(training))
        losses = []
        for start in range(0, len(training), config.batch_size):
            batch = training[permutation[start:start + config.batch_size]]
            noise = rng.uniform(0.0, config.dequantization, batch.shape)
            params = trained.tensors(trainable=True)
            with enable_grad():
                loss = -trained.log_prob(batch + noise, params).mean()
                gradients = grad(loss, list(params.values()))
            trained.params = optimizer.step(
                trained.params, {name: g.data for name, g in zip(params.keys(), gradients)}
            )
            losses.append(loss.item())
            _LOGGER.debug("Prior epoch %d batch %d: NLL %.4f", epoch, start // config.batch_size, losses[-1])
        stats = EpochStats(epoch, float(np.mean(losses)), _mean_nll(trained, validation, config.batch_size))
        history.append(stats)
        _LOGGER.info(
            "Prior epoch %d: train NLL %.4f, validation NLL %.4f (%.3f bits/dim)",
            epoch,
            stats.train_nll,
            stats.validation_nll,
            stats.validation_nll / (model.dim * math.log(2.0)),
        )
    return trained, history


def save_flow(path, model: FlowModel):
    save_checkpoint(path, model.to_records())


def load_flow(path) -> FlowModel:
    return FlowModel.from_records(load_checkpoint(path))
