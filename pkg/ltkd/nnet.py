"""Dense feedforward network with analytic gradients, Adam and a plateau schedule.

Parameters are float64 ``numpy`` arrays. A layer weight has shape ``(fan_in, fan_out)`` so a
batch ``x`` of shape ``(B, d_in)`` maps through ``x @ W + b``. The output layer is linear and
has ``2 * n_classes`` columns: ``[:, :n]`` hold "present" logits and ``[:, n:]`` "absent" logits.
"""
from __future__ import annotations

import hashlib
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigurationError, IntegrityError, NumericError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
ACTIVATION = "relu"
FD_STEP = 1e-5
FD_MAX_PARAMS = 10_000

LossEvaluator = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _stream_key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *stream: str | int) -> np.random.Generator:
    """Counter-based generator for the named stream ``stream`` under ``seed``."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_stream_key(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *stream: str | int) -> int:
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_stream_key(s) for s in stream))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


@dataclass
class MlpNetwork:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = ACTIVATION
    seed: int | None = None

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1] // 2

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> MlpNetwork:
        return replace(
            self,
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]


@dataclass
class AdamState:
    step: int
    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_network(
        cls, net: MlpNetwork, *, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8
    ) -> AdamState:
        return cls(
            step=0,
            m_weights=[np.zeros_like(w) for w in net.weights],
            m_biases=[np.zeros_like(b) for b in net.biases],
            v_weights=[np.zeros_like(w) for w in net.weights],
            v_biases=[np.zeros_like(b) for b in net.biases],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


@dataclass
class PlateauSchedule:
    current_lr: float = 1e-4
    floor_lr: float = 1e-7
    patience: int = 5
    factor: float = 0.1
    best_val_loss: float = math.inf
    epochs_since_improve: int = 0

    def __post_init__(self) -> None:
        if not (self.current_lr > 0 and self.floor_lr > 0):
            raise ConfigurationError("learning rates must be positive")
        if self.current_lr < self.floor_lr:
            raise ConfigurationError("initial learning rate is below the floor")
        if self.patience < 1:
            raise ConfigurationError("patience must be at least 1")
        if not 0 < self.factor < 1:
            raise ConfigurationError("plateau factor must lie in (0, 1)")


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)


def init_network(layer_dims: Sequence[int], seed: int) -> MlpNetwork:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigurationError(f"need at least an input and an output width, got {dims}")
    if any(d <= 0 for d in dims):
        raise ConfigurationError(f"layer widths must be positive, got {dims}")
    if dims[-1] % 2:
        raise ConfigurationError(f"output width must be even (two logits per class), got {dims[-1]}")

    rng = make_rng(seed, "init")
    weights: list[np.ndarray] = []
    biases: list[np.ndarray] = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpNetwork(layer_dims=dims, weights=weights, biases=biases, seed=int(seed))


def _check_batch(net: MlpNetwork, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.d_in:
        raise ShapeError(f"batch of shape {batch.shape} does not match input width {net.d_in}")
    return batch


def forward_with_cache(net: MlpNetwork, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    activations = _check_batch(net, batch)
    cache = ForwardCache()
    last = net.n_layers - 1
    for index, (weight, bias) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(activations)
        pre = activations @ weight + bias
        cache.pre_activations.append(pre)
        activations = pre if index == last else np.maximum(pre, 0.0)
    return activations, cache


def forward(net: MlpNetwork, batch: np.ndarray) -> np.ndarray:
    logits, _ = forward_with_cache(net, batch)
    return logits


def backward(
    net: MlpNetwork,
    batch: np.ndarray,
    upstream_grad: np.ndarray,
    *,
    cache: ForwardCache | None = None,
) -> Gradients:
    """Gradients of ``sum(forward(net, batch) * upstream_grad)`` for every parameter."""
    if cache is None:
        _, cache = forward_with_cache(net, batch)
    batch_size = cache.inputs[0].shape[0]
    delta = np.asarray(upstream_grad, dtype=np.float64)
    if delta.shape != (batch_size, net.layer_dims[-1]):
        raise ShapeError(f"upstream gradient of shape {delta.shape} does not match logits")

    grad_w: list[np.ndarray] = [np.empty(0)] * net.n_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * net.n_layers
    for index in range(net.n_layers - 1, -1, -1):
        grad_w[index] = cache.inputs[index].T @ delta
        grad_b[index] = delta.sum(axis=0)
        if index:
            delta = (delta @ net.weights[index].T) * (cache.pre_activations[index - 1] > 0.0)
    return Gradients(weights=grad_w, biases=grad_b)


def adam_step(
    net: MlpNetwork, grads: Gradients, state: AdamState, lr: float
) -> tuple[MlpNetwork, AdamState]:
    for index, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if gw.shape != net.weights[index].shape or gb.shape != net.biases[index].shape:
            raise ShapeError(f"gradient shapes do not match layer {index}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {index}", layer_index=index)

    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step

    def update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray):
        m_new = b1 * m + (1.0 - b1) * grad
        v_new = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m_new / correction1
        v_hat = v_new / correction2
        return param - lr * m_hat / (np.sqrt(v_hat) + eps), m_new, v_new

    new_w, new_b, mw, mb, vw, vb = [], [], [], [], [], []
    for index in range(net.n_layers):
        w, m, v = update(net.weights[index], grads.weights[index], state.m_weights[index], state.v_weights[index])
        new_w.append(w)
        mw.append(m)
        vw.append(v)
        b, m, v = update(net.biases[index], grads.biases[index], state.m_biases[index], state.v_biases[index])
        new_b.append(b)
        mb.append(m)
        vb.append(v)

    new_net = replace(net, layer_dims=list(net.layer_dims), weights=new_w, biases=new_b)
    new_state = replace(state, step=step, m_weights=mw, m_biases=mb, v_weights=vw, v_biases=vb)
    return new_net, new_state


def plateau_update(schedule: PlateauSchedule, epoch_val_loss: float) -> tuple[PlateauSchedule, bool]:
    if not math.isfinite(epoch_val_loss):
        raise NumericError(f"validation loss is not finite: {epoch_val_loss}")

    if epoch_val_loss < schedule.best_val_loss:
        return replace(schedule, best_val_loss=epoch_val_loss, epochs_since_improve=0), False

    waited = schedule.epochs_since_improve + 1
    if waited < schedule.patience:
        return replace(schedule, epochs_since_improve=waited), False

    reduced = schedule.current_lr * schedule.factor
    # 1e-4 * 0.1**3 lands a few ulps under 1e-7; that still counts as reaching the floor
    if reduced < schedule.floor_lr * (1.0 - 1e-9):
        logger.debug("learning rate would drop below %.1e; stopping", schedule.floor_lr)
        return replace(schedule, epochs_since_improve=0), True
    new_lr = max(reduced, schedule.floor_lr)
    logger.debug("plateau: learning rate %.3e -> %.3e", schedule.current_lr, new_lr)
    return replace(schedule, current_lr=new_lr, epochs_since_improve=0), False


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def finite_diff_check(
    net: MlpNetwork,
    batch: np.ndarray,
    loss_evaluator: LossEvaluator,
    *,
    analytic: Gradients | None = None,
    h: float = FD_STEP,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference parameter gradients.

    ``loss_evaluator`` maps logits to ``(loss, d loss / d logits)``. Above ``FD_MAX_PARAMS``
    parameters a seeded subsample of coordinates is checked.
    """
    if analytic is None:
        logits, cache = forward_with_cache(net, batch)
        _, upstream = loss_evaluator(logits)
        analytic = backward(net, batch, upstream, cache=cache)

    perturbed = net.copy()
    params = [a for pair in zip(perturbed.weights, perturbed.biases) for a in pair]
    analytic_arrays = analytic.arrays()
    coordinates = [(p, i) for p, array in enumerate(params) for i in range(array.size)]
    if len(coordinates) > FD_MAX_PARAMS:
        picks = make_rng(seed, "finite-diff").choice(len(coordinates), size=FD_MAX_PARAMS, replace=False)
        coordinates = [coordinates[k] for k in np.sort(picks)]

    worst = 0.0
    for p, i in coordinates:
        flat = params[p].reshape(-1)
        original = flat[i]
        flat[i] = original + h
        plus, _ = loss_evaluator(forward(perturbed, batch))
        flat[i] = original - h
        minus, _ = loss_evaluator(forward(perturbed, batch))
        flat[i] = original
        numeric = (plus - minus) / (2.0 * h)
        error = float(relative_error(np.float64(analytic_arrays[p].reshape(-1)[i]), np.float64(numeric)))
        worst = max(worst, error)
    return worst


def network_digest(net: MlpNetwork) -> str:
    digest = hashlib.sha256()
    digest.update(np.asarray(net.layer_dims, dtype=np.int64).tobytes())
    for weight, bias in zip(net.weights, net.biases):
        digest.update(np.ascontiguousarray(weight).tobytes())
        digest.update(np.ascontiguousarray(bias).tobytes())
    return digest.hexdigest()


def save_checkpoint(net: MlpNetwork, *, config_hash: str | None = None) -> dict[str, Any]:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "layers": [
            {"weight": weight.tolist(), "bias": bias.tolist()}
            for weight, bias in zip(net.weights, net.biases)
        ],
        "seed": net.seed,
        "config_hash": config_hash,
    }


def load_checkpoint(payload: dict[str, Any]) -> MlpNetwork:
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format_version {version!r}")
    try:
        dims = [int(d) for d in payload["layer_dims"]]
        weights = [np.asarray(layer["weight"], dtype=np.float64) for layer in payload["layers"]]
        biases = [np.asarray(layer["bias"], dtype=np.float64) for layer in payload["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"malformed checkpoint: {exc}") from exc

    if len(weights) != len(dims) - 1:
        raise IntegrityError("checkpoint layer count does not match layer_dims")
    for index, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if weights[index].shape != (fan_in, fan_out) or biases[index].shape != (fan_out,):
            raise IntegrityError(f"checkpoint layer {index} has inconsistent shapes")
    return MlpNetwork(
        layer_dims=dims,
        weights=weights,
        biases=biases,
        activation=payload.get("activation", ACTIVATION),
        seed=payload.get("seed"),
    )
