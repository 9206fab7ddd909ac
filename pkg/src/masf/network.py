"""Three-part model: feature extractor, task head and metric head.

Parameters live in plain dicts of arrays (or tensors while a step is being
recorded) so that updates are functional: :func:`apply_update` always
returns new dicts and never touches its input.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .tensor import NumericDomainError, ShapeError, Tensor, as_tensor, matmul, relu, sqrt

__all__ = [
    "Model",
    "ModelConfig",
    "CheckpointError",
    "apply_update",
    "features",
    "init",
    "load_checkpoint",
    "logits",
    "metric_embed",
    "save_checkpoint",
]

CHECKPOINT_MAGIC = b"MGM1"
NORM_EPS = 1e-12


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    feature_dims: tuple[int, ...] = (64, 32)
    num_classes: int = 2
    metric_dims: tuple[int, ...] = (32, 16)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        object.__setattr__(self, "metric_dims", tuple(int(d) for d in self.metric_dims))
        widths = (self.input_dim, *self.feature_dims, *self.metric_dims)
        if not self.feature_dims or not self.metric_dims:
            raise ValueError("feature_dims and metric_dims need at least one layer each")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def feature_width(self) -> int:
        return self.feature_dims[-1]

    def layer_shapes(self) -> dict[str, list[tuple[str, tuple[int, ...]]]]:
        """Parameter names and shapes per subnetwork, in declaration order."""
        def stack(fan_in, widths):
            out = []
            for i, w in enumerate(widths):
                out.append((f"W{i}", (fan_in, w)))
                out.append((f"b{i}", (w,)))
                fan_in = w
            return out

        return {
            "psi": stack(self.input_dim, self.feature_dims),
            "theta": stack(self.feature_width, (self.num_classes,)),
            "phi": stack(self.feature_width, self.metric_dims),
        }

    def to_lines(self) -> list[str]:
        return [
            f"input_dim={self.input_dim}",
            f"feature_dims={','.join(map(str, self.feature_dims))}",
            f"num_classes={self.num_classes}",
            f"metric_dims={','.join(map(str, self.metric_dims))}",
            f"seed={self.seed}",
            "activation=relu",
        ]

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ModelConfig":
        def dims(s):
            return tuple(int(v) for v in str(s).split(",") if v.strip())

        kwargs = {}
        if "input_dim" in values:
            kwargs["input_dim"] = int(values["input_dim"])
        if "feature_dims" in values:
            kwargs["feature_dims"] = dims(values["feature_dims"])
        if "num_classes" in values:
            kwargs["num_classes"] = int(values["num_classes"])
        if "metric_dims" in values:
            kwargs["metric_dims"] = dims(values["metric_dims"])
        if "seed" in values:
            kwargs["seed"] = int(values["seed"])
        if values.get("activation", "relu") != "relu":
            raise ValueError("only relu activation is supported")
        return cls(**kwargs)


@dataclasses.dataclass(frozen=True)
class Model:
    config: ModelConfig
    psi: dict
    theta: dict
    phi: dict

    def replace(self, **parts) -> "Model":
        return dataclasses.replace(self, **parts)

    def parameter_count(self) -> int:
        return sum(int(np.size(v)) for part in (self.psi, self.theta, self.phi) for v in part.values())

    def arrays(self) -> "Model":
        """A copy whose parameters are plain arrays."""
        def strip(d):
            return {k: np.array(v.data if isinstance(v, Tensor) else v) for k, v in d.items()}

        return self.replace(psi=strip(self.psi), theta=strip(self.theta), phi=strip(self.phi))

    def features(self, x):
        return features(self.psi, x)

    def logits(self, h):
        return logits(self.theta, h)

    def metric_embed(self, h):
        return metric_embed(self.phi, h)

    def predict(self, x) -> np.ndarray:
        from .tensor import no_grad

        with no_grad():
            return np.argmax(self.logits(self.features(x)).data, axis=1)


def init(config: ModelConfig) -> Model:
    """He-style initialization: N(0, 2/fan_in) weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    parts = {}
    for part, shapes in config.layer_shapes().items():
        params = {}
        for name, shape in shapes:
            if name.startswith("W"):
                params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            else:
                params[name] = np.zeros(shape)
        parts[part] = params
    return Model(config, parts["psi"], parts["theta"], parts["phi"])


def _dense(params: dict, x: Tensor, final_activation: bool) -> Tensor:
    n_layers = len(params) // 2
    h = x
    for i in range(n_layers):
        W, b = as_tensor(params[f"W{i}"]), as_tensor(params[f"b{i}"])
        if h.shape[1] != W.shape[0]:
            raise ShapeError(f"layer {i}: input width {h.shape[1]} does not match weight {W.shape}")
        h = matmul(h, W) + b
        if i < n_layers - 1 or final_activation:
            h = relu(h)
    return h


def _rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"expected an N x D batch, got shape {x.shape}")
    return x


def features(psi: dict, x) -> Tensor:
    """Feature extractor: ReLU after every layer."""
    return _dense(psi, _rows(x), final_activation=True)


def logits(theta: dict, h) -> Tensor:
    return _dense(theta, _rows(h), final_activation=False)


def metric_embed(phi: dict, h) -> Tensor:
    """Metric head followed by row-wise L2 normalization."""
    e = _dense(phi, _rows(h), final_activation=False)
    norm = sqrt((e * e).sum(axis=1, keepdims=True)) + NORM_EPS
    if np.any(norm.data <= NORM_EPS):
        raise NumericDomainError("metric head produced a zero vector")
    return e / norm


def apply_update(params: dict, grads: dict, lr: float) -> dict:
    """Return ``params - lr * grads`` as a new dict."""
    if set(params) != set(grads):
        raise ShapeError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    out = {}
    for k, p in params.items():
        g = grads[k]
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"{k}: gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if isinstance(p, Tensor) or isinstance(g, Tensor):
            out[k] = as_tensor(p) - lr * as_tensor(g)
        else:
            out[k] = np.asarray(p) - lr * np.asarray(g)
    return out


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(model: Model, path) -> None:
    model = model.arrays()
    lines = model.config.to_lines()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(lines))
    for line in lines:
        raw = line.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
    for part, shapes in model.config.layer_shapes().items():
        params = getattr(model, part)
        for name, shape in shapes:
            buf += np.ascontiguousarray(params[name], dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 4
    try:
        (n_lines,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        values = {}
        for _ in range(n_lines):
            (length,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            line = raw[pos:pos + length].decode("utf-8")
            if len(line.encode("utf-8")) != length:
                raise CheckpointError("truncated checkpoint header")
            pos += length
            key, _, value = line.partition("=")
            values[key] = value
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    config = ModelConfig.from_mapping(values)
    parts = {}
    for part, shapes in config.layer_shapes().items():
        params = {}
        for name, shape in shapes:
            n = int(np.prod(shape))
            chunk = raw[pos:pos + 8 * n]
            if len(chunk) != 8 * n:
                raise CheckpointError("truncated checkpoint parameters")
            params[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
            pos += 8 * n
        parts[part] = params
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in checkpoint")
    return Model(config, parts["psi"], parts["theta"], parts["phi"])
