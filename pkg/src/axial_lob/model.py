"""The full network: stem, gated axial block, pooled classifier head.

Layout per gated-block layer (two layers total):

    input -> 1x1 conv + BN + ReLU -> width attention -> height attention
          -> 1x1 conv + BN + ReLU -> (+ input residual) -> output

The 1x1 convolutions only move channel counts; no spatial mixing happens
outside the attention modules.  The head is a global average pool per
channel followed by one fully-connected layer producing three logits.
"""

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import configio
from .attention import AxialAttentionConfig, GatedAxialLayer
from .errors import CheckpointFormatError, ConfigError, ShapeError
from .tensor import Parameter, Tensor, add, batch_norm, matmul, reduce_mean, relu, reshape, transpose

CHECKPOINT_MAGIC = b"AXLOB"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 40  # time steps, most recent last
    input_width: int = 40  # book features
    input_channels: int = 1
    stem_channels: int = 8
    block_channels: int = 8
    heads: int = 2
    block_layers: int = 2
    classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.block_channels % self.heads != 0:
            raise ConfigError(
                f"block_channels={self.block_channels} not divisible by heads={self.heads}"
            )
        for field in ("input_height", "input_width", "input_channels", "stem_channels",
                      "block_channels", "heads", "block_layers", "classes"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")

    def to_pairs(self, prefix="model."):
        return {
            prefix + "input_height": str(self.input_height),
            prefix + "input_width": str(self.input_width),
            prefix + "input_channels": str(self.input_channels),
            prefix + "stem_channels": str(self.stem_channels),
            prefix + "block_channels": str(self.block_channels),
            prefix + "heads": str(self.heads),
            prefix + "block_layers": str(self.block_layers),
            prefix + "classes": str(self.classes),
            prefix + "seed": str(self.seed),
        }

    @classmethod
    def from_pairs(cls, pairs, prefix="model."):
        kwargs = {}
        for name in ("input_height", "input_width", "input_channels", "stem_channels",
                     "block_channels", "heads", "block_layers", "classes", "seed"):
            key = prefix + name
            if key in pairs:
                kwargs[name] = configio.get_typed(pairs, key, int)
        return cls(**kwargs)


class Conv1x1:
    """Pointwise channel map with bias; weights scaled-uniform in 1/sqrt(fan_in)."""

    def __init__(self, c_in, c_out, rng, prefix, dtype):
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(c_in, c_out)).astype(dtype),
            prefix + "weight", dtype=dtype,
        )
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), prefix + "bias", dtype=dtype)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        n, c, h, w = x.shape
        flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, c))
        out = add(matmul(flat, self.weight.tensor), self.bias.tensor)
        return transpose(reshape(out, (n, h, w, self.weight.shape[1])), (0, 3, 1, 2))

    @property
    def shape(self):
        return self.weight.tensor.shape


class BatchNorm2d:
    """Learnable per-channel affine over batch-normalized activations."""

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels, prefix, dtype):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), prefix + "gamma", dtype=dtype)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), prefix + "beta", dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.prefix = prefix

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(self.prefix + "running_mean", self.running_mean),
                (self.prefix + "running_var", self.running_var)]

    def __call__(self, x, train):
        return batch_norm(
            x, self.gamma.tensor, self.beta.tensor,
            self.running_mean, self.running_var,
            train, eps=self.EPS, momentum=self.MOMENTUM,
        )


class Linear:
    def __init__(self, c_in, c_out, rng, prefix, dtype):
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(c_in, c_out)).astype(dtype),
            prefix + "weight", dtype=dtype,
        )
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), prefix + "bias", dtype=dtype)

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return add(matmul(x, self.weight.tensor), self.bias.tensor)


class GatedBlockLayer:
    """One residual layer: channel pool in, axial pair, channel pool out."""

    def __init__(self, cfg: ModelConfig, rng, prefix, dtype):
        c1, c2 = cfg.stem_channels, cfg.block_channels
        self.pre_conv = Conv1x1(c1, c2, rng, prefix + "pre_conv.", dtype)
        self.pre_bn = BatchNorm2d(c2, prefix + "pre_bn.", dtype)
        self.width_attn = GatedAxialLayer(
            AxialAttentionConfig("width", c2, c2, cfg.heads, cfg.input_width),
            rng, prefix + "width_attn.", dtype,
        )
        self.height_attn = GatedAxialLayer(
            AxialAttentionConfig("height", c2, c2, cfg.heads, cfg.input_height),
            rng, prefix + "height_attn.", dtype,
        )
        self.post_conv = Conv1x1(c2, c1, rng, prefix + "post_conv.", dtype)
        self.post_bn = BatchNorm2d(c1, prefix + "post_bn.", dtype)

    def params(self):
        out = self.pre_conv.params() + self.pre_bn.params()
        out += self.width_attn.params() + self.height_attn.params()
        out += self.post_conv.params() + self.post_bn.params()
        return out

    def buffers(self):
        return self.pre_bn.buffers() + self.post_bn.buffers()

    def gates(self):
        return self.width_attn.gates() + self.height_attn.gates()

    def __call__(self, x, train):
        y = relu(self.pre_bn(self.pre_conv(x), train))
        y = self.width_attn(y)
        y = self.height_attn(y)
        y = relu(self.post_bn(self.post_conv(y), train))
        return add(x, y)


class AxialLobModel:
    """Stem + stacked gated axial layers + pooled linear classifier."""

    def __init__(self, config: ModelConfig, seed=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        c1 = config.stem_channels
        self.stem_conv = Conv1x1(config.input_channels, c1, rng, "stem.conv.", dtype)
        self.stem_bn = BatchNorm2d(c1, "stem.bn.", dtype)
        self.layers = [
            GatedBlockLayer(config, rng, f"block.layer{i}.", dtype)
            for i in range(config.block_layers)
        ]
        self.fc = Linear(c1, config.classes, rng, "head.fc.", dtype)
        self._registry = {}
        for p in self._all_params():
            if p.name in self._registry:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            self._registry[p.name] = p

    def _all_params(self):
        out = self.stem_conv.params() + self.stem_bn.params()
        for layer in self.layers:
            out += layer.params()
        out += self.fc.params()
        return out

    def parameters(self):
        return list(self._registry.values())

    def named_parameters(self):
        return dict(self._registry)

    def buffers(self):
        out = self.stem_bn.buffers()
        for layer in self.layers:
            out += layer.buffers()
        return out

    def gates(self):
        out = []
        for layer in self.layers:
            out += layer.gates()
        return out

    def set_gates_trainable(self, flag):
        for g in self.gates():
            g.trainable = bool(flag)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, batch, train=False):
        """[N, C_in, H, W] -> logits [N, classes]."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.dtype)
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(
                f"expected input [N, {expected[0]}, {expected[1]}, {expected[2]}], got {x.shape}"
            )
        if not np.isfinite(x.data).all():
            raise ShapeError("model input contains non-finite values")
        y = relu(self.stem_bn(self.stem_conv(x), train))
        for layer in self.layers:
            y = layer(y, train)
        pooled = reduce_mean(y, axes=(2, 3))  # adaptive average pool to 1x1
        return self.fc(pooled)

    def __call__(self, batch, train=False):
        return self.forward(batch, train)

    def parameter_count(self):
        return sum(p.tensor.size for p in self.parameters())

    def state_arrays(self):
        """Ordered (name, array) pairs: parameters first, then buffers."""
        out = [(p.name, p.tensor.data) for p in self.parameters()]
        out += self.buffers()
        return out

    def load_state_arrays(self, records):
        table = dict(records)
        for name, arr in self.state_arrays():
            if name not in table:
                raise CheckpointFormatError(f"checkpoint is missing record {name!r}")
            new = table.pop(name)
            if new.shape != arr.shape:
                raise CheckpointFormatError(
                    f"parameter {name!r}: checkpoint shape {new.shape} does not match "
                    f"configured shape {arr.shape}"
                )
            arr[...] = new.astype(arr.dtype)
        if table:
            extra = sorted(table)[0]
            raise CheckpointFormatError(f"checkpoint has unknown record {extra!r}")

    def clone(self):
        """Fresh model with identical parameter and buffer values."""
        twin = AxialLobModel(self.config, dtype=self.dtype)
        twin.load_state_arrays([(n, a.copy()) for n, a in self.state_arrays()])
        return twin


def init_model(config: ModelConfig, seed=None, dtype=np.float32):
    """Deterministically initialized model for a config and seed."""
    return AxialLobModel(config, seed=seed, dtype=dtype)


def parameter_count(model):
    return model.parameter_count()


def save_checkpoint(model, path, extra_meta=None):
    """Binary checkpoint: magic, version, config text, raw float32 records."""
    if model.dtype != np.dtype(np.float32):
        raise CheckpointFormatError("checkpoints store float32 models only")
    pairs = model.config.to_pairs()
    if extra_meta:
        pairs.update({str(k): str(v) for k, v in extra_meta.items()})
    config_blob = configio.canonical_text(pairs).encode("utf-8")
    records = model.state_arrays()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_checkpoint(path):
    """Parse a checkpoint file into (config_pairs, records)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (config_len,) = take("<I")
    if pos + config_len > len(blob):
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    pairs = configio.parse_kv(bytes(view[pos : pos + config_len]).decode("utf-8"))
    pos += config_len
    (count,) = take("<I")
    records = []
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(blob):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = take("<B")
        shape = tuple(take("<I")[0] for _ in range(ndim))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if pos + n_bytes > len(blob):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(view[pos : pos + n_bytes], dtype="<f4").reshape(shape)
        pos += n_bytes
        records.append((name, np.array(arr)))
    return pairs, records


def load_checkpoint(path, config=None):
    """Rebuild a model from a checkpoint; returns (model, meta_pairs)."""
    pairs, records = read_checkpoint(path)
    file_config = ModelConfig.from_pairs(pairs)
    if config is not None and config != file_config:
        raise CheckpointFormatError(
            f"{path}: checkpoint config {file_config} does not match requested {config}"
        )
    model = AxialLobModel(file_config)
    model.load_state_arrays(records)
    meta = {k: v for k, v in pairs.items() if not k.startswith("model.")}
    return model, meta
