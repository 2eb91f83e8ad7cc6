"""Scaled-down raw-waveform speaker embedding extractor (residual 1-D CNN + GRU).

Layout (all convolutions are 1-D over raw samples)::

    strided conv (k=3, s=3) -> BN -> LeakyReLU
    residual groups: [BN -> LeakyReLU -> conv(3)] x 2 + skip, MaxPool(3)
    GRU over the remaining frames -> FC embedding -> FC speaker head(s)

The very first residual block skips its leading BN/LeakyReLU because the
stem already applied them.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_length: int = 6561
    first_conv_channels: int = 16
    block_group_specs: List[Tuple[int, int]] = field(default_factory=lambda: [(2, 16), (4, 32)])
    gru_hidden: int = 32
    embedding_dim: int = 32
    num_speakers: int = 20
    leaky_slope: float = 0.3
    num_segment_output_layers: int = 0

    @property
    def num_pools(self) -> int:
        return sum(n for n, _ in self.block_group_specs)

    @property
    def downsampling(self) -> int:
        return 3 ** (1 + self.num_pools)

    def frames(self, length: Optional[int] = None) -> int:
        return (self.input_length if length is None else length) // self.downsampling

    def validate(self) -> None:
        if self.input_length < 1 or self.input_length % self.downsampling:
            raise ConfigError(
                f"input_length {self.input_length} is not a positive multiple of the "
                f"downsampling factor {self.downsampling}"
            )
        if self.embedding_dim < 1 or self.gru_hidden < 1 or self.first_conv_channels < 1:
            raise ConfigError("layer widths must be positive")
        if self.num_speakers < 2:
            raise ConfigError("num_speakers must be >= 2")
        if not self.block_group_specs or any(n < 1 or c < 1 for n, c in self.block_group_specs):
            raise ConfigError("block_group_specs must list (num_blocks >= 1, channels >= 1) pairs")
        if self.num_segment_output_layers < 0:
            raise ConfigError("num_segment_output_layers must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_group_specs"] = [list(s) for s in self.block_group_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["block_group_specs"] = [tuple(s) for s in d["block_group_specs"]]
        return cls(**d)


def full_scale_config() -> ModelConfig:
    return ModelConfig(
        input_length=59049,
        first_conv_channels=128,
        block_group_specs=[(2, 128), (4, 256)],
        gru_hidden=1024,
        embedding_dim=1024,
        num_speakers=6112,
    )


class Model:
    """Parameters, batch-norm buffers and the forward passes of one extractor."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], bn: Dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn
        self.frozen = False
        self.training = True

    # -- mode switches ----------------------------------------------------
    def train(self) -> "Model":
        if self.frozen:
            raise RuntimeError("a frozen model cannot be switched to training mode")
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def freeze(self) -> "Model":
        """Turn this model into a fixed teacher: no gradients, BN in eval mode."""
        self.frozen = True
        self.training = False
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward passes -----------------------------------------------------
    def _bn_act(self, x: Tensor, name: str) -> Tensor:
        x = nx.batchnorm1d(
            x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn[name],
            training=self.training,
        )
        return nx.leaky_relu(x, self.config.leaky_slope)

    def forward_embedding(self, segments) -> Tensor:
        """Embed a batch of waveforms ``[B, L]`` into ``[B, embedding_dim]``.

        ``L`` must be a positive multiple of the downsampling factor; the
        configured ``input_length`` is the nominal training length.
        """
        x = segments if isinstance(segments, Tensor) else Tensor(segments)
        if x.ndim != 2:
            raise nx.DimensionError(f"expected a [batch, samples] waveform batch, got {x.shape}")
        length = x.shape[1]
        factor = self.config.downsampling
        if length < factor or length % factor:
            raise nx.DimensionError(
                f"segment length {length} is not a positive multiple of {factor}"
            )
        if self.frozen:
            with nx.no_grad():
                return self._embed(x)
        return self._embed(x)

    def _embed(self, x: Tensor) -> Tensor:
        p, slope = self.params, self.config.leaky_slope
        h = x.reshape(x.shape[0], 1, x.shape[1])
        h = nx.conv1d(h, p["stem.conv"], stride=3)
        h = self._bn_act(h, "stem.bn")
        first = True
        for g, (num_blocks, _) in enumerate(self.config.block_group_specs):
            for b in range(num_blocks):
                name = f"g{g}.b{b}"
                skip = h
                if f"{name}.proj" in p:
                    skip = nx.conv1d(h, p[f"{name}.proj"])
                y = h if first else self._bn_act(h, f"{name}.bn1")
                y = nx.conv1d(y, p[f"{name}.conv1"], padding=1)
                y = self._bn_act(y, f"{name}.bn2")
                y = nx.conv1d(y, p[f"{name}.conv2"], padding=1)
                h = nx.maxpool1d(y + skip, 3)
                first = False
        frames = h.transpose(0, 2, 1)  # [B, T, C]
        h = nx.gru_forward(frames, p["gru.w_input"], p["gru.w_hidden"], p["gru.bias"])
        return nx.linear(h, p["embed.weight"], p["embed.bias"])

    def forward_logits(self, embedding: Tensor, head: Union[str, int] = "aggregate") -> Tensor:
        """Project embeddings to speaker logits with the aggregate head or segment head ``k``."""
        if head == "aggregate":
            name = "head.aggregate"
        elif isinstance(head, (int, np.integer)) and 0 <= head < self.config.num_segment_output_layers:
            name = f"head.segment{int(head)}"
        else:
            raise KeyError(f"unknown output head {head!r}")
        if self.frozen:
            with nx.no_grad():
                return nx.linear(embedding, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        return nx.linear(embedding, self.params[f"{name}.weight"], self.params[f"{name}.bias"])


def _parameter_shapes(config: ModelConfig) -> List[Tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every parameter, in canonical order."""
    shapes = []
    c = config.first_conv_channels
    shapes.append(("stem.conv", (c, 1, 3), 3))
    shapes += [("stem.bn.gamma", (c,), 0), ("stem.bn.beta", (c,), 0)]
    first = True
    for g, (num_blocks, width) in enumerate(config.block_group_specs):
        for b in range(num_blocks):
            name = f"g{g}.b{b}"
            if not first:
                shapes += [(f"{name}.bn1.gamma", (c,), 0), (f"{name}.bn1.beta", (c,), 0)]
            shapes.append((f"{name}.conv1", (width, c, 3), 3 * c))
            shapes += [(f"{name}.bn2.gamma", (width,), 0), (f"{name}.bn2.beta", (width,), 0)]
            shapes.append((f"{name}.conv2", (width, width, 3), 3 * width))
            if width != c:
                shapes.append((f"{name}.proj", (width, c, 1), c))
            c = width
            first = False
    hdim = config.gru_hidden
    shapes.append(("gru.w_input", (c, 3 * hdim), c))
    shapes.append(("gru.w_hidden", (hdim, 3 * hdim), hdim))
    shapes.append(("gru.bias", (3 * hdim,), hdim))
    shapes.append(("embed.weight", (config.embedding_dim, hdim), hdim))
    shapes.append(("embed.bias", (config.embedding_dim,), hdim))
    heads = ["aggregate"] + [f"segment{k}" for k in range(config.num_segment_output_layers)]
    for head in heads:
        shapes.append((f"head.{head}.weight", (config.num_speakers, config.embedding_dim), config.embedding_dim))
        shapes.append((f"head.{head}.bias", (config.num_speakers,), config.embedding_dim))
    return shapes


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Construct a model with seeded uniform(+-sqrt(1/fan_in)) initialization."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    bn: Dict[str, BatchNormState] = {}
    for name, shape, fan_in in _parameter_shapes(config):
        if name.endswith(".gamma"):
            data = np.ones(shape)
            bn[name[: -len(".gamma")]] = BatchNormState(shape[0])
        elif name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params, bn)


# -- checkpoints -----------------------------------------------------------------

_MAGIC = b"SAGGCKPT"


def _arrays(model: Model) -> List[Tuple[str, np.ndarray]]:
    arrays = [(name, p.data) for name, p in model.params.items()]
    for name, state in model.bn.items():
        if state.running_mean is not None:
            arrays.append((f"{name}.running_mean", state.running_mean))
            arrays.append((f"{name}.running_var", state.running_var))
    return arrays


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize config and named arrays into the flat checkpoint container.

    Layout (little-endian): magic, u32 config-json length, config json,
    u32 array count, then per array: u32 name length, utf-8 name, u32 rank,
    u64 dims, float64 values.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    arrays = _arrays(model)
    chunks = [_MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, data in arrays:
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    return load_checkpoint_bytes(Path(path).read_bytes(), str(path))


def load_checkpoint_bytes(blob: bytes, source: str = "checkpoint") -> Model:
    if blob[:8] != _MAGIC:
        raise ValueError(f"{source}: not a model checkpoint")
    pos = 8
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    config = ModelConfig.from_dict(json.loads(blob[pos:pos + n]))
    pos += n
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size

    model = build(config, seed=0)
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"{source}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name].copy()
    for name, state in model.bn.items():
        if f"{name}.running_mean" in arrays:
            state.running_mean = arrays[f"{name}.running_mean"].copy()
            state.running_var = arrays[f"{name}.running_var"].copy()
    return model
