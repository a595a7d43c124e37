"""Attention ResNet regressor.

Layout: a two-convolution downsampling stem, three pre-activation residual
blocks, soft-attention pooling over spatial positions, and two fully
connected layers producing one value in diopters. One model is trained per
target (spherical equivalent, sphere or cylinder).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"RFNETCK1"
TARGETS = ("se", "sphere", "cylinder")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_resolution: int = 64
    stem_channels: tuple[int, int] = (8, 16)
    block_channels: tuple[int, int, int] = (16, 32, 64)
    blocks: int = 3
    fc_widths: tuple[int, int] = (32, 1)
    block_strides: tuple[int, int, int] = (1, 2, 1)
    target: str = "se"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "fc_widths", tuple(int(c) for c in self.fc_widths))
        object.__setattr__(self, "block_strides", tuple(int(c) for c in self.block_strides))
        if len(self.block_strides) != 3 or any(s not in (1, 2) for s in self.block_strides):
            raise ModelError("block_strides must be three values, each 1 or 2")
        if self.blocks != 3 or len(self.block_channels) != 3:
            raise ModelError("the network has exactly three residual blocks")
        if len(self.fc_widths) != 2 or self.fc_widths[-1] != 1:
            raise ModelError("fc_widths must be two layers ending in a single output")
        if len(self.stem_channels) != 2:
            raise ModelError("the stem has exactly two convolutions")
        if self.target not in TARGETS:
            raise ModelError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.input_resolution < 4:
            raise ModelError("input_resolution too small")
        if min(self.stem_channels + self.block_channels + self.fc_widths) < 1:
            raise ModelError("channel widths must be positive")

    @property
    def feature_resolution(self) -> int:
        """Spatial size of the feature map fed to the attention layer."""
        r = self.input_resolution
        for _ in range(2):
            r = (r + 2 - 3) // 2 + 1
        for stride in self.block_strides:
            r = (r + 2 - 3) // stride + 1
        return r


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class BatchNorm:
    def __init__(self, channels: int, name: str):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{self.name}.running_mean", self.running_mean), (f"{self.name}.running_var", self.running_var)]


class ResidualBlock:
    """Pre-activation residual unit: ``skip(x) + conv(relu(bn(conv(relu(bn(x))))))``.

    The first convolution carries the block's stride. When the channel count
    or the stride changes the shape, the skip path is a strided 1x1 projection
    of the pre-activated input.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str, stride: int = 1):
        self.stride = stride
        self.name = name
        self.bn1 = BatchNorm(c_in, f"{name}.bn1")
        self.conv1 = Tensor(_he(rng, (c_out, c_in, 3, 3), 9 * c_in), requires_grad=True, name=f"{name}.conv1")
        self.bn2 = BatchNorm(c_out, f"{name}.bn2")
        self.conv2 = Tensor(_he(rng, (c_out, c_out, 3, 3), 9 * c_out), requires_grad=True, name=f"{name}.conv2")
        self.proj = None
        if c_in != c_out or stride != 1:
            self.proj = Tensor(_he(rng, (c_out, c_in, 1, 1), c_in), requires_grad=True, name=f"{name}.proj")

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        pre = T.relu(self.bn1(x, training))
        h = T.conv2d(pre, self.conv1, self.stride, 1)
        h = T.conv2d(T.relu(self.bn2(h, training)), self.conv2, 1, 1)
        skip = x if self.proj is None else T.conv2d(pre, self.proj, self.stride, 0)
        if skip.shape != h.shape:
            raise T.ShapeError(f"{self.name}: skip shape {skip.shape} does not match branch shape {h.shape}")
        return T.add(skip, h)

    def parameters(self) -> list[Tensor]:
        params = self.bn1.parameters() + [self.conv1] + self.bn2.parameters() + [self.conv2]
        return params + ([self.proj] if self.proj is not None else [])

    def buffers(self):
        return self.bn1.buffers() + self.bn2.buffers()


def residual_block(x: Tensor, block: ResidualBlock, training: bool = False) -> Tensor:
    return block(x, training)


def soft_attention_pool(features: Tensor, attention_kernel: Tensor) -> tuple[Tensor, Tensor]:
    """Attention-weighted spatial average of ``features[N, C, H, W]``.

    A 1x1 convolution scores each position, a softmax over the ``H*W``
    positions turns scores into weights, and the output is the weighted mean
    feature vector.

    Returns:
        ``(pooled[N, C], weights[N, H, W])``.
    """
    n, c, h, w = features.shape
    logits = T.conv2d(features, attention_kernel, 1, 0)
    weights = T.softmax(T.reshape(logits, (n, h * w)), axis=1)
    pooled = T.matmul(T.reshape(features, (n, c, h * w)), T.reshape(weights, (n, h * w, 1)))
    return T.reshape(pooled, (n, c)), T.reshape(weights, (n, h, w))


@dataclass
class ForwardResult:
    predictions: Tensor
    attention: Tensor


class AttentionResNet:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        s1, s2 = config.stem_channels
        self.stem1 = Tensor(_he(rng, (s1, 3, 3, 3), 27), requires_grad=True, name="stem.conv1")
        self.stem_bn = BatchNorm(s1, "stem.bn")
        self.stem2 = Tensor(_he(rng, (s2, s1, 3, 3), 9 * s1), requires_grad=True, name="stem.conv2")
        self.blocks = []
        c_in = s2
        for i, (c_out, stride) in enumerate(zip(config.block_channels, config.block_strides)):
            self.blocks.append(ResidualBlock(c_in, c_out, rng, f"block{i + 1}", stride))
            c_in = c_out
        self.final_bn = BatchNorm(c_in, "final.bn")
        self.attention = Tensor(_he(rng, (1, c_in, 1, 1), c_in), requires_grad=True, name="attention.conv")
        hidden = config.fc_widths[0]
        self.fc1_w = Tensor(_he(rng, (c_in, hidden), c_in), requires_grad=True, name="fc1.weight")
        self.fc1_b = Tensor(np.zeros(hidden), requires_grad=True, name="fc1.bias")
        self.fc2_w = Tensor(_he(rng, (hidden, 1), hidden), requires_grad=True, name="fc2.weight")
        self.fc2_b = Tensor(np.zeros(1), requires_grad=True, name="fc2.bias")

    # -- structure ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [self.stem1] + self.stem_bn.parameters() + [self.stem2]
        for b in self.blocks:
            params += b.parameters()
        params += self.final_bn.parameters() + [self.attention, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
        return [(p.name, p) for p in params]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        bufs = self.stem_bn.buffers()
        for b in self.blocks:
            bufs += b.buffers()
        return bufs + self.final_bn.buffers()

    def state(self) -> list[tuple[str, np.ndarray]]:
        """All persistent arrays in declaration order: parameters then buffers."""
        return [(n, p.data) for n, p in self.named_parameters()] + self.named_buffers()

    def copy_state(self) -> list[np.ndarray]:
        return [a.copy() for _, a in self.state()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        targets = self.state()
        if len(arrays) != len(targets):
            raise ModelError(f"state has {len(arrays)} arrays, model expects {len(targets)}")
        for (name, dst), src in zip(targets, arrays):
            if dst.shape != src.shape:
                raise ModelError(f"{name}: shape {src.shape} does not match {dst.shape}")
            dst[...] = src

    # -- computation -------------------------------------------------------

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        h = T.conv2d(x, self.stem1, 2, 1)
        h = T.conv2d(T.relu(self.stem_bn(h, training)), self.stem2, 2, 1)
        for block in self.blocks:
            h = block(h, training)
        return h

    def forward(self, batch: Tensor | np.ndarray, training: bool = False) -> ForwardResult:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        r = self.config.input_resolution
        if x.ndim != 4 or x.shape[1:] != (3, r, r):
            raise ModelError(f"expected input [N, 3, {r}, {r}], got {x.shape}")
        h = T.relu(self.final_bn(self.features(x, training), training))
        pooled, weights = soft_attention_pool(h, self.attention)
        z = T.relu(T.add(T.matmul(pooled, self.fc1_w), self.fc1_b))
        out = T.add(T.matmul(z, self.fc2_w), self.fc2_b)
        return ForwardResult(T.reshape(out, (x.shape[0],)), weights)

    __call__ = forward

    def predict(self, pixels: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode predictions for ``pixels[N, 3, R, R]``."""
        out = []
        with T.no_grad():
            for i in range(0, len(pixels), batch_size):
                out.append(self.forward(pixels[i:i + batch_size]).predictions.data)
        return np.concatenate(out) if out else np.zeros(0)

    def attention_maps(self, pixels: np.ndarray, batch_size: int = 128) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(pixels), batch_size):
                out.append(self.forward(pixels[i:i + batch_size]).attention.data)
        f = self.config.feature_resolution
        return np.concatenate(out) if out else np.zeros((0, f, f))

    # -- checkpoints -------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Serialize config and state.

        Layout: magic, u32 config length, config JSON (sorted keys), u32 array
        count, then per array: u16 name length, name, u8 ndim, i64 dims,
        float64 little-endian data.
        """
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        cfg = json.dumps(asdict(self.config), sort_keys=True, separators=(",", ":")).encode()
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)
        state = self.state()
        buf.write(struct.pack("<I", len(state)))
        for name, arr in state:
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttentionResNet":
        view = memoryview(data)
        if bytes(view[:8]) != CHECKPOINT_MAGIC:
            raise ModelError("not a model checkpoint (bad magic)")
        pos = 8
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        cfg = json.loads(bytes(view[pos:pos + n]))
        pos += n
        model = cls(ModelConfig(**cfg))
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        arrays = []
        expected = [name for name, _ in model.state()]
        for i in range(count):
            (ln,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + ln]).decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}q", view, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += 8 * size
            if i >= len(expected) or name != expected[i]:
                raise ModelError(f"checkpoint array {i} is {name!r}, expected {expected[i] if i < len(expected) else None!r}")
            arrays.append(arr)
        model.load_state(arrays)
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "AttentionResNet":
        return cls.from_bytes(Path(path).read_bytes())


def ensemble_predict(models: Sequence[AttentionResNet], pixels: np.ndarray) -> np.ndarray:
    """Mean of member predictions per image.

    Member outputs are sorted per image and folded with a running mean, which
    makes the result independent of member order and exactly equal to the
    shared value when all members agree.
    """
    if not models:
        raise ModelError("ensemble is empty")
    targets = {m.config.target for m in models}
    if len(targets) != 1:
        raise ModelError(f"ensemble mixes targets {sorted(targets)}")
    if len({m.config.input_resolution for m in models}) != 1:
        raise ModelError("ensemble mixes input resolutions")
    preds = np.sort(np.stack([m.predict(pixels) for m in models]), axis=0)
    mean = preds[0].copy()
    for k in range(1, len(preds)):
        mean += (preds[k] - mean) / (k + 1)
    return mean
