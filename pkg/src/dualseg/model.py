"""Mobile U-Net builders with optional Mean-Max attention blocks.

The encoder is a truncated inverted-residual stack (stem + blocks 0..13),
the decoder four upsample/concat/conv stages and a full-resolution head.
Stage 1 of the pipeline uses the plain network, stage 2 the same network
with Mean-Max blocks at the bottleneck and after each decoder stage.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from .tensor import ops
from .tensor.core import DEFAULT_DTYPE, Tensor

CHECKPOINT_MAGIC = b"M3BU"
CHECKPOINT_VERSION = 1

# (expansion t, out channels c, repeats n, first stride s); 14 blocks, 0..13
ENCODER_BLOCKS: Tuple[Tuple[int, int, int, int], ...] = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 1, 2),
)
DECODER_FILTERS = (128, 64, 32, 16)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class InvertedResidualConfig:
    expansion: int
    out_channels: int
    repeats: int
    stride: int

    def __post_init__(self):
        if self.expansion < 1 or self.out_channels < 1 or self.repeats < 1 or self.stride not in (1, 2):
            raise ValueError(f"invalid inverted-residual config {self}")


@dataclass
class ModelConfig:
    in_channels: int = 3
    input_size: Tuple[int, int] = (256, 256)
    use_mm_block: bool = False
    decoder_filters: Tuple[int, ...] = DECODER_FILTERS
    stem_channels: int = 32
    decoder_convs: int = 2
    blocks: Tuple[Tuple[int, int, int, int], ...] = ENCODER_BLOCKS
    dtype: str = "float32"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.decoder_filters = tuple(int(v) for v in self.decoder_filters)
        self.blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        if len(self.decoder_filters) != 4:
            raise ValueError("decoder needs exactly 4 filter counts")
        h, w = self.input_size
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise ValueError(f"input size {self.input_size} must be divisible by 32")
        if self.decoder_convs < 1:
            raise ValueError("decoder stages need at least one conv")
        if self.in_channels < 1 or self.stem_channels < 1:
            raise ValueError("channel counts must be positive")
        for b in self.blocks:
            InvertedResidualConfig(*b)


# --------------------------------------------------------------------------
# module plumbing
# --------------------------------------------------------------------------

class Module:
    """Minimal container that tracks parameters, buffers and children by name."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for k, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{k}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for k, v in self._buffers.items():
            yield prefix + k, v
        for k, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{k}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for c in self._children.values():
            yield from c.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, bias: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        self.weight = self.add_param("weight", _he(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, c: int, dtype=DEFAULT_DTYPE, momentum: float = ops.BN_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.gamma = self.add_param("gamma", np.ones(c, dtype))
        self.beta = self.add_param("beta", np.zeros(c, dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(c, dtype))
        self.running_var = self.add_buffer("running_var", np.ones(c, dtype))

        # when a list, train-mode calls append (mean, var, count) instead of updating running stats
        self.collect: Optional[list] = None

    def forward(self, x):
        if self.training and self.collect is not None:
            self.collect.append((x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3)), x.shape[0] * x.shape[2] * x.shape[3]))
            return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, True, 1.0)
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum)


class ConvBN(Module):
    """Bias-free conv, batchnorm, optional ReLU6."""

    def __init__(self, rng, cin, cout, k, stride=1, act=True, depthwise=False, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.act, self.depthwise, self.stride, self.pad = act, depthwise, stride, k // 2
        if depthwise:
            self.weight = self.add_param("weight", _he(rng, (cin, 1, k, k), k * k, dtype))
        else:
            self.weight = self.add_param("weight", _he(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bn = self.add_child("bn", BatchNorm(cout, dtype))

    def forward(self, x):
        if self.depthwise:
            y = ops.depthwise_conv2d(x, self.weight, self.stride, self.pad)
        else:
            y = ops.conv2d(x, self.weight, None, self.stride, self.pad)
        y = self.bn(y)
        return ops.relu6(y) if self.act else y


class InvertedResidual(Module):
    def __init__(self, rng, cin: int, cout: int, stride: int, expansion: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        hidden = cin * expansion
        self.use_residual = stride == 1 and cin == cout
        self.expand = self.add_child("expand", ConvBN(rng, cin, hidden, 1, dtype=dtype)) if expansion != 1 else None
        self.depthwise = self.add_child(
            "depthwise", ConvBN(rng, hidden, hidden, 3, stride, depthwise=True, dtype=dtype)
        )
        self.project = self.add_child("project", ConvBN(rng, hidden, cout, 1, act=False, dtype=dtype))

    def forward(self, x):
        y = self.expand(x) if self.expand is not None else x
        y = self.project(self.depthwise(y))
        return ops.add(y, x) if self.use_residual else y


class MeanMaxBlock(Module):
    """Mean-Max channel-pooling attention.

    Pathway one pools the feature map across channels (mean and max), stacks
    the two maps and runs a 3x3 conv down to one channel.  Pathway two is a
    pointwise conv to one channel followed by a sigmoid.  Their elementwise
    product is expanded back to ``C`` channels with a pointwise conv, passed
    through a sigmoid and added to the input.
    """

    def __init__(self, rng, channels: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spatial = self.add_child("spatial", Conv(rng, 2, 1, 3, dtype=dtype))
        self.reduce = self.add_child("reduce", Conv(rng, channels, 1, 1, dtype=dtype))
        self.expand = self.add_child("expand", Conv(rng, 1, channels, 1, dtype=dtype))

    def forward(self, x):
        pooled = ops.concat_channels(ops.channel_mean(x), ops.channel_max(x))
        d = self.spatial(pooled)
        h = ops.sigmoid(self.reduce(x))
        fused = ops.mul(d, h)
        return ops.add(x, ops.sigmoid(self.expand(fused)))


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.stem = self.add_child("stem", ConvBN(rng, cfg.in_channels, cfg.stem_channels, 3, 2, dtype=dtype))
        self.blocks: List[InvertedResidual] = []
        self.tap_index: Dict[int, int] = {}
        cin, stride = cfg.stem_channels, 2
        idx = 0
        for t, c, n, s in cfg.blocks:
            for r in range(n):
                st = s if r == 0 else 1
                stride *= st
                blk = InvertedResidual(rng, cin, c, st, t, dtype=dtype)
                self.blocks.append(self.add_child(f"block{idx}", blk))
                if stride in (4, 8, 16):
                    self.tap_index[stride] = idx
                cin = c
                idx += 1
        if stride != 32 or set(self.tap_index) != {4, 8, 16}:
            raise ValueError("encoder block config must reach stride 32 with outputs at strides 4, 8 and 16")
        self.out_channels = cin
        self.tap_channels = {2: cfg.stem_channels}
        for s, i in self.tap_index.items():
            self.tap_channels[s] = self.blocks[i].project.bn.gamma.shape[0]

    def forward(self, x):
        y = self.stem(x)
        taps = {2: y}
        wanted = {i: s for s, i in self.tap_index.items()}
        for i, blk in enumerate(self.blocks):
            y = blk(y)
            if i in wanted:
                taps[wanted[i]] = y
        return y, taps


class DecoderStage(Module):
    def __init__(self, rng, cin: int, skip: int, cout: int, mm: bool, n_convs: int = 2, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.convs = [
            self.add_child(f"conv{i}", ConvBN(rng, cin + skip if i == 0 else cout, cout, 3, dtype=dtype))
            for i in range(n_convs)
        ]
        self.mm = self.add_child("mm", MeanMaxBlock(rng, cout, dtype)) if mm else None

    def forward(self, x, skip):
        y = ops.concat_channels(ops.upsample_bilinear(x), skip)
        for conv in self.convs:
            y = conv(y)
        return self.mm(y) if self.mm is not None else y


class MobileUNet(Module):
    """Encoder-decoder segmentation network producing per-pixel probabilities."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(seed)
        self.encoder = self.add_child("encoder", Encoder(rng, cfg, dtype))
        enc = self.encoder
        self.bottleneck_mm = (
            self.add_child("bottleneck_mm", MeanMaxBlock(rng, enc.out_channels, dtype)) if cfg.use_mm_block else None
        )
        self.stages: List[DecoderStage] = []
        cin = enc.out_channels
        for i, (stride, f) in enumerate(zip((16, 8, 4, 2), cfg.decoder_filters)):
            st = DecoderStage(rng, cin, enc.tap_channels[stride], f, cfg.use_mm_block, cfg.decoder_convs, dtype)
            self.stages.append(self.add_child(f"decoder{i}", st))
            cin = f
        last = cfg.decoder_filters[-1]
        self.head_conv = self.add_child("head_conv", ConvBN(rng, cin, last, 3, dtype=dtype))
        self.head_out = self.add_child("head_out", Conv(rng, last, 1, 1, dtype=dtype))
        self.frozen: Set[str] = set()

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ValueError(f"model expects {self.config.in_channels} input channels, got {c}")
        if h % 32 or w % 32:
            raise ValueError(f"input dims {h}x{w} must be divisible by 32")
        y, taps = self.encoder(x)
        if self.bottleneck_mm is not None:
            y = self.bottleneck_mm(y)
        for stage, stride in zip(self.stages, (16, 8, 4, 2)):
            y = stage(y, taps[stride])
        y = self.head_conv(ops.upsample_bilinear(y))
        return ops.sigmoid(self.head_out(y))

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def state(self) -> Dict[str, np.ndarray]:
        """All persistent arrays: parameters plus batchnorm running statistics."""
        out = {k: v.data for k, v in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def mm_blocks(self) -> List[MeanMaxBlock]:
        return [m for m in self.modules() if isinstance(m, MeanMaxBlock)]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode probabilities for an ``N x C x H x W`` array."""
        was = self.training
        self.eval()
        try:
            out = self.forward(Tensor(np.asarray(x, dtype=self.config.dtype))).data
        finally:
            self.train(was)
        return out


def build_model(cfg: ModelConfig, seed: int = 0) -> MobileUNet:
    return MobileUNet(cfg, seed)


def param_count(model: Optional[Module]) -> int:
    """Number of trainable scalars (batchnorm running statistics excluded)."""
    if model is None:
        return 0
    return int(sum(t.data.size for _, t in model.named_parameters()))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: MobileUNet, path) -> None:
    """Write parameters and running statistics atomically (temp file + rename)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, 0)]
    count = 0
    for name, arr in model.state().items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
        count += 1
    chunks[1] = struct.pack("<II", CHECKPOINT_VERSION, count)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise CheckpointError("checkpoint truncated")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + nlen + 1 > len(buf):
                raise struct.error
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise struct.error
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error:
        raise CheckpointError("checkpoint truncated") from None
    return tensors


def load_checkpoint(path, model: MobileUNet, encoder_only: bool = False) -> None:
    """Load tensors by name; ``encoder_only`` restricts to ``encoder.*`` entries."""
    stored = read_checkpoint(path)
    targets: Dict[str, np.ndarray] = {}
    for name, t in model.named_parameters():
        targets[name] = t.data
    targets.update(dict(model.named_buffers()))
    if encoder_only:
        targets = {k: v for k, v in targets.items() if k.startswith("encoder.")}
        stored = {k: v for k, v in stored.items() if k.startswith("encoder.")}
    missing = sorted(set(targets) - set(stored))
    if missing:
        raise CheckpointError(f"checkpoint missing tensor {missing[0]}")
    unexpected = sorted(set(stored) - set(targets))
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected tensor {unexpected[0]}")
    for name, dst in targets.items():
        src = stored[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {src.shape}, model {dst.shape}")
    for name, dst in targets.items():
        dst[...] = stored[name]
