"""Encoder / two-decoder convolutional network.

One shared encoder downsamples with stride-2 convolutions; two
mirrored decoders (reflectance, shading) upsample bilinearly with skip
concatenation from the matching encoder level, the innermost skip
being the input image itself. Both heads end in softplus so the
outputs stay strictly positive, as I = R * S presumes. All blocks are
conv + batch norm + ReLU; block convolutions carry no bias because the
following batch norm would cancel it (its gradient would be
identically zero), only the 1x1 head convolutions do.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from intrinsic import autodiff
from intrinsic.autodiff import Parameter, RunningStats, Tensor
from intrinsic.errors import ConfigError, DimensionError, FileFormatError

CHECKPOINT_MAGIC = b"INTRK1"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    levels: int = 4
    base_channels: int = 16
    kernel: int = 3
    input_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.input_channels != 3:
            raise ConfigError(f"input_channels must be 3, got {self.input_channels}")


class _ConvBlock:
    """conv (no bias) + batch norm + relu."""

    def __init__(self, rng, name, in_ch, out_ch, kernel, stride):
        std = np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = Parameter(
            rng.normal(0.0, std, (out_ch, in_ch, kernel, kernel)), f"{name}.conv.weight"
        )
        self.gamma = Parameter(np.ones((1, out_ch, 1, 1)), f"{name}.bn.gamma")
        self.beta = Parameter(np.zeros((1, out_ch, 1, 1)), f"{name}.bn.beta")
        self.running = RunningStats(out_ch)
        self.name = name
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = autodiff.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        y = autodiff.batch_norm2d(y, self.gamma, self.beta, self.running, training)
        return autodiff.activation(y, "relu")

    def parameters(self):
        return [self.weight, self.gamma, self.beta]

    def buffers(self):
        return [
            (f"{self.name}.bn.running_mean", self.running.mean),
            (f"{self.name}.bn.running_var", self.running.var),
        ]


class _Head:
    """1x1 conv with bias + softplus."""

    def __init__(self, rng, name, in_ch, out_ch):
        std = np.sqrt(2.0 / in_ch)
        self.weight = Parameter(rng.normal(0.0, std, (out_ch, in_ch, 1, 1)), f"{name}.weight")
        self.bias = Parameter(np.zeros((1, out_ch, 1, 1)), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        y = autodiff.conv2d(x, self.weight, bias=self.bias, stride=1, padding=0)
        return autodiff.activation(y, "softplus")

    def parameters(self):
        return [self.weight, self.bias]


class IntrinsicNet:
    def __init__(self, config: NetConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(config.seed))
        k = config.kernel
        enc_ch = [config.base_channels * (1 << i) for i in range(config.levels)]

        self.encoder = []
        in_ch = config.input_channels
        for i, out_ch in enumerate(enc_ch):
            self.encoder.append(_ConvBlock(rng, f"encoder.block{i}", in_ch, out_ch, k, 2))
            in_ch = out_ch

        self.decoders = {}
        self.heads = {}
        for branch, head_ch in (("reflectance", 3), ("shading", 1)):
            blocks = []
            cur = enc_ch[-1]
            for i in range(config.levels):
                depth = config.levels - 2 - i
                skip_ch = enc_ch[depth] if depth >= 0 else config.input_channels
                out_ch = enc_ch[depth] if depth >= 0 else config.base_channels
                blocks.append(
                    _ConvBlock(rng, f"{branch}.block{i}", cur + skip_ch, out_ch, k, 1)
                )
                cur = out_ch
            self.decoders[branch] = blocks
            self.heads[branch] = _Head(rng, f"{branch}.head", cur, head_ch)

    def parameters(self) -> list:
        params = []
        for block in self.encoder:
            params.extend(block.parameters())
        for branch in ("reflectance", "shading"):
            for block in self.decoders[branch]:
                params.extend(block.parameters())
            params.extend(self.heads[branch].parameters())
        return params

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> list:
        bufs = []
        for block in self.encoder:
            bufs.extend(block.buffers())
        for branch in ("reflectance", "shading"):
            for block in self.decoders[branch]:
                bufs.extend(block.buffers())
        return bufs

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: Tensor, training: bool = False):
        """Input (N, 3, H, W) to reflectance (N, 3, H, W), shading (N, 1, H, W)."""
        _, c, h, w = x.shape
        if c != self.config.input_channels:
            raise DimensionError(f"forward: expected {self.config.input_channels} channels, got {c}")
        multiple = 1 << self.config.levels
        if h % multiple or w % multiple:
            raise DimensionError(
                f"forward: spatial dims {h}x{w} must be divisible by {multiple}"
            )
        skips = []
        cur = x
        for block in self.encoder:
            cur = block(cur, training)
            skips.append(cur)

        outputs = {}
        for branch in ("reflectance", "shading"):
            cur = skips[-1]
            for i, block in enumerate(self.decoders[branch]):
                cur = autodiff.bilinear_upsample2x(cur)
                depth = self.config.levels - 2 - i
                skip = skips[depth] if depth >= 0 else x
                cur = autodiff.concat_channels(cur, skip)
                cur = block(cur, training)
            outputs[branch] = self.heads[branch](cur)
        return outputs["reflectance"], outputs["shading"]


def save(net: IntrinsicNet, path: str) -> None:
    """Checkpoint: magic, JSON manifest, raw little-endian float64 buffers."""
    entries = []
    blobs = []
    for p in net.parameters():
        entries.append({"name": p.name, "shape": list(p.shape), "dtype": "float64", "kind": "param"})
        blobs.append(p.data)
    for name, arr in net.buffers():
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64", "kind": "buffer"})
        blobs.append(arr)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "entries": entries,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(len(payload).to_bytes(8, "little"))
            f.write(payload)
            for blob in blobs:
                f.write(np.ascontiguousarray(blob, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> IntrinsicNet:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 8:
        raise FileFormatError(f"{path}: truncated before manifest length")
    mlen = int.from_bytes(data[offset : offset + 8], "little")
    offset += 8
    if len(data) < offset + mlen:
        raise FileFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[offset : offset + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: unreadable manifest: {exc}") from exc
    offset += mlen
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(
            f"{path}: unsupported checkpoint version {version!r} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        config = NetConfig(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise FileFormatError(f"{path}: invalid config block: {exc}") from exc

    net = IntrinsicNet(config)
    targets = {p.name: p.data for p in net.parameters()}
    targets.update({name: arr for name, arr in net.buffers()})
    entries = manifest.get("entries", [])
    if {e["name"] for e in entries} != set(targets):
        raise FileFormatError(f"{path}: checkpoint entries do not match architecture")
    for entry in entries:
        arr = targets[entry["name"]]
        if list(arr.shape) != entry["shape"]:
            raise FileFormatError(
                f"{path}: entry {entry['name']} has shape {entry['shape']}, "
                f"expected {list(arr.shape)}"
            )
        nbytes = arr.size * 8
        if len(data) < offset + nbytes:
            raise FileFormatError(f"{path}: truncated at entry {entry['name']}")
        arr[...] = np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(arr.shape)
        offset += nbytes
    if offset != len(data):
        raise FileFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return net
