"""Network assembly: shared conv trunk, three tapped branches, pyramid
pooling, and a fully-connected sigmoid head over the concatenated bin scores.

Each trunk block is conv (pad = kernel//2) -> relu -> 2x2 max pool. Three
taps at increasing depth feed per-branch 3x3 transform convolutions whose
relu'd outputs are the activation maps used for localization.
"""

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import layers
from .kvfile import format_kv, parse_kv
from .layers import PyramidSpec, fspp_bin_count
from .tensor import (
    FormatError,
    ShapeError,
    Tensor,
    concat,
    tensor_from_bytes,
    tensor_to_bytes,
)

MAGIC_CHECKPOINT = b"WPAL-CKPT\0"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvBlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class BranchSpec:
    channels: int
    pyramid: PyramidSpec


@dataclass(frozen=True)
class ModelConfig:
    trunk: tuple
    taps: tuple  # three 1-based trunk block indices, strictly increasing
    branches: tuple
    num_attributes: int
    seed: int = 0

    def __post_init__(self):
        if len(self.taps) != 3:
            raise ValueError(f"exactly three taps required, got {len(self.taps)}")
        if len(self.branches) != 3:
            raise ValueError(f"exactly three branches required, got {len(self.branches)}")
        if not all(1 <= t <= len(self.trunk) for t in self.taps):
            raise ValueError(f"tap indices {self.taps} out of trunk range 1..{len(self.trunk)}")
        if not all(a < b for a, b in zip(self.taps, self.taps[1:])):
            raise ValueError(f"tap indices must be strictly increasing, got {self.taps}")
        if self.num_attributes < 1:
            raise ValueError("num_attributes must be >= 1")

    @property
    def total_bins(self):
        return fspp_bin_count((b.channels, b.pyramid) for b in self.branches)

    def bin_branch_index(self):
        """1-based branch index of every global bin (channel-major layout)."""
        parts = [
            np.full(b.channels * b.pyramid.bins_per_channel, j + 1, dtype=np.int64)
            for j, b in enumerate(self.branches)
        ]
        return np.concatenate(parts)


def default_config(num_attributes=8, seed=42):
    """Desk-scale default: 4-block trunk tapped after blocks 2/3/4."""
    return ModelConfig(
        trunk=tuple(ConvBlockSpec(c) for c in (16, 32, 64, 128)),
        taps=(2, 3, 4),
        branches=(
            BranchSpec(32, PyramidSpec.two_level(3, 3)),
            BranchSpec(32, PyramidSpec.two_level(3, 3)),
            BranchSpec(64, PyramidSpec.two_level(3, 1)),
        ),
        num_attributes=num_attributes,
        seed=seed,
    )


# -- config text format ------------------------------------------------------


def _format_grid(spec):
    return "global" if spec.grid is None else f"{spec.grid[0]}x{spec.grid[1]}"


def _parse_grid(text):
    text = text.strip()
    if text == "global":
        return PyramidSpec.single()
    try:
        rows, cols = (int(p) for p in text.split("x"))
    except ValueError:
        raise FormatError(f"bad grid {text!r}, expected ROWSxCOLS or 'global'") from None
    return PyramidSpec.two_level(rows, cols)


def config_to_text(config):
    trunk = ", ".join(f"{b.out_channels}:{b.kernel}:{b.stride}" for b in config.trunk)
    return format_kv(
        [
            ("trunk", trunk),
            ("taps", ", ".join(str(t) for t in config.taps)),
            ("branch_channels", ", ".join(str(b.channels) for b in config.branches)),
            ("branch_grids", ", ".join(_format_grid(b.pyramid) for b in config.branches)),
            ("num_attributes", str(config.num_attributes)),
            ("seed", str(config.seed)),
        ]
    )


def config_from_text(text):
    kv = parse_kv(text)
    required = {"trunk", "taps", "branch_channels", "branch_grids", "num_attributes", "seed"}
    missing = required - kv.keys()
    if missing:
        raise FormatError(f"model config missing keys: {sorted(missing)}")
    try:
        trunk = []
        for item in kv["trunk"].split(","):
            ch, k, s = (int(p) for p in item.strip().split(":"))
            trunk.append(ConvBlockSpec(ch, k, s))
        taps = tuple(int(t) for t in kv["taps"].split(","))
        channels = [int(c) for c in kv["branch_channels"].split(",")]
        grids = [_parse_grid(g) for g in kv["branch_grids"].split(",")]
        num_attributes = int(kv["num_attributes"])
        seed = int(kv["seed"])
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"model config: {exc}") from None
    if len(channels) != len(grids):
        raise FormatError("branch_channels and branch_grids disagree in length")
    branches = tuple(BranchSpec(c, g) for c, g in zip(channels, grids))
    try:
        return ModelConfig(tuple(trunk), taps, branches, num_attributes, seed)
    except ValueError as exc:
        raise FormatError(f"model config: {exc}") from None


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


# -- parameters --------------------------------------------------------------


@dataclass
class ModelState:
    """Learnable tensors keyed by stable names, plus the generating config."""

    config: ModelConfig
    params: dict = field(default_factory=dict)

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# Uniform bound gain that keeps activation variance steady through a
# relu-following convolution (Var(w) = 2/fan_in).
_RELU_GAIN = np.sqrt(6.0)


def build(config):
    """Initialize all parameters from the config seed.

    Weights are fan-in-scaled uniform (relu-feeding convolutions use the
    variance-preserving sqrt(6/fan_in) bound), biases zero; the
    fully-connected input width equals the total bin count.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    in_ch = 3
    for i, block in enumerate(config.trunk, start=1):
        shape = (block.out_channels, in_ch, block.kernel, block.kernel)
        params[f"trunk.{i}.weight"] = _uniform(rng, shape, in_ch * block.kernel**2, _RELU_GAIN)
        params[f"trunk.{i}.bias"] = Tensor(np.zeros(block.out_channels), requires_grad=True)
        in_ch = block.out_channels
    for j, branch in enumerate(config.branches, start=1):
        tap_ch = config.trunk[config.taps[j - 1] - 1].out_channels
        shape = (branch.channels, tap_ch, 3, 3)
        params[f"branch.{j}.weight"] = _uniform(rng, shape, tap_ch * 9, _RELU_GAIN)
        params[f"branch.{j}.bias"] = Tensor(np.zeros(branch.channels), requires_grad=True)
    width = config.total_bins
    params["fc.weight"] = _uniform(rng, (config.num_attributes, width), width)
    params["fc.bias"] = Tensor(np.zeros(config.num_attributes), requires_grad=True)
    return ModelState(config=config, params=params)


class ForwardResult(NamedTuple):
    """Sigmoid attribute scores (in-graph), per-branch pooled detections,
    and the per-branch activation maps feeding the pooling layers."""

    prediction: Tensor
    detections: list
    activation_maps: list


def forward(state, image):
    """Run one image through the network.

    The prediction length is always ``config.num_attributes``; the spatial
    size only has to keep every trunk block's map non-empty, which is
    checked per block rather than assumed.
    """
    config = state.config
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if x.data.ndim != 3 or x.data.shape[0] != 3:
        raise ShapeError(f"forward: expected a 3×H×W image, got {x.data.shape}")
    p = state.params
    taps = {}
    for i, block in enumerate(config.trunk, start=1):
        C, H, W = x.data.shape
        pad = block.kernel // 2
        if block.kernel > H + 2 * pad or block.kernel > W + 2 * pad or H < 2 or W < 2:
            raise ShapeError(f"forward: input too small at trunk block {i} ({H}x{W})")
        x = layers.conv2d(x, p[f"trunk.{i}.weight"], stride=block.stride, pad=pad)
        x = layers.channel_bias_add(x, p[f"trunk.{i}.bias"])
        x = layers.relu(x)
        if x.data.shape[1] < 2 or x.data.shape[2] < 2:
            raise ShapeError(
                f"forward: map shrank to {x.data.shape[1]}x{x.data.shape[2]} "
                f"before the pool of trunk block {i}"
            )
        x = layers.maxpool2x2(x)
        if i in config.taps:
            taps[i] = x

    detections = []
    activation_maps = []
    score_parts = []
    for j, branch in enumerate(config.branches, start=1):
        t = taps[config.taps[j - 1]]
        a = layers.conv2d(t, p[f"branch.{j}.weight"], stride=1, pad=1)
        a = layers.channel_bias_add(a, p[f"branch.{j}.bias"])
        a = layers.relu(a)
        pooled = layers.fspp_forward(a, branch.pyramid)
        activation_maps.append(a)
        detections.append(pooled)
        score_parts.append(pooled.scores)

    feat = concat(score_parts).reshape((config.total_bins, 1))
    logits = (p["fc.weight"] @ feat) + p["fc.bias"].reshape((config.num_attributes, 1))
    pred = layers.sigmoid(logits).reshape((config.num_attributes,))
    return ForwardResult(pred, detections, activation_maps)


# -- checkpoint archive --------------------------------------------------------


def save_checkpoint(state, path, extras=None):
    """Write an indexed archive of named WPAL-TNSR blobs plus the config.

    ``extras`` may carry additional named tensors (e.g. optimizer state);
    they live in the same index and are ignored by ``load``.
    """
    entries = list(state.params.items())
    if extras:
        entries += sorted(extras.items())
    blobs = [(name, tensor_to_bytes(t)) for name, t in entries]
    index = b""
    offset = 0
    for name, blob in blobs:
        raw = name.encode("utf-8")
        index += struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", offset, len(blob))
        offset += len(blob)
    config_bytes = config_to_text(state.config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(blobs)))
        fh.write(index)
        for _, blob in blobs:
            fh.write(blob)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Load a checkpoint; returns (ModelState, extras dict).

    Rejects bad magic/version, truncation, and any model tensor whose shape
    disagrees with the embedded config.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC_CHECKPOINT), "magic") != MAGIC_CHECKPOINT:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = config_from_text(_read_exact(fh, clen, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        index = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            offset, length = struct.unpack("<QQ", _read_exact(fh, 16, "index entry"))
            index.append((name, offset, length))
        payload = fh.read()

    tensors = {}
    for name, offset, length in index:
        if offset + length > len(payload):
            raise FormatError(f"checkpoint truncated: entry {name!r} exceeds payload")
        tensors[name] = tensor_from_bytes(payload[offset : offset + length])

    reference = build(config)
    params = {}
    for name, ref in reference.params.items():
        if name not in tensors:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        t = tensors.pop(name)
        if t.data.shape != ref.data.shape:
            raise FormatError(
                f"checkpoint parameter {name!r} has shape {t.data.shape}, "
                f"config implies {ref.data.shape}"
            )
        t.requires_grad = True
        params[name] = t
    state = ModelState(config=config, params=params)
    return state, tensors
