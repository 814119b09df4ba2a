"""Segmentation UNet, shape auto-encoder and conditional patch discriminator.

Parameters live in :class:`ModelParams` (an ordered name -> Tensor mapping plus
batch-norm running moments). The forward functions are plain functions of
``(params, input)`` so the same parameter set can be shared by concurrent
eval-mode passes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tensor

CHECKPOINT_MAGIC = b"CMBRGCK1"
CHECKPOINT_VERSION = 1

HEADS = ("multi", "binary")


@dataclass(frozen=True)
class SegNetConfig:
    num_classes: int = 3
    depth: int = 3
    base_channels: int = 8
    head: str = "multi"
    in_channels: int = 1

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1 if self.head == "multi" else 1


@dataclass(frozen=True)
class AutoEncoderConfig:
    """Shape auto-encoder; ``in_channels`` is the number of foreground mask channels."""

    in_channels: int = 3
    depth: int = 3
    code_channels: int = 32
    base_channels: int = 8
    head: str = "multi"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "binary" and self.in_channels != 1:
            raise ValueError("a binary auto-encoder takes a single mask channel")

    @property
    def out_channels(self) -> int:
        return self.in_channels + 1 if self.head == "multi" else 1


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Patch discriminator over (mask channels + 1 image channel)."""

    in_channels: int = 5
    depth: int = 3
    base_channels: int = 8


NetConfig = Union[SegNetConfig, AutoEncoderConfig, DiscriminatorConfig]
_KINDS = {"unet": SegNetConfig, "ae": AutoEncoderConfig, "disc": DiscriminatorConfig}


@dataclass
class ModelParams:
    kind: str
    config: NetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        bn = {}
        for k, s in self.bn.items():
            c = BatchNormState(len(s.mean))
            c.mean, c.var, c.initialized = s.mean.copy(), s.var.copy(), s.initialized
            bn[k] = c
        return ModelParams(self.kind, self.config, tensors, bn)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All arrays in declaration order: parameters, then running moments."""
        out = [(k, t.data) for k, t in self.tensors.items()]
        for k, s in self.bn.items():
            out.append((f"{k}.running_mean", s.mean))
            out.append((f"{k}.running_var", s.var))
        return out


class _Builder:
    def __init__(self, kind: str, config: NetConfig, seed: int):
        self.params = ModelParams(kind, config)
        self.rng = np.random.default_rng(seed)

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))
        self.params.tensors[f"{name}.w"] = Tensor(self.rng.uniform(-bound, bound, (cout, cin, k, k)), True)
        if bias:
            self.params.tensors[f"{name}.b"] = Tensor(np.zeros(cout), True)

    def bn(self, name: str, c: int) -> None:
        self.params.tensors[f"{name}.gamma"] = Tensor(np.ones(c), True)
        self.params.tensors[f"{name}.beta"] = Tensor(np.zeros(c), True)
        self.params.bn[name] = BatchNormState(c)

    def conv_bn(self, name: str, cin: int, cout: int) -> None:
        self.conv(name, cin, cout, 3, bias=False)
        self.bn(f"{name}.bn", cout)


# --------------------------------------------------------------------- build
def build_unet(cfg: SegNetConfig, seed: int) -> ModelParams:
    b = _Builder("unet", cfg, seed)
    widths = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
    cin = cfg.in_channels
    for i in range(cfg.depth):
        b.conv_bn(f"enc{i}.0", cin, widths[i])
        b.conv_bn(f"enc{i}.1", widths[i], widths[i])
        cin = widths[i]
    b.conv_bn("mid.0", cin, widths[-1])
    b.conv_bn("mid.1", widths[-1], widths[-1])
    cin = widths[-1]
    for i in reversed(range(cfg.depth)):
        b.conv_bn(f"dec{i}.0", cin + widths[i], widths[i])
        b.conv_bn(f"dec{i}.1", widths[i], widths[i])
        cin = widths[i]
    b.conv("head", cin, cfg.out_channels, 1)
    return b.params


def build_autoencoder(cfg: AutoEncoderConfig, seed: int) -> ModelParams:
    b = _Builder("ae", cfg, seed)
    widths = [cfg.base_channels * 2**i for i in range(cfg.depth)]
    cin = cfg.in_channels
    for i in range(cfg.depth):
        b.conv_bn(f"enc{i}", cin, widths[i])
        cin = widths[i]
    b.conv("code", cin, cfg.code_channels, 3)
    cin = cfg.code_channels
    for i in reversed(range(cfg.depth)):
        b.conv_bn(f"dec{i}", cin, widths[i])
        cin = widths[i]
    b.conv("head", cin, cfg.out_channels, 1)
    return b.params


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> ModelParams:
    b = _Builder("disc", cfg, seed)
    cin = cfg.in_channels
    for i in range(cfg.depth):
        cout = cfg.base_channels * 2**i
        b.conv(f"down{i}", cin, cout, 3)
        cin = cout
    b.conv("out", cin, 1, 3)
    return b.params


def build(kind: str, config: NetConfig, seed: int) -> ModelParams:
    return {"unet": build_unet, "ae": build_autoencoder, "disc": build_discriminator}[kind](config, seed)


# ------------------------------------------------------------------- forward
def _check_extent(x: Tensor, depth: int) -> None:
    h, w = x.shape[2:]
    m = 2**depth
    if h % m or w % m:
        raise ShapeError(f"spatial extent {h}x{w} is not divisible by 2^{depth}={m}")


def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeError(f"{what} expects {expected} input channels, got shape {x.shape}")


def _conv_bn_relu(p: ModelParams, name: str, x: Tensor, mode: str) -> Tensor:
    t = p.tensors
    y = ad.conv2d(x, t[f"{name}.w"], None, 1, 1)
    y = ad.batch_norm(y, t[f"{name}.bn.gamma"], t[f"{name}.bn.beta"], mode, p.bn[f"{name}.bn"])
    return ad.relu(y)


def _head(p: ModelParams, x: Tensor, head: str) -> Tensor:
    logits = ad.conv2d(x, p.tensors["head.w"], p.tensors["head.b"])
    return ad.softmax_channels(logits) if head == "multi" else ad.sigmoid(logits)


def forward_seg(params: ModelParams, x: Tensor, mode: str = "eval") -> Tensor:
    """Class probabilities: softmax over C+1 channels (multi) or one sigmoid channel."""
    cfg: SegNetConfig = params.config
    _check_channels(x, cfg.in_channels, "segmentation network")
    _check_extent(x, cfg.depth)
    skips = []
    h = x
    for i in range(cfg.depth):
        h = _conv_bn_relu(params, f"enc{i}.0", h, mode)
        h = _conv_bn_relu(params, f"enc{i}.1", h, mode)
        skips.append(h)
        h = ad.maxpool2(h)
    h = _conv_bn_relu(params, "mid.0", h, mode)
    h = _conv_bn_relu(params, "mid.1", h, mode)
    for i in reversed(range(cfg.depth)):
        h = ad.concat_channels(ad.upsample2(h), skips[i])
        h = _conv_bn_relu(params, f"dec{i}.0", h, mode)
        h = _conv_bn_relu(params, f"dec{i}.1", h, mode)
    return _head(params, h, cfg.head)


def encode(params: ModelParams, y: Tensor, mode: str = "eval") -> Tensor:
    """Bottleneck feature map of a (foreground-channel) mask batch."""
    cfg: AutoEncoderConfig = params.config
    _check_channels(y, cfg.in_channels, "shape encoder")
    _check_extent(y, cfg.depth)
    h = y
    for i in range(cfg.depth):
        h = ad.maxpool2(_conv_bn_relu(params, f"enc{i}", h, mode))
    return ad.conv2d(h, params.tensors["code.w"], params.tensors["code.b"], 1, 1)


def decode(params: ModelParams, code: Tensor, mode: str = "eval") -> Tensor:
    cfg: AutoEncoderConfig = params.config
    _check_channels(code, cfg.code_channels, "shape decoder")
    h = code
    for i in reversed(range(cfg.depth)):
        h = _conv_bn_relu(params, f"dec{i}", ad.upsample2(h), mode)
    return _head(params, h, cfg.head)


def reconstruct(params: ModelParams, y: Tensor, mode: str = "eval") -> Tensor:
    return decode(params, encode(params, y, mode), mode)


def discriminate(params: ModelParams, y: Tensor, x: Tensor) -> Tensor:
    """Likelihood map in (0, 1) that mask ``y`` is a real annotation of image ``x``."""
    cfg: DiscriminatorConfig = params.config
    h = ad.concat_channels(y, x)
    _check_channels(h, cfg.in_channels, "discriminator")
    _check_extent(h, cfg.depth)
    t = params.tensors
    for i in range(cfg.depth):
        h = ad.leaky_relu(ad.conv2d(h, t[f"down{i}.w"], t[f"down{i}.b"], 2, 1), 0.2)
    return ad.sigmoid(ad.conv2d(h, t["out.w"], t["out.b"], 1, 1))


# ---------------------------------------------------------------- checkpoint
def _header(params: ModelParams) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "config": asdict(params.config),
        "arrays": [[name, list(arr.shape)] for name, arr in params.state_arrays()],
        "bn_initialized": {k: s.initialized for k, s in params.bn.items()},
    }


def dumps_checkpoint(params: ModelParams, extra: dict | None = None) -> bytes:
    header = _header(params)
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for _, arr in params.state_arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> tuple[ModelParams, dict]:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    kind = header["kind"]
    config = _KINDS[kind](**header["config"])
    params = build(kind, config, seed=0)
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ValueError("checkpoint payload length does not match its header")
    for name, t in params.tensors.items():
        t.data = arrays[name]
    for name, s in params.bn.items():
        s.mean = arrays[f"{name}.running_mean"]
        s.var = arrays[f"{name}.running_var"]
        s.initialized = header["bn_initialized"][name]
    return params, header.get("extra", {})


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(params, extra))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    return loads_checkpoint(Path(path).read_bytes())
