"""Residual backbone, embedding/classifier heads, checkpoints and head transfer.

The backbone is a ResNet-style stack without batch normalization: each conv
is followed by a learnable per-channel scale and shift.  There is no pooling
between the stem and the first residual stage.  Features are the global
average of the last stage, so their width does not depend on input size.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    IncompatibleCheckpointError,
)
from .losses import ProxySet
from .tensorcore import Tensor

HEAD_KINDS = ("embedding", "classifier")


@dataclass(frozen=True)
class ArchSpec:
    stage_blocks: tuple[int, ...] = (1, 1)
    stage_widths: tuple[int, ...] = (8, 16)
    stem_width: int | None = None
    stem_kernel: int = 3
    stem_stride: int = 1
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if not self.stage_blocks or len(self.stage_blocks) != len(self.stage_widths):
            raise ConfigError("arch needs >= 1 stage and one width per stage")
        if min(self.stage_blocks) < 1 or min(self.stage_widths) < 1:
            raise ConfigError(f"block counts and widths must be >= 1: {self}")
        if self.stem_width is not None and self.stem_width < 1:
            raise ConfigError("stem_width must be >= 1")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError("stem_kernel must be a positive odd integer")
        if self.stem_stride < 1 or self.in_channels < 1:
            raise ConfigError("stem_stride and in_channels must be >= 1")

    @property
    def stem_channels(self) -> int:
        return self.stem_width if self.stem_width is not None else self.stage_widths[0]

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


ARCH_PRESETS = {
    "tiny": ArchSpec((1, 1), (8, 16)),
    "desk": ArchSpec((1, 1), (16, 32), stem_stride=2),
    "resnet34": ArchSpec((3, 4, 6, 3), (64, 128, 256, 512), stem_width=64, stem_kernel=7, stem_stride=2),
}


class Backbone:
    """Feature extractor; ``params`` maps dotted names to trainable tensors."""

    def __init__(self, arch: ArchSpec, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def _affine(self, h: Tensor, prefix: str) -> Tensor:
        c = h.shape[1]
        scale = tc.reshape(self.params[prefix + ".scale"], (1, c, 1, 1))
        shift = tc.reshape(self.params[prefix + ".shift"], (1, c, 1, 1))
        return h * scale + shift

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ContractError(f"expected input B×{self.arch.in_channels}×H×W, got {x.shape}")
        a = self.arch
        p = self.params
        h = tc.conv2d(x, p["stem.conv.weight"], stride=a.stem_stride, padding=a.stem_kernel // 2)
        h = tc.relu(self._affine(h, "stem.affine"))
        for s, blocks in enumerate(a.stage_blocks):
            for b in range(blocks):
                name = f"stage{s}.block{b}"
                stride = 2 if (s > 0 and b == 0) else 1
                r = tc.conv2d(h, p[name + ".conv1.weight"], stride=stride, padding=1)
                r = tc.relu(self._affine(r, name + ".affine1"))
                r = tc.conv2d(r, p[name + ".conv2.weight"], stride=1, padding=1)
                r = self._affine(r, name + ".affine2")
                if name + ".shortcut.weight" in p:
                    sc = tc.conv2d(h, p[name + ".shortcut.weight"], stride=stride, padding=0)
                    sc = self._affine(sc, name + ".shortcut_affine")
                else:
                    sc = h
                h = tc.relu(r + sc)
        return tc.mean(h, axis=(2, 3))


def param_layout(arch: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) of every backbone parameter."""
    layout: list[tuple[str, tuple[int, ...]]] = []

    def affine(name, c):
        layout.extend([(name + ".scale", (c,)), (name + ".shift", (c,))])

    cin = arch.stem_channels
    layout.append(("stem.conv.weight", (cin, arch.in_channels, arch.stem_kernel, arch.stem_kernel)))
    affine("stem.affine", cin)
    for s, (blocks, width) in enumerate(zip(arch.stage_blocks, arch.stage_widths)):
        for b in range(blocks):
            name = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            layout.append((name + ".conv1.weight", (width, cin, 3, 3)))
            affine(name + ".affine1", width)
            layout.append((name + ".conv2.weight", (width, width, 3, 3)))
            affine(name + ".affine2", width)
            if stride != 1 or cin != width:
                layout.append((name + ".shortcut.weight", (width, cin, 1, 1)))
                affine(name + ".shortcut_affine", width)
            cin = width
    return layout


def build_backbone(arch: ArchSpec, seed: int, dtype=np.float32) -> Backbone:
    """He-initialized backbone; the same (arch, seed) always gives the same weights."""
    if not isinstance(arch, ArchSpec):
        raise ConfigError(f"expected ArchSpec, got {type(arch).__name__}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_layout(arch):
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif name.endswith(".scale"):
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return Backbone(arch, params)


@dataclass
class HeadSpec:
    kind: str
    out_dim: int
    bias: bool | None = None  # None: classifier has a bias, embedding does not

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.out_dim < 1:
            raise ConfigError("head out_dim must be >= 1")

    @property
    def has_bias(self) -> bool:
        return self.kind == "classifier" if self.bias is None else self.bias


@dataclass
class Head:
    kind: str
    weight: Tensor
    bias: Tensor | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, features: Tensor) -> Tensor:
        out = tc.matmul(features, self.weight)
        return out + self.bias if self.bias is not None else out


def build_head(spec: HeadSpec, in_features: int, seed: int, dtype=np.float32) -> Head:
    rng = np.random.default_rng(seed)
    w = (rng.standard_normal((in_features, spec.out_dim)) / np.sqrt(in_features)).astype(dtype)
    bias = Tensor(np.zeros(spec.out_dim, dtype=dtype), requires_grad=True) if spec.has_bias else None
    return Head(spec.kind, Tensor(w, requires_grad=True), bias)


def _check_head(backbone: Backbone, head: Head, kind: str) -> None:
    if head.kind != kind:
        raise ContractError(f"expected a {kind} head, got {head.kind}")
    if head.in_features != backbone.arch.feature_dim:
        raise ContractError(f"head expects {head.in_features} features, backbone gives {backbone.arch.feature_dim}")


def forward_embed(backbone: Backbone, head: Head, x: Tensor) -> Tensor:
    """Unnormalized embeddings E(M(x)); normalization happens in the loss."""
    _check_head(backbone, head, "embedding")
    return head(backbone(x))


def forward_logits(backbone: Backbone, head: Head, x: Tensor) -> Tensor:
    _check_head(backbone, head, "classifier")
    return head(backbone(x))


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"PNCA"
FORMAT_VERSION = 1
_DTYPE_F32 = 1


@dataclass
class Checkpoint:
    arch: ArchSpec
    tensors: dict[str, np.ndarray]
    head_kind: str | None = None
    provenance: dict = field(default_factory=dict)

    def backbone(self, dtype=np.float32) -> Backbone:
        params = {}
        for name, _ in param_layout(self.arch):
            key = "backbone." + name
            if key not in self.tensors:
                raise IncompatibleCheckpointError(f"checkpoint lacks backbone tensor {name!r}")
            params[name] = Tensor(self.tensors[key].astype(dtype), requires_grad=True)
        return Backbone(self.arch, params)

    def head(self, dtype=np.float32) -> Head:
        if self.head_kind is None or "head.weight" not in self.tensors:
            raise IncompatibleCheckpointError("checkpoint has no head")
        bias = self.tensors.get("head.bias")
        return Head(
            self.head_kind,
            Tensor(self.tensors["head.weight"].astype(dtype), requires_grad=True),
            None if bias is None else Tensor(bias.astype(dtype), requires_grad=True),
        )

    def proxies(self, dtype=np.float32) -> ProxySet | None:
        if "proxies" not in self.tensors:
            return None
        return ProxySet(Tensor(self.tensors["proxies"].astype(dtype), requires_grad=True))


def make_checkpoint(backbone: Backbone, head: Head | None = None, proxies: ProxySet | None = None,
                    provenance: dict | None = None) -> Checkpoint:
    tensors = {"backbone." + k: v.data.astype(np.float32, copy=True) for k, v in backbone.params.items()}
    if head is not None:
        tensors["head.weight"] = head.weight.data.astype(np.float32, copy=True)
        if head.bias is not None:
            tensors["head.bias"] = head.bias.data.astype(np.float32, copy=True)
    if proxies is not None:
        tensors["proxies"] = proxies.proxies.data.astype(np.float32, copy=True)
    return Checkpoint(backbone.arch, tensors, head.kind if head else None, dict(provenance or {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` atomically (temp file + rename)."""
    meta = json.dumps(
        {"arch": ckpt.arch.to_dict(), "head_kind": ckpt.head_kind, "provenance": ckpt.provenance},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", _DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint fully before returning; any defect raises CheckpointFormatError."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        arch = ArchSpec.from_dict(meta["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt metadata ({exc})") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"{path}: corrupt tensor name") from None
        tag, rank = r.unpack("<BI")
        if tag != _DTYPE_F32:
            raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = arr
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    ckpt = Checkpoint(arch, tensors, meta.get("head_kind"), meta.get("provenance", {}))
    for name, shape in param_layout(arch):
        got = tensors.get("backbone." + name)
        if got is None or got.shape != shape:
            raise CheckpointFormatError(
                f"{path}: backbone tensor {name!r} has shape {None if got is None else got.shape}, expected {shape}"
            )
    return ckpt


def transfer_strip(ckpt: Checkpoint, new_head: HeadSpec, seed: int, arch: ArchSpec | None = None,
                   dtype=np.float32) -> tuple[Backbone, Head]:
    """Keep only the backbone of ``ckpt`` and attach a freshly initialized head.

    The checkpoint's head and proxies are discarded.
    """
    if arch is not None and arch != ckpt.arch:
        raise IncompatibleCheckpointError(f"checkpoint arch {ckpt.arch} does not match requested {arch}")
    backbone = ckpt.backbone(dtype)
    head = build_head(new_head, backbone.arch.feature_dim, seed, dtype)
    return backbone, head
