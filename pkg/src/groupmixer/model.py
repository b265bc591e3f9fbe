"""
The patch-embedding ConvMixer classifier and its grouped ("slim") variants.

Checkpoint layout (all integers little-endian)::

    b"GMXR"                 magic
    uint32                  format version
    uint64                  manifest length in bytes
    manifest                UTF-8 JSON: config, dtype and a tensor index
                            [{"name", "shape", "offset", "nbytes"}, ...]
    payload                 raw tensors, offsets relative to payload start
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .autodiff import Variable
from .errors import CheckpointError, ConfigError, DimensionError
from .nn import ConvMixerLayer, GlobalAvgPool, LinearHead, Module, PatchEmbed

VARIANT_GROUPS = {"base": 1, "slim_g2": 2, "slim_g4": 4}

MAGIC = b"GMXR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def normalize_variant(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    if key not in VARIANT_GROUPS:
        raise ConfigError(f"unknown variant {name!r}; expected one of base, slim-g2, slim-g4")
    return key


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "base"
    in_channels: int = 3
    embed_dim: int = 128
    patch_size: int = 7
    kernel_size: int = 9
    depth: int = 3
    num_classes: int = 2
    input_size: Tuple[int, int] = (224, 224)

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        for name in ("in_channels", "embed_dim", "patch_size", "kernel_size", "depth", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.groups:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by groups {self.groups}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        h, w = self.input_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"input_size {h}x{w} not divisible by patch_size {self.patch_size}")

    @property
    def groups(self) -> int:
        return VARIANT_GROUPS[self.variant]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


class GroupMixerModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        c = config
        self.embed = PatchEmbed(c.in_channels, c.embed_dim, c.patch_size, rng, dtype)
        self.mixers = [
            ConvMixerLayer(c.embed_dim, c.kernel_size, c.groups, rng, dtype) for _ in range(c.depth)
        ]
        self.pool = GlobalAvgPool()
        self.head = LinearHead(c.embed_dim, c.num_classes, rng, dtype)

    def forward(self, x) -> Variable:
        if not isinstance(x, Variable):
            x = Variable(np.asarray(x, dtype=self.head.weight.dtype))
        expected = (self.config.in_channels, *self.config.input_size)
        if x.value.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"model expects input (N, {', '.join(map(str, expected))}), got {x.shape}")
        f = self.embed(x)
        for layer in self.mixers:
            f = layer(f)
        return self.head(self.pool(f))

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode logits without recording anything."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(images).value
        finally:
            self.train(was_training)


def build(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> GroupMixerModel:
    return GroupMixerModel(config, rng, dtype)


def count_parameters(model: Module) -> int:
    """Trainable scalars: conv/linear weights and biases plus BN gamma/beta."""
    return sum(p.value.size for p in model.parameters())


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form count from the layer shapes."""
    h, c, p, k, g = config.embed_dim, config.in_channels, config.patch_size, config.kernel_size, config.groups
    embed = h * c * p * p + h + 2 * h
    mixer = (h * k * k + h + 2 * h) + (h * (h // g) + h + 2 * h)
    head = config.num_classes * h + config.num_classes
    return embed + config.depth * mixer + head


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_items(model: GroupMixerModel):
    """(name, array) pairs for every parameter and buffer, in a fixed order."""
    items = [(name, p.value) for name, p in model.named_parameters()]
    items += list(model.named_buffers())
    return items


def save_checkpoint(model: GroupMixerModel, path) -> Path:
    path = Path(path)
    items = state_items(model)
    dtype = items[0][1].dtype
    dtype_name = str(dtype)
    if dtype_name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype_name}", field="dtype")
    wire = np.dtype(_DTYPES[dtype_name])

    index, chunks, offset = [], [], 0
    for name, arr in items:
        raw = np.ascontiguousarray(arr, dtype=wire).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"config": model.config.to_dict(), "dtype": dtype_name, "tensors": index},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)
    return path


def load_checkpoint(path) -> GroupMixerModel:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError("file is shorter than the header", field="header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}", field="magic")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", field="version")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise CheckpointError("truncated manifest", field="manifest")
    try:
        manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest ({exc})", field="manifest") from None
    payload = blob[start + mlen :]

    try:
        config = ModelConfig.from_dict(manifest["config"])
    except KeyError:
        raise CheckpointError("missing", field="config") from None
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(str(exc), field="config") from None
    dtype_name = manifest.get("dtype")
    if dtype_name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype_name!r}", field="dtype")
    wire = np.dtype(_DTYPES[dtype_name])

    # the rng only seeds values that are overwritten below
    model = build(config, np.random.default_rng(0), dtype=np.dtype(dtype_name))
    targets = dict(state_items(model))
    entries = {e["name"]: e for e in manifest.get("tensors", [])}
    missing = sorted(set(targets) - set(entries))
    if missing:
        raise CheckpointError("tensor missing from checkpoint", field=missing[0])
    extra = sorted(set(entries) - set(targets))
    if extra:
        raise CheckpointError("tensor not part of this architecture", field=extra[0])

    loaded = {}
    for name, target in targets.items():
        e = entries[name]
        if tuple(e["shape"]) != target.shape:
            raise CheckpointError(f"shape {tuple(e['shape'])} != expected {target.shape}", field=name)
        nbytes = int(np.prod(target.shape)) * wire.itemsize
        lo = e["offset"]
        if e["nbytes"] != nbytes or lo < 0 or lo + nbytes > len(payload):
            raise CheckpointError("payload truncated or inconsistent", field=name)
        arr = np.frombuffer(payload, dtype=wire, count=target.size, offset=lo)
        loaded[name] = arr.reshape(target.shape).astype(np.dtype(dtype_name))
    _assign_state(model, loaded)
    model.eval()
    return model


def _assign_state(model: GroupMixerModel, state: dict) -> None:
    for name, p in model.named_parameters():
        p.value = state[name].copy()
        p.zero_grad()
    for name, buf in model.named_buffers():
        buf[...] = state[name]


def copy_state(model: GroupMixerModel) -> dict:
    return {name: arr.copy() for name, arr in state_items(model)}


def restore_state(model: GroupMixerModel, state: dict) -> None:
    _assign_state(model, state)
