"""Cross-modal classifier: per-modality encoders, pairwise cross-attention, pooling, heads."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import (BadMagicError, ConfigError, FormatError, MaskError, ShapeError,
                     TruncatedFileError, VersionMismatchError)
from .layers import (AffineLayer, AttentionPooling, BiGRULayer, CrossAttentionLayer, Layer,
                     LayerNorm, attention_pool)
from .numerics import Node

MODEL_MAGIC = b"CMSER1"
MODEL_VERSION = 1

# Feature dimensionalities of common upstream encoders, usable as modality presets.
FEATURE_PRESETS = {
    "whisper-large-v3": 1280,
    "hubert-xl": 1280,
    "wavlm-large": 1024,
    "facodec": 512,
    "roberta-large": 1024,
    "deberta-xxl-v2": 1536,
}


@dataclass
class ModelConfig:
    modalities: list[tuple[str, int]]
    hidden: int = 512
    n_classes: int = 8
    classifier_hidden: int | None = None
    seed: int = 0
    cross_attention: bool = True

    def __post_init__(self):
        self.modalities = [(str(name), int(dim)) for name, dim in self.modalities]
        if not 1 <= len(self.modalities) <= 3:
            raise ConfigError(f"between 1 and 3 modalities supported, got {len(self.modalities)}")
        names = [name for name, _ in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names: {names}")
        if any(dim <= 0 for _, dim in self.modalities) or self.hidden <= 0 or self.n_classes < 2:
            raise ConfigError("dimensions must be positive and n_classes >= 2")
        if self.classifier_hidden is None:
            self.classifier_hidden = self.hidden

    @property
    def fused_dim(self) -> int:
        return 2 * self.hidden * len(self.modalities)

    def to_text(self) -> str:
        mods = ",".join(f"{name}:{dim}" for name, dim in self.modalities)
        lines = [
            f"modalities={mods}",
            f"hidden={self.hidden}",
            f"n_classes={self.n_classes}",
            f"classifier_hidden={self.classifier_hidden}",
            f"seed={self.seed}",
            f"cross_attention={int(self.cross_attention)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        try:
            mods = [(n, int(d)) for n, d in (item.split(":") for item in kv["modalities"].split(","))]
            return cls(mods, hidden=int(kv["hidden"]), n_classes=int(kv["n_classes"]),
                       classifier_hidden=int(kv["classifier_hidden"]), seed=int(kv["seed"]),
                       cross_attention=bool(int(kv.get("cross_attention", "1"))))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed model config block: {exc}") from exc


class ModalityEncoder(Layer):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.projection = AffineLayer(d_in, hidden, rng)
        self.norm = LayerNorm(hidden)
        self.gru = BiGRULayer(hidden, hidden, rng)
        self.pool = AttentionPooling(2 * hidden, rng)

    def encode(self, x, mask) -> Node:
        return self.gru(self.norm(self.projection(x)), mask)


@dataclass
class ModelOutput:
    logits: Node
    aux: Node
    fused: Node


class CrossModalModel(Layer):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        h = config.hidden
        self.encoders = {name: ModalityEncoder(dim, h, rng) for name, dim in config.modalities}
        names = [name for name, _ in config.modalities]
        self.attention = {}
        if config.cross_attention:
            for q in names:
                for k in names:
                    if q != k:
                        self.attention[(q, k)] = CrossAttentionLayer(2 * h, rng)
        d_f = config.fused_dim
        self.head_norm = LayerNorm(d_f)
        self.head_hidden = AffineLayer(d_f, config.classifier_hidden, rng)
        self.head_out = AffineLayer(config.classifier_hidden, config.n_classes, rng)
        self.aux_head = AffineLayer(d_f, 1, rng)

    def parameters(self, prefix: str = "") -> list[tuple[str, Node]]:
        out = []
        for name, enc in self.encoders.items():
            out.extend(enc.parameters(f"{prefix}enc.{name}."))
        for (q, k), layer in self.attention.items():
            out.extend(layer.parameters(f"{prefix}xattn.{q}->{k}."))
        for key in ("head_norm", "head_hidden", "head_out", "aux_head"):
            out.extend(getattr(self, key).parameters(f"{prefix}{key}."))
        return out

    def parameter_nodes(self) -> list[Node]:
        return [node for _, node in self.parameters()]

    def __call__(self, batch) -> ModelOutput:
        return forward(self, batch)


def forward(model: CrossModalModel, batch: Sequence[tuple[np.ndarray, np.ndarray]]) -> ModelOutput:
    """Run the classifier.

    ``batch`` holds one ``(features B×F×D, mask B×F)`` pair per configured
    modality, in configuration order.
    """
    cfg = model.config
    if len(batch) != len(cfg.modalities):
        raise ShapeError(f"expected {len(cfg.modalities)} modalities, got {len(batch)}")
    encoded, masks = {}, {}
    size = None
    for (name, dim), (x, mask) in zip(cfg.modalities, batch):
        x = np.asarray(x, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if x.ndim != 3 or x.shape[-1] != dim:
            raise ShapeError(f"modality {name!r}: expected B×F×{dim} features, got {x.shape}")
        if mask.shape != x.shape[:2]:
            raise ShapeError(f"modality {name!r}: mask {mask.shape} vs features {x.shape}")
        if x.shape[0] == 0:
            raise ShapeError("empty batch")
        if size is None:
            size = x.shape[0]
        elif x.shape[0] != size:
            raise ShapeError(f"modality {name!r}: batch size {x.shape[0]} != {size}")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise MaskError(f"modality {name!r}: sample {bad} has no valid frames")
        encoded[name] = model.encoders[name].encode(x, mask)
        masks[name] = mask

    pooled = []
    for name, _ in cfg.modalities:
        fused_seq = encoded[name]
        for other, _ in cfg.modalities:
            layer = model.attention.get((name, other))
            if layer is not None:
                fused_seq = nx.add(fused_seq, layer(encoded[name], encoded[other], masks[other]))
        pooled.append(attention_pool(model.encoders[name].pool, fused_seq, masks[name]))
    fused = nx.concat(pooled, axis=-1)
    hidden = nx.relu(model.head_hidden(model.head_norm(fused)))
    logits = model.head_out(hidden)
    aux = model.aux_head(fused)
    return ModelOutput(logits, aux, fused)


def count_params(model: Layer) -> int:
    return int(np.sum([node.value.size for _, node in model.parameters()], dtype=np.int64))


def clone_model(model: CrossModalModel) -> CrossModalModel:
    copy = CrossModalModel(model.config)
    for (_, dst), (_, src) in zip(copy.parameters(), model.parameters()):
        dst.value[...] = src.value
    return copy


# -- serialisation ------------------------------------------------------------

def _write_block(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def write_tensor_record(fh, name: str, value: np.ndarray) -> None:
    _write_block(fh, name.encode("utf-8"))
    fh.write(struct.pack("<I", value.ndim))
    fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
    fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


class RecordReader:
    """Sequential reader for the shared magic/version/config/tensor-record layout."""

    def __init__(self, data: bytes, path: str = "<memory>"):
        self.data = data
        self.pos = 0
        self.path = path

    def read(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: file truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def header(self, magic: bytes, version: int) -> str:
        if self.data[:len(magic)] != magic:
            raise BadMagicError(f"{self.path}: bad magic {self.data[:len(magic)]!r}, expected {magic!r}")
        self.pos = len(magic)
        (found,) = struct.unpack("<H", self.read(2, "version"))
        if found != version:
            raise VersionMismatchError(f"{self.path}: format version {found}, expected {version}")
        (length,) = struct.unpack("<I", self.read(4, "config length"))
        return self.read(length, "config block").decode("utf-8")

    def tensor(self, expected_name: str | None = None) -> tuple[str, np.ndarray]:
        what = f"tensor {expected_name!r}" if expected_name else "tensor record"
        (nlen,) = struct.unpack("<I", self.read(4, what))
        name = self.read(nlen, what).decode("utf-8")
        what = f"tensor {name!r}"
        if expected_name is not None and name != expected_name:
            raise FormatError(f"{self.path}: expected {expected_name!r}, found {name!r}")
        (rank,) = struct.unpack("<I", self.read(4, what))
        shape = struct.unpack(f"<{rank}I", self.read(4 * rank, what))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(self.read(8 * count, what), dtype="<f8").astype(np.float64)
        return name, values.reshape(shape)

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def save_model(model: CrossModalModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        _write_block(fh, model.config.to_text().encode("utf-8"))
        for name, node in model.parameters():
            write_tensor_record(fh, name, node.value)


def load_model(path) -> CrossModalModel:
    reader = RecordReader(Path(path).read_bytes(), str(path))
    config = ModelConfig.from_text(reader.header(MODEL_MAGIC, MODEL_VERSION))
    model = CrossModalModel(config)
    for name, node in model.parameters():
        _, value = reader.tensor(name)
        if value.shape != node.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {value.shape}, expected {node.shape}")
        node.value[...] = value
    if not reader.at_end():
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return model
