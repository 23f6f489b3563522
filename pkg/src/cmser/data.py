"""Feature files, manifests, batching and the synthetic corpus generator.

Feature matrix file layout (little endian)::

    b"FMX1" | u32 rows | u32 cols | rows*cols float32, row-major

Manifest: UTF-8 TSV with header ``id  label  split  <modality>...``, one
feature-file path per modality column (relative paths resolve against the
manifest's directory).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadMagicError, FormatError, ManifestError, NonFiniteError, TruncatedFileError

FEATURE_MAGIC = b"FMX1"
_HEADER = struct.Struct("<4sII")

EMOTIONS = ("Anger", "Contempt", "Disgust", "Fear", "Happiness", "Neutral", "Sadness", "Surprise")
NEUTRAL = EMOTIONS.index("Neutral")

# Synthetic 8-class layout used by the "msp" imbalance preset: class 0 is
# Neutral (~40%), Fear is the rarest class (1.5%). The remaining shares are
# illustrative.
MSP_CLASS_NAMES = ("Neutral", "Anger", "Contempt", "Disgust", "Fear", "Happiness", "Sadness", "Surprise")
MSP_PROPORTIONS = (0.40, 0.09, 0.06, 0.03, 0.015, 0.255, 0.08, 0.07)


# -- feature files ------------------------------------------------------------

def write_feature_matrix(path, matrix) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    data = np.ascontiguousarray(matrix, dtype="<f4")
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: refusing to write non-finite features")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_feature_matrix(path) -> np.ndarray:
    """Read an ``FMX1`` file into a ``frames × dim`` float32 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    _, rows, cols = _HEADER.unpack_from(raw)
    expected = rows * cols * 4
    payload = len(raw) - _HEADER.size
    if payload < expected:
        raise TruncatedFileError(f"{path}: header declares {rows}x{cols} but payload holds {payload} bytes "
                                 f"({expected} expected)")
    if payload > expected:
        raise FormatError(f"{path}: {payload - expected} trailing bytes after {rows}x{cols} payload")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{path}: non-finite feature values")
    return values.astype(np.float32)


# -- manifests ----------------------------------------------------------------

@dataclass
class ManifestRow:
    sample_id: str
    label: int
    split: str
    paths: dict[str, Path]


@dataclass
class Manifest:
    modalities: list[str]
    rows: list[ManifestRow]
    path: Path | None = None

    def select(self, split: str | None) -> "Manifest":
        if split is None:
            return self
        return Manifest(self.modalities, [r for r in self.rows if r.split == split], self.path)

    def __len__(self) -> int:
        return len(self.rows)


def parse_label(text: str, n_classes: int | None = None) -> int:
    text = text.strip()
    lookup = {name.lower(): i for i, name in enumerate(EMOTIONS)}
    if text.lower() in lookup:
        value = lookup[text.lower()]
    else:
        try:
            value = int(text)
        except ValueError:
            raise ManifestError(f"unrecognised label {text!r}") from None
    limit = n_classes if n_classes is not None else len(EMOTIONS)
    if not 0 <= value < limit:
        raise ManifestError(f"label {text!r} outside [0, {limit})")
    return value


def read_manifest(path, n_classes: int | None = None, check_files: bool = True) -> Manifest:
    path = Path(path)
    base = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = lines[0].split("\t")
    if header[:3] != ["id", "label", "split"] or len(header) < 4:
        raise ManifestError(f"{path}: header must be id, label, split, then one column per modality")
    modalities = header[3:]
    rows, seen = [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        sample_id = cells[0]
        if sample_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {sample_id!r} (first on line {seen[sample_id]})")
        seen[sample_id] = lineno
        try:
            label = parse_label(cells[1], n_classes)
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        paths = {}
        for name, rel in zip(modalities, cells[3:]):
            p = Path(rel)
            p = p if p.is_absolute() else base / p
            if check_files and not p.is_file():
                raise ManifestError(f"{path}:{lineno}: missing {name} feature file {p}")
            paths[name] = p
        rows.append(ManifestRow(sample_id, label, cells[2], paths))
    return Manifest(modalities, rows, path)


def write_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    lines = ["\t".join(["id", "label", "split", *manifest.modalities])]
    for row in manifest.rows:
        rels = []
        for name in manifest.modalities:
            p = row.paths[name]
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            rels.append(p.as_posix())
        lines.append("\t".join([row.sample_id, str(row.label), row.split, *rels]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- in-memory datasets -------------------------------------------------------

@dataclass
class Dataset:
    ids: list[str]
    labels: np.ndarray
    modalities: list[str]
    features: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def dims(self) -> list[tuple[str, int]]:
        return [(name, int(self.features[name][0].shape[1])) for name in self.modalities]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset([self.ids[i] for i in idx], self.labels[idx], list(self.modalities),
                       {m: [self.features[m][i] for i in idx] for m in self.modalities})


def load_dataset(manifest: Manifest, split: str | None = None,
                 modalities: Sequence[str] | None = None) -> Dataset:
    manifest = manifest.select(split)
    modalities = list(modalities) if modalities is not None else list(manifest.modalities)
    features: dict[str, list[np.ndarray]] = {m: [] for m in modalities}
    for lineno, row in enumerate(manifest.rows, start=2):
        for m in modalities:
            if m not in row.paths:
                raise ManifestError(f"manifest has no column for modality {m!r}")
            mat = read_feature_matrix(row.paths[m])
            if features[m] and mat.shape[1] != features[m][0].shape[1]:
                raise ManifestError(f"row {lineno} ({row.sample_id}): {m} dim {mat.shape[1]} "
                                    f"differs from {features[m][0].shape[1]}")
            if mat.shape[0] == 0:
                raise ManifestError(f"row {lineno} ({row.sample_id}): {m} has zero frames")
            features[m].append(mat)
    labels = np.array([row.label for row in manifest.rows], dtype=np.int64)
    return Dataset([row.sample_id for row in manifest.rows], labels, modalities, features)


def collate(seqs: Sequence[np.ndarray], max_frames: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad sequences to a ``B × F × D`` array and a boolean validity mask."""
    if max_frames is not None:
        seqs = [s[:max_frames] for s in seqs]
    frames = max(s.shape[0] for s in seqs)
    dim = seqs[0].shape[1]
    x = np.zeros((len(seqs), frames, dim))
    mask = np.zeros((len(seqs), frames), dtype=bool)
    for i, s in enumerate(seqs):
        x[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = True
    return x, mask


def collate_batch(dataset: Dataset, idx, max_frames: int | None = None):
    return [collate([dataset.features[m][i] for i in idx], max_frames) for m in dataset.modalities]


# -- batch samplers -----------------------------------------------------------

def shuffled_batches(n: int, batch_size: int, seed) -> list[np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def balanced_batches(ids: Sequence, neutral: Sequence[bool], batch_size: int, seed) -> list[list]:
    """Batches that are half neutral, half expressive (±1 for odd sizes).

    Every sample of the larger partition appears exactly once per plan; the
    smaller partition is oversampled by concatenating fresh permutations of
    it until enough draws exist, so its ids repeat.
    """
    ids = list(ids)
    neutral = np.asarray(neutral, dtype=bool)
    if len(ids) != neutral.size:
        raise ValueError("ids and neutral flags differ in length")
    if batch_size < 2:
        raise ValueError("balanced batches need batch_size >= 2")
    neu = [i for i, n in zip(ids, neutral) if n]
    exp = [i for i, n in zip(ids, neutral) if not n]
    if not neu or not exp:
        raise ValueError(f"balanced batching needs both partitions: {len(neu)} neutral, {len(exp)} expressive")
    rng = np.random.default_rng(seed)
    major, minor = (neu, exp) if len(neu) > len(exp) else (exp, neu)
    major_per = math.ceil(batch_size / 2)
    minor_per = batch_size - major_per
    n_batches = math.ceil(len(major) / major_per)
    major_order = [major[i] for i in rng.permutation(len(major))]
    needed = n_batches * minor_per
    minor_order = []
    while len(minor_order) < needed:
        minor_order.extend(minor[i] for i in rng.permutation(len(minor)))

    plan, cursor = [], 0
    for b in range(n_batches):
        chunk = major_order[b * major_per:(b + 1) * major_per]
        take = min(minor_per, len(chunk))
        plan.append(chunk + minor_order[cursor:cursor + take])
        cursor += take
    return plan


# -- synthetic corpora --------------------------------------------------------

def allocate_counts(total: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``total · proportions``."""
    p = np.asarray(proportions, dtype=float)
    p = p / p.sum()
    raw = total * p
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


def _stratified_splits(labels: np.ndarray, fractions: Sequence[float], rng) -> list[str]:
    names = ("train", "dev", "test")
    split = [""] * labels.size
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        sizes = allocate_counts(idx.size, fractions) if idx.size else [0, 0, 0]
        start = 0
        for name, size in zip(names, sizes):
            for i in idx[start:start + size]:
                split[i] = name
            start += size
    return split


def synthesize_dataset(out_dir, class_counts: Sequence[int], modalities: Sequence[tuple[str, int]],
                       frames: tuple[int, int] = (4, 12), noise: float = 0.5, seed: int = 0,
                       split_fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> Manifest:
    """Write a class-conditional Gaussian corpus and its manifest.

    For every (class, modality) a random unit mean vector is drawn; each
    frame is that mean plus ``noise``-scaled standard normal noise. Frame
    counts are uniform on the inclusive ``frames`` range; a modality given
    as ``(name, dim, (lo, hi))`` uses its own range. Class 0 plays the
    Neutral role.
    """
    out = Path(out_dir)
    ranges = {m[0]: tuple(m[2]) if len(m) > 2 else tuple(frames) for m in modalities}
    modalities = [(m[0], int(m[1])) for m in modalities]
    for name, (lo, hi) in ranges.items():
        if not 1 <= lo <= hi:
            raise ValueError(f"modality {name!r}: invalid frame range {lo}-{hi}")
    rng = np.random.default_rng(seed)
    n_classes = len(class_counts)
    means = {}
    for name, dim in modalities:
        mu = rng.standard_normal((n_classes, dim))
        means[name] = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), class_counts)
    labels = labels[rng.permutation(labels.size)]
    splits = _stratified_splits(labels, split_fractions, rng)

    for name, _ in modalities:
        (out / "features" / name).mkdir(parents=True, exist_ok=True)
    rows = []
    width = max(5, len(str(labels.size)))
    for i, label in enumerate(labels):
        sample_id = f"s{i:0{width}d}"
        paths = {}
        for name, dim in modalities:
            lo, hi = ranges[name]
            n_frames = int(rng.integers(lo, hi + 1))
            mat = means[name][label] + noise * rng.standard_normal((n_frames, dim))
            p = out / "features" / name / f"{sample_id}.fmx"
            write_feature_matrix(p, mat)
            paths[name] = p
        rows.append(ManifestRow(sample_id, int(label), splits[i], paths))
    manifest = Manifest([name for name, _ in modalities], rows, out / "manifest.tsv")
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


def synthetic_dataset(class_counts: Sequence[int], modalities: Sequence[tuple[str, int]],
                      frames: tuple[int, int] = (4, 12), noise: float = 0.5, seed: int = 0,
                      split_fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> dict[str, Dataset]:
    """In-memory twin of :func:`synthesize_dataset`, keyed by split name."""
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        manifest = synthesize_dataset(tmp, class_counts, modalities, frames, noise, seed, split_fractions)
        splits = sorted({row.split for row in manifest.rows})
        return {s: load_dataset(manifest, s) for s in splits}


def class_histogram(labels: Iterable[int], n_classes: int) -> list[int]:
    return np.bincount(np.asarray(list(labels), dtype=int), minlength=n_classes).tolist()
