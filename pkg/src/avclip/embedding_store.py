"""Embedding matrices produced by frozen encoders: EMB1 files, pair manifests, splits.

EMB1 layout (little-endian)::

    b"EMB1" | u32 format_version=1 | u32 modality_len | modality utf-8
            | u32 rows | u32 dim | rows*dim float32
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CorruptionError, DimensionError, FormatError, ValidationError

log = logging.getLogger(__name__)

MAGIC = b"EMB1"
FORMAT_VERSION = 1
MODALITIES = ("audio", "video", "shared", "goal")
AUDIO_DIM = 527
VIDEO_DIM = 512
EXPECTED_DIMS = {"audio": AUDIO_DIM, "video": VIDEO_DIM, "goal": VIDEO_DIM}


def _first_nonfinite(data):
    bad = np.argwhere(~np.isfinite(data))
    return tuple(int(i) for i in bad[0]) if len(bad) else None


@dataclass(frozen=True)
class EmbeddingMatrix:
    """An immutable N x D float32 matrix tagged with the modality it came from.

    ``expected_dim`` overrides the default width check for the modality
    (527 for audio, 512 for video and goal); pass ``0`` to disable it.
    """

    modality: str
    data: np.ndarray
    expected_dim: int | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionError(f"embedding data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise DimensionError("embedding dim must be at least 1")
        data = np.ascontiguousarray(data, dtype=np.float32)
        bad = _first_nonfinite(data)
        if bad is not None:
            raise ValidationError(f"non-finite value {data[bad]} at row {bad[0]}, col {bad[1]}")
        want = self.expected_dim if self.expected_dim is not None else EXPECTED_DIMS.get(self.modality)
        if want and data.shape[1] != want:
            raise DimensionError(
                f"{self.modality} embeddings must have dim {want}, got {data.shape[1]}"
            )
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def take(self, rows) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.modality, self.data[np.asarray(rows, dtype=np.intp)], self.expected_dim)


# --------------------------------------------------------------------------
# EMB1 I/O


def encode_embeddings(m: EmbeddingMatrix) -> bytes:
    tag = m.modality.encode("utf-8")
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(tag)) + tag + struct.pack("<II", m.rows, m.dim)
    return head + m.data.astype("<f4").tobytes()


def decode_embeddings(raw: bytes, *, source="<bytes>", expected_dim=None) -> EmbeddingMatrix:
    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    try:
        version, tag_len = struct.unpack_from("<II", raw, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"{source}: unsupported EMB1 version {version}")
        pos = 12
        tag = raw[pos:pos + tag_len]
        if len(tag) != tag_len:
            raise CorruptionError(f"{source}: truncated modality tag")
        pos += tag_len
        rows, dim = struct.unpack_from("<II", raw, pos)
    except struct.error as exc:
        raise CorruptionError(f"{source}: truncated header") from exc
    pos += 8
    need = rows * dim * 4
    payload = raw[pos:]
    if len(payload) != need:
        raise CorruptionError(
            f"{source}: header declares {rows}x{dim} float32 ({need} bytes), payload has {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(rows, dim)
    return EmbeddingMatrix(tag.decode("utf-8"), data, expected_dim)


def write_embeddings(path, m: EmbeddingMatrix) -> None:
    """Write ``m`` as an EMB1 file."""
    if not isinstance(m, EmbeddingMatrix):
        raise ValidationError("write_embeddings expects an EmbeddingMatrix")
    # EmbeddingMatrix construction already rejects NaN/Inf; re-check in case data was swapped in
    if not np.all(np.isfinite(m.data)):
        raise ValidationError("refusing to write non-finite embeddings")
    blob = encode_embeddings(m)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise OSError(f"could not write embeddings to {path}: {exc}") from exc


def read_embeddings(path, expected_dim=None) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_embeddings(raw, source=str(path), expected_dim=expected_dim)


def l2_normalize_rows(m: EmbeddingMatrix):
    """Scale every nonzero row to unit Euclidean norm.

    Returns ``(normalized, zero_rows)``; zero rows pass through unchanged and
    are logged as a warning.
    """
    x = m.data.astype(np.float64)
    norms = np.sqrt(np.sum(x * x, axis=1))
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        log.warning("%d zero-norm row(s) left unnormalized: %s", len(zero), zero[:10].tolist())
    safe = np.where(norms == 0, 1.0, norms)
    out = (x / safe[:, None]).astype(np.float32)
    return EmbeddingMatrix(m.modality, out, m.expected_dim), zero


# --------------------------------------------------------------------------
# Pair manifests


@dataclass(frozen=True)
class PairEntry:
    source_id: str
    window_index: int
    audio_row: int
    video_row: int
    split: str = "train"

    def to_json(self):
        return {
            "source_id": self.source_id,
            "window_index": self.window_index,
            "audio_row": self.audio_row,
            "video_row": self.video_row,
            "split": self.split,
        }


@dataclass(frozen=True)
class PairManifest:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        keys, arows, vrows = set(), set(), set()
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ValidationError(f"split must be 'train' or 'test', got {e.split!r}")
            if e.window_index < 0:
                raise ValidationError(f"negative window_index for {e.source_id}")
            key = (e.source_id, e.window_index)
            if key in keys:
                raise ValidationError(f"duplicate pair key {key}")
            if e.audio_row in arows or e.video_row in vrows:
                raise ValidationError(f"row referenced twice in pair {key}")
            keys.add(key)
            arows.add(e.audio_row)
            vrows.add(e.video_row)

    def __len__(self):
        return len(self.entries)

    def indices(self, split=None):
        sel = [e for e in self.entries if split is None or e.split == split]
        return (
            np.array([e.audio_row for e in sel], dtype=np.intp),
            np.array([e.video_row for e in sel], dtype=np.intp),
        )

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]

    @classmethod
    def from_json(cls, items) -> "PairManifest":
        if not isinstance(items, list):
            raise FormatError("pair manifest must be a JSON array")
        want = {"source_id", "window_index", "audio_row", "video_row", "split"}
        entries = []
        for i, it in enumerate(items):
            if not isinstance(it, dict) or set(it) != want:
                raise FormatError(f"manifest entry {i} must have exactly the keys {sorted(want)}")
            entries.append(
                PairEntry(str(it["source_id"]), int(it["window_index"]), int(it["audio_row"]),
                          int(it["video_row"]), str(it["split"]))
            )
        return cls(entries)

    @classmethod
    def identity(cls, n: int, source_id: str = "pairs") -> "PairManifest":
        return cls([PairEntry(source_id, i, i, i, "train") for i in range(n)])


def write_manifest(path, manifest: PairManifest) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1)


def read_manifest(path) -> PairManifest:
    with open(path) as fh:
        try:
            items = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return PairManifest.from_json(items)


@dataclass(frozen=True)
class PairedDataset:
    audio: EmbeddingMatrix
    video: EmbeddingMatrix
    manifest: PairManifest

    def __post_init__(self):
        for e in self.manifest.entries:
            if not 0 <= e.audio_row < self.audio.rows:
                raise ValidationError(f"audio_row {e.audio_row} out of bounds for {self.audio.rows} rows")
            if not 0 <= e.video_row < self.video.rows:
                raise ValidationError(f"video_row {e.video_row} out of bounds for {self.video.rows} rows")

    def __len__(self):
        return len(self.manifest)

    def arrays(self, split=None):
        """Row-aligned ``(audio, video)`` float32 arrays for ``split`` (or all pairs)."""
        a, v = self.manifest.indices(split)
        return self.audio.data[a], self.video.data[v]

    def subset(self, split) -> "PairedDataset":
        """A compact dataset holding only ``split``, rows renumbered 0..n-1."""
        sel = [e for e in self.manifest.entries if e.split == split]
        a = self.audio.take([e.audio_row for e in sel])
        v = self.video.take([e.video_row for e in sel])
        entries = [replace(e, audio_row=i, video_row=i) for i, e in enumerate(sel)]
        return PairedDataset(a, v, PairManifest(entries))


def split_pairs(dataset: PairedDataset, test_fraction: float = 0.1, seed: int = 0) -> PairedDataset:
    """Assign floor(test_fraction * n) pairs to ``test`` and the rest to ``train``."""
    n = len(dataset)
    if n == 0:
        raise ValidationError("cannot split an empty dataset")
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n_test = int(np.floor(test_fraction * n))
    order = np.random.default_rng(seed).permutation(n)
    test = set(order[:n_test].tolist())
    entries = [replace(e, split="test" if i in test else "train") for i, e in enumerate(dataset.manifest.entries)]
    return PairedDataset(dataset.audio, dataset.video, PairManifest(entries))
