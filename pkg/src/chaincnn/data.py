"""Protein record decoding, feature normalization, splits, and batching.

Source matrices carry one protein per row: 700 positions times 57
columns. Each record keeps a 42-feature encoding per position (21
residue one-hot columns plus 21 PSSM columns), the 8-class structure
labels (class 8 marks no-sequence padding), and a prefix-contiguous
mask of real positions. A plain text fixture format mirrors the same
content for small corpora and prediction inputs.
"""

from __future__ import annotations

import ast
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataFormatError, MalformedRecordError, ParameterError, ShapeError

SEQ_LEN = 700
SOURCE_COLUMNS = 57
NUM_FEATURES = 42
NUM_PSSM = 21
NUM_CLASSES = 9
NOSEQ_CLASS = 8

# Residue letter order matches the source one-hot column order; 'X' is
# the unknown-residue catch-all. Class letters follow the label block's
# column order; predictions render through the same table.
RESIDUE_ALPHABET = "ACEDGFIHKMLNQPSRTWVYX"
CLASS_LETTERS = "LBEGIHST"


@dataclass(frozen=True)
class ColumnMap:
    """Half-open column ranges of the 57-column source layout."""

    residue_onehot: tuple[int, int] = (0, 21)
    labels: tuple[int, int] = (22, 31)
    pssm: tuple[int, int] = (35, 56)

    def __post_init__(self):
        for name, (lo, hi), width in (
            ("residue_onehot", self.residue_onehot, 21),
            ("labels", self.labels, NUM_CLASSES),
            ("pssm", self.pssm, NUM_PSSM),
        ):
            if hi - lo != width or lo < 0 or hi > SOURCE_COLUMNS:
                raise ParameterError(f"column range {name}={lo, hi} must span {width} columns")


@dataclass(frozen=True)
class ProteinRecord:
    """One protein, padded to exactly SEQ_LEN positions.

    features: [700, 42] float32; labels: [700] int64 with 8 at padding;
    mask: [700] bool, True for the leading ``length`` real positions.
    ``labels`` may be None for prediction-only inputs.
    """

    id: str
    features: np.ndarray
    labels: np.ndarray | None
    mask: np.ndarray
    length: int

    def __post_init__(self):
        if self.features.shape != (SEQ_LEN, NUM_FEATURES):
            raise MalformedRecordError(
                f"record {self.id}: features shape {self.features.shape}"
            )
        if self.mask.shape != (SEQ_LEN,):
            raise MalformedRecordError(f"record {self.id}: mask shape {self.mask.shape}")
        if int(self.mask.sum()) != self.length or self.mask[: self.length].sum() != self.length:
            raise MalformedRecordError(
                f"record {self.id}: mask must be a {self.length}-long prefix"
            )
        if self.labels is not None:
            real = self.labels[: self.length]
            if real.size and (real.min() < 0 or real.max() >= NOSEQ_CLASS):
                raise MalformedRecordError(
                    f"record {self.id}: masked-in labels must lie in [0, 8)"
                )


@dataclass(frozen=True)
class DatasetSplit:
    train: list[ProteinRecord]
    validation: list[ProteinRecord]
    test: list[ProteinRecord]
    seed: int


@dataclass(frozen=True)
class Conditioning:
    """Append one-hot label channels shifted ``shift`` positions rightward."""

    shift: int


@dataclass
class Batch:
    features: np.ndarray  # [batch, length, 42 or 51] float32
    labels: np.ndarray | None  # [batch, length] int64
    mask: np.ndarray  # [batch, length] float32


@dataclass(frozen=True)
class PssmStats:
    mean: np.ndarray  # [21] float64
    std: np.ndarray  # [21] float64, 1.0 where the column was constant


# ---------------------------------------------------------------------------
# NPY parsing


def load_npy(path: str) -> np.ndarray:
    """Parse a version 1.0 NPY file into a float32 row-major array.

    Only little-endian float32/float64 payloads in C order are accepted;
    float64 is converted. Errors name the byte offset of the problem.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:6] != b"\x93NUMPY":
        raise DataFormatError(f"{path}: bad magic at offset 0: {raw[:6]!r}")
    if len(raw) < 10:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise DataFormatError(f"{path}: unsupported format version {major}.{minor} at offset 6")
    (header_len,) = struct.unpack_from("<H", raw, 8)
    header_end = 10 + header_len
    if len(raw) < header_end:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    try:
        header = ast.literal_eval(raw[10:header_end].decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise DataFormatError(f"{path}: unparseable header dict at offset 10: {exc}") from exc
    descr = header.get("descr")
    if descr not in ("<f4", "<f8"):
        raise DataFormatError(f"{path}: unsupported dtype {descr!r} at offset 10")
    if header.get("fortran_order"):
        raise DataFormatError(f"{path}: fortran-order payloads are not supported")
    shape = header.get("shape")
    if not isinstance(shape, tuple) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise DataFormatError(f"{path}: bad shape {shape!r} in header")
    itemsize = 4 if descr == "<f4" else 8
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = count * itemsize
    payload = raw[header_end:]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes at offset {header_end}, "
            f"expected {expected}"
        )
    arr = np.frombuffer(payload, dtype=np.dtype(descr)).reshape(shape)
    return np.ascontiguousarray(arr, dtype=np.float32)


# ---------------------------------------------------------------------------
# record decoding


def decode_record(row: np.ndarray, cmap: ColumnMap = ColumnMap(), rid: str = "r0") -> ProteinRecord:
    """Decode one [700, 57] source row into a ProteinRecord."""
    if row.shape != (SEQ_LEN, SOURCE_COLUMNS):
        raise ShapeError(f"record {rid}: source row shape {row.shape}")
    onehot = row[:, cmap.residue_onehot[0] : cmap.residue_onehot[1]]
    label_block = row[:, cmap.labels[0] : cmap.labels[1]]
    pssm = row[:, cmap.pssm[0] : cmap.pssm[1]]
    labels = label_block.argmax(axis=1).astype(np.int64)  # ties pick the lowest index
    mask = labels != NOSEQ_CLASS
    length = int(mask.sum())
    if mask[:length].sum() != length:
        raise MalformedRecordError(f"record {rid}: interior no-seq token")
    if length and onehot[:length].max(axis=1).min() <= 0:
        raise MalformedRecordError(
            f"record {rid}: residue one-hot block has no nonzero entry at a masked-in position"
        )
    features = np.concatenate([onehot, pssm], axis=1).astype(np.float32)
    return ProteinRecord(id=rid, features=features, labels=labels, mask=mask, length=length)


def encode_record(rec: ProteinRecord, cmap: ColumnMap = ColumnMap()) -> np.ndarray:
    """Re-encode a record into the populated columns of a [700, 57] row."""
    row = np.zeros((SEQ_LEN, SOURCE_COLUMNS), dtype=np.float32)
    row[:, cmap.residue_onehot[0] : cmap.residue_onehot[1]] = rec.features[:, :21]
    if rec.labels is None:
        raise ParameterError(f"record {rec.id}: cannot encode without labels")
    row[np.arange(SEQ_LEN), cmap.labels[0] + rec.labels] = 1.0
    row[:, cmap.pssm[0] : cmap.pssm[1]] = rec.features[:, 21:]
    return row


def records_from_matrix(mat: np.ndarray, cmap: ColumnMap = ColumnMap()) -> list[ProteinRecord]:
    """Decode an [n, 39900] (or [n, 700, 57]) matrix into records."""
    if mat.ndim == 2:
        if mat.shape[1] != SEQ_LEN * SOURCE_COLUMNS:
            raise ShapeError(f"matrix has {mat.shape[1]} columns, expected {SEQ_LEN * SOURCE_COLUMNS}")
        mat = mat.reshape(-1, SEQ_LEN, SOURCE_COLUMNS)
    if mat.ndim != 3 or mat.shape[1:] != (SEQ_LEN, SOURCE_COLUMNS):
        raise ShapeError(f"matrix shape {mat.shape} is not [n, 700, 57]")
    return [decode_record(mat[i], cmap, rid=f"p{i:05d}") for i in range(mat.shape[0])]


# ---------------------------------------------------------------------------
# PSSM normalization


def compute_pssm_stats(records: list[ProteinRecord]) -> PssmStats:
    """Per-column mean and population std over masked-in positions."""
    cols = np.concatenate([r.features[: r.length, 21:] for r in records], axis=0)
    if cols.size == 0:
        raise ParameterError("cannot compute PSSM statistics over zero positions")
    mean = cols.mean(axis=0, dtype=np.float64)
    std = cols.astype(np.float64).std(axis=0)
    constant = std == 0.0
    if constant.any():
        warnings.warn(
            f"{int(constant.sum())} PSSM column(s) are constant; centering without scaling",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.where(constant, 1.0, std)
    return PssmStats(mean=mean, std=std)


def apply_pssm_stats(records: list[ProteinRecord], stats: PssmStats) -> list[ProteinRecord]:
    """Standardize PSSM columns at masked-in positions; padding stays raw."""
    out = []
    for r in records:
        feats = r.features.copy()
        feats[: r.length, 21:] = (
            (feats[: r.length, 21:] - stats.mean) / stats.std
        ).astype(np.float32)
        out.append(replace(r, features=feats))
    return out


def normalize_pssm(split: DatasetSplit) -> tuple[DatasetSplit, PssmStats]:
    """Standardize all splits with statistics from the training records."""
    stats = compute_pssm_stats(split.train)
    return (
        DatasetSplit(
            train=apply_pssm_stats(split.train, stats),
            validation=apply_pssm_stats(split.validation, stats),
            test=apply_pssm_stats(split.test, stats),
            seed=split.seed,
        ),
        stats,
    )


# ---------------------------------------------------------------------------
# splitting and batching


def split_records(records, n_val: int = 256, seed: int = 0, test=()) -> DatasetSplit:
    """Deterministic shuffled split: first ``n_val`` shuffled records validate."""
    if n_val < 0 or n_val > len(records):
        raise ParameterError(f"n_val={n_val} out of range for {len(records)} records")
    perm = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in perm]
    return DatasetSplit(
        train=shuffled[n_val:], validation=shuffled[:n_val], test=list(test), seed=seed
    )


def conditioning_channels(
    labels: np.ndarray, shift: int, length: int
) -> np.ndarray:
    """One-hot label channels: position j carries label[j - shift].

    Positions whose source index falls before the sequence start carry
    the no-seq one-hot. ``labels`` indexes [0, 9); returns [length, 9].
    """
    out = np.zeros((length, NUM_CLASSES), dtype=np.float32)
    src = np.arange(length) - shift
    ch = np.full(length, NOSEQ_CLASS, dtype=np.int64)
    valid = (src >= 0) & (src < labels.shape[0])
    ch[valid] = labels[src[valid]]
    out[np.arange(length), ch] = 1.0
    return out


def make_batch(
    records: list[ProteinRecord],
    conditioning: Conditioning | None = None,
    context_labels: list[np.ndarray] | None = None,
    length: int = SEQ_LEN,
) -> Batch:
    """Stack records into dense arrays, optionally with conditioning channels.

    ``context_labels`` overrides the ground-truth labels feeding the
    conditioning channels (scheduled sampling); ``length`` may crop the
    padded buffer, which is loss-equivalent because every model masks
    padding before its first convolution.
    """
    if not records:
        raise ParameterError("cannot batch zero records")
    if length < 1 or length > SEQ_LEN:
        raise ParameterError(f"batch length {length} out of range")
    feats = np.stack([r.features[:length] for r in records])
    has_labels = all(r.labels is not None for r in records)
    labels = np.stack([r.labels[:length] for r in records]) if has_labels else None
    mask = np.stack([r.mask[:length] for r in records]).astype(np.float32)
    if conditioning is not None:
        if conditioning.shift < 1:
            raise ParameterError(f"conditioning shift must be >= 1, got {conditioning.shift}")
        chans = []
        for i, r in enumerate(records):
            ctx = context_labels[i] if context_labels is not None else r.labels
            if ctx is None:
                raise ParameterError(f"record {r.id}: conditioning needs labels or a context")
            ctx = np.asarray(ctx, dtype=np.int64)
            if ctx.shape[0] < r.length:
                raise ShapeError(
                    f"record {r.id}: context covers {ctx.shape[0]} of {r.length} positions"
                )
            chans.append(conditioning_channels(ctx, conditioning.shift, length))
        feats = np.concatenate([feats, np.stack(chans)], axis=2)
    return Batch(features=feats, labels=labels, mask=mask)


# ---------------------------------------------------------------------------
# label strings and the native text fixture format


def labels_to_string(labels: np.ndarray) -> str:
    """Render class indices as structure letters (no-seq entries rejected)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(CLASS_LETTERS)):
        raise ParameterError("labels outside [0, 8) cannot be rendered")
    return "".join(CLASS_LETTERS[i] for i in labels)


def string_to_labels(text: str) -> np.ndarray:
    out = np.empty(len(text), dtype=np.int64)
    for i, ch in enumerate(text):
        idx = CLASS_LETTERS.find(ch)
        if idx < 0:
            raise DataFormatError(f"unknown structure letter {ch!r}")
        out[i] = idx
    return out


def record_from_parts(
    rid: str, residues: str, labels: str | None, pssm: np.ndarray
) -> ProteinRecord:
    """Assemble a padded record from sequence strings and a raw PSSM block."""
    n = len(residues)
    if n < 1 or n > SEQ_LEN:
        raise DataFormatError(f"record {rid}: length {n} outside [1, {SEQ_LEN}]")
    if pssm.shape != (n, NUM_PSSM):
        raise DataFormatError(f"record {rid}: PSSM block shape {pssm.shape} != ({n}, 21)")
    features = np.zeros((SEQ_LEN, NUM_FEATURES), dtype=np.float32)
    for i, ch in enumerate(residues):
        idx = RESIDUE_ALPHABET.find(ch)
        if idx < 0:
            raise DataFormatError(f"record {rid}: unknown residue letter {ch!r}")
        features[i, idx] = 1.0
    features[:n, 21:] = pssm
    mask = np.zeros(SEQ_LEN, dtype=bool)
    mask[:n] = True
    if labels:
        if len(labels) != n:
            raise DataFormatError(f"record {rid}: {len(labels)} labels for {n} residues")
        lab = np.full(SEQ_LEN, NOSEQ_CLASS, dtype=np.int64)
        lab[:n] = string_to_labels(labels)
    else:
        lab = None
    return ProteinRecord(id=rid, features=features, labels=lab, mask=mask, length=n)


def load_native(path: str) -> list[ProteinRecord]:
    """Read the tab-separated fixture format.

    Per line: id, residue string, label string (may be empty), and the
    PSSM block as semicolon-separated rows of 21 comma-separated values.
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            rid, residues, labels, pssm_text = parts
            try:
                rows = [
                    [float(v) for v in row.split(",")] for row in pssm_text.split(";") if row
                ]
                pssm = np.array(rows, dtype=np.float32).reshape(len(rows), -1)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad PSSM value: {exc}") from exc
            if pssm.size and pssm.shape[1] != NUM_PSSM:
                raise DataFormatError(
                    f"{path}:{lineno}: PSSM rows carry {pssm.shape[1]} values, expected 21"
                )
            try:
                records.append(record_from_parts(rid, residues, labels or None, pssm))
            except DataFormatError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def save_native(records: list[ProteinRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            residues = "".join(
                RESIDUE_ALPHABET[int(r.features[i, :21].argmax())] for i in range(r.length)
            )
            labels = labels_to_string(r.labels[: r.length]) if r.labels is not None else ""
            pssm = ";".join(
                ",".join(repr(float(v)) for v in r.features[i, 21:]) for i in range(r.length)
            )
            fh.write(f"{r.id}\t{residues}\t{labels}\t{pssm}\n")
