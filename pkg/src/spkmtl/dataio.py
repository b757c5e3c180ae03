"""Manifests, attribute labels, vocabularies, age binning, train/test
splitting, and the FEAT1 binary feature format.

All container types here are treated as immutable after construction and
are safe to share across parallel readers.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .seeding import derive_seed

FEAT1_MAGIC = b"FEAT1"

MANIFEST_KEYS = (
    "utt_id",
    "rec_id",
    "speaker_id",
    "feature_path",
    "num_frames",
    "start_time",
    "end_time",
    "attributes",
)


@dataclass(frozen=True)
class UtteranceRecord:
    """One speech utterance: identity, position within its recording, a
    pointer to its frame-level features, and optional attribute labels
    ("age" in years, "nationality", "gender")."""

    utt_id: str
    rec_id: str
    speaker_id: str
    feature_path: str = ""
    num_frames: int = 0
    start_time: float = 0.0
    end_time: float = 0.0
    attributes: dict = field(default_factory=dict)

    def validate(self):
        if not self.utt_id:
            raise DataError("utt_id must be non-empty")
        if not self.speaker_id:
            raise DataError(f"utterance {self.utt_id!r}: speaker_id must be non-empty")
        if self.num_frames < 0:
            raise DataError(f"utterance {self.utt_id!r}: num_frames must be >= 0")
        if self.end_time <= self.start_time:
            raise DataError(
                f"utterance {self.utt_id!r}: end_time ({self.end_time}) must be "
                f"> start_time ({self.start_time})"
            )


@dataclass(frozen=True)
class Manifest:
    records: tuple[UtteranceRecord, ...]
    provenance: str = ""

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            rec.validate()
            if rec.utt_id in seen:
                raise DataError(f"duplicate utt_id {rec.utt_id!r} in manifest")
            seen.add(rec.utt_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def speakers(self) -> list[str]:
        """Unique speaker ids in sorted order."""
        return sorted({r.speaker_id for r in self.records})

    def by_utt_id(self) -> dict[str, UtteranceRecord]:
        return {r.utt_id: r for r in self.records}


def _record_from_obj(obj: dict, where: str) -> UtteranceRecord:
    missing = [k for k in ("utt_id", "rec_id", "speaker_id") if k not in obj]
    if missing:
        raise DataError(f"{where}: missing keys {missing}")
    attrs = obj.get("attributes", {})
    if attrs is None:
        attrs = {}
    if not isinstance(attrs, dict):
        raise DataError(f"{where}: attributes must be an object")
    return UtteranceRecord(
        utt_id=str(obj["utt_id"]),
        rec_id=str(obj["rec_id"]),
        speaker_id=str(obj["speaker_id"]),
        feature_path=str(obj.get("feature_path", "")),
        num_frames=int(obj.get("num_frames", 0)),
        start_time=float(obj.get("start_time", 0.0)),
        end_time=float(obj.get("end_time", 1.0)),
        attributes=dict(attrs),
    )


def load_manifest(path) -> Manifest:
    """Load a JSONL manifest: one utterance object per line, order kept.

    Parse failures and duplicate utt_ids are fatal and report the
    offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            rec = _record_from_obj(obj, f"{path}: line {lineno}")
            if rec.utt_id in seen:
                raise DataError(
                    f"{path}: line {lineno}: duplicate utt_id {rec.utt_id!r} "
                    f"(first seen on line {seen[rec.utt_id]})"
                )
            seen[rec.utt_id] = lineno
            try:
                rec.validate()
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            records.append(rec)
    return Manifest(records=tuple(records), provenance=str(path))


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            obj = {
                "utt_id": rec.utt_id,
                "rec_id": rec.rec_id,
                "speaker_id": rec.speaker_id,
                "feature_path": rec.feature_path,
                "num_frames": rec.num_frames,
                "start_time": rec.start_time,
                "end_time": rec.end_time,
                "attributes": rec.attributes,
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# FEAT1 binary feature files
#
# Layout: bytes 0-4 ASCII "FEAT1"; bytes 5-8 uint32 LE row count T; bytes
# 9-12 uint32 LE column count D; then T*D IEEE-754 float32 LE, row-major.
# ---------------------------------------------------------------------------


def feat1_encode(frames: np.ndarray) -> bytes:
    """Serialize a T x D float32 matrix into FEAT1 bytes."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {frames.shape}")
    if not np.isfinite(frames).all():
        raise DataError("features contain non-finite values")
    header = FEAT1_MAGIC + struct.pack("<II", frames.shape[0], frames.shape[1])
    return header + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def feat1_decode(blob: bytes, where: str = "features") -> np.ndarray:
    """Parse FEAT1 bytes back into a T x D float32 matrix."""
    if len(blob) < 13 or blob[:5] != FEAT1_MAGIC:
        raise DataError(f"{where}: bad magic, not a FEAT1 file")
    n_rows, n_cols = struct.unpack("<II", blob[5:13])
    payload = blob[13:]
    expected = n_rows * n_cols * 4
    if len(payload) != expected:
        raise DataError(
            f"{where}: truncated or oversized payload: header claims "
            f"{n_rows}x{n_cols} ({expected} bytes), found {len(payload)}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_rows, n_cols)
    if not np.isfinite(frames).all():
        raise DataError(f"{where}: payload contains non-finite values")
    return np.array(frames, dtype=np.float32)


def write_features(path, frames: np.ndarray) -> None:
    """Write a T x D float32 matrix as a FEAT1 file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = feat1_encode(frames)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_features(path) -> np.ndarray:
    """Read a FEAT1 file back into a T x D float32 matrix."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    return feat1_decode(blob, where=str(path))


# ---------------------------------------------------------------------------
# Label vocabularies
# ---------------------------------------------------------------------------

UNK_LABEL = "UNK"


@dataclass(frozen=True)
class LabelVocab:
    """Bijection between label strings and contiguous class indices."""

    name: str
    index_of: dict

    def __post_init__(self):
        indices = sorted(self.index_of.values())
        if indices != list(range(len(self.index_of))):
            raise DataError(f"vocab {self.name!r}: indices must be exactly 0..size-1")

    @property
    def size(self) -> int:
        return len(self.index_of)

    def encode(self, label: str):
        return self.index_of.get(label)

    def decode(self, index: int) -> str:
        for label, idx in self.index_of.items():
            if idx == index:
                return label
        raise KeyError(index)

    def labels(self) -> list[str]:
        """Labels ordered by class index."""
        return [lab for lab, _ in sorted(self.index_of.items(), key=lambda kv: kv[1])]

    def to_dict(self) -> dict:
        return {"name": self.name, "index_of": dict(self.index_of)}

    @classmethod
    def from_dict(cls, obj: dict) -> "LabelVocab":
        return cls(name=obj["name"], index_of=dict(obj["index_of"]))


def build_speaker_vocab(manifest: Manifest) -> LabelVocab:
    """Speaker classes, indexed in sorted speaker-id order."""
    speakers = manifest.speakers()
    return LabelVocab("speaker", {s: i for i, s in enumerate(speakers)})


def speaker_attribute_map(manifest: Manifest, attr: str) -> dict:
    """Per-speaker attribute value; inconsistent values across a speaker's
    utterances are a data error."""
    values: dict = {}
    for rec in manifest.records:
        val = rec.attributes.get(attr)
        if val is None:
            continue
        if rec.speaker_id in values and values[rec.speaker_id] != val:
            raise DataError(
                f"speaker {rec.speaker_id!r} has conflicting {attr!r} values: "
                f"{values[rec.speaker_id]!r} vs {val!r}"
            )
        values.setdefault(rec.speaker_id, val)
    return values


def build_nationality_vocab(manifest: Manifest, min_count: int = 2) -> LabelVocab:
    """Nationality classes counted per speaker.

    Nationalities held by fewer than min_count speakers are pooled with the
    speakers that have no nationality at all into a single shared "UNK"
    class. Remaining classes are indexed by descending speaker count, ties
    broken lexicographically; UNK, when present, takes the last index.
    """
    if min_count < 2:
        raise DataError("min_count must be >= 2")
    nat_of = speaker_attribute_map(manifest, "nationality")
    counts: dict = {}
    for nat in nat_of.values():
        counts[nat] = counts.get(nat, 0) + 1
    kept = sorted(
        (nat for nat, c in counts.items() if c >= min_count),
        key=lambda nat: (-counts[nat], nat),
    )
    n_missing = len(manifest.speakers()) - len(nat_of)
    n_rare = sum(c for c in counts.values() if c < min_count)
    index_of = {nat: i for i, nat in enumerate(kept)}
    if n_missing + n_rare > 0:
        index_of[UNK_LABEL] = len(index_of)
    return LabelVocab("nationality", index_of)


def build_gender_vocab(manifest: Manifest) -> LabelVocab:
    values = sorted(set(speaker_attribute_map(manifest, "gender").values()))
    return LabelVocab("gender", {v: i for i, v in enumerate(values)})


# ---------------------------------------------------------------------------
# Age binning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgeBinner:
    """Uniform age bins over [lo, hi] with n_bins+1 edges."""

    n_bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.n_bins < 1:
            raise DataError("n_bins must be >= 1")
        if not (self.hi > self.lo):
            raise DataError(f"age range must be non-degenerate, got [{self.lo}, {self.hi}]")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_bins + 1)

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, obj: dict) -> "AgeBinner":
        return cls(n_bins=int(obj["n_bins"]), lo=float(obj["lo"]), hi=float(obj["hi"]))


def make_age_binner(ages, n_bins: int = 10) -> AgeBinner:
    """Fit uniform bins to the observed age range. A degenerate range (all
    ages equal) is widened to +/- 0.5 years."""
    ages = [float(a) for a in ages]
    if not ages:
        raise DataError("cannot build an age binner from an empty age list")
    if not all(math.isfinite(a) for a in ages):
        raise DataError("ages must all be finite")
    if n_bins < 1:
        raise DataError("n_bins must be >= 1")
    lo, hi = min(ages), max(ages)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return AgeBinner(n_bins=n_bins, lo=lo, hi=hi)


def bin_age(binner: AgeBinner, age: float) -> int:
    """Map an age to its bin index; out-of-range ages clamp to the edge
    bins, so the mapping is total on the reals."""
    if not math.isfinite(age):
        raise DataError(f"age must be finite, got {age}")
    idx = int(np.searchsorted(binner.edges, age, side="right")) - 1
    return min(max(idx, 0), binner.n_bins - 1)


# ---------------------------------------------------------------------------
# Random-label controls
# ---------------------------------------------------------------------------


def shuffle_labels(labels, seed: int) -> list:
    """Uniform random permutation of a label list; the multiset is
    preserved and the result is deterministic in the seed."""
    labels = list(labels)
    if not labels:
        raise DataError("cannot shuffle an empty label list")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labels))
    return [labels[i] for i in perm]


# ---------------------------------------------------------------------------
# Recording-level train/test splitting
# ---------------------------------------------------------------------------


def _hist_l1(a: np.ndarray, b: np.ndarray) -> float:
    ta, tb = a.sum(), b.sum()
    if ta == 0 and tb == 0:
        return 0.0
    if ta == 0 or tb == 0:
        return 2.0
    return float(np.abs(a / ta - b / tb).sum())


def split_train_test(
    manifest: Manifest,
    train_frac: float,
    binner: AgeBinner,
    seed: int = 0,
) -> tuple[Manifest, Manifest]:
    """Split a manifest into train/test by whole recording.

    Greedy assignment: recordings are sorted by utterance count
    (descending, seed-shuffled within ties) and each is placed on the side
    that best keeps (a) the train utterance fraction near train_frac and
    (b) the L1 distance between the normalized train/test age-bin
    histograms low, with the fraction taking priority: when both sides
    keep the fraction within 5 points, the histogram decides.
    """
    if not (0.0 < train_frac < 1.0):
        raise DataError(f"train_frac must be in (0, 1), got {train_frac}")
    by_rec: dict = {}
    for rec in manifest.records:
        by_rec.setdefault(rec.rec_id, []).append(rec)
    if len(by_rec) < 2:
        raise DataError(f"need at least 2 recordings to split, got {len(by_rec)}")

    rng = np.random.default_rng(derive_seed(seed, "split"))
    rec_ids = sorted(by_rec)
    rec_ids = [rec_ids[i] for i in rng.permutation(len(rec_ids))]
    rec_ids.sort(key=lambda r: -len(by_rec[r]))  # stable: seed order kept in ties

    def rec_hist(rec_id):
        hist = np.zeros(binner.n_bins)
        for rec in by_rec[rec_id]:
            age = rec.attributes.get("age")
            if age is not None:
                hist[bin_age(binner, float(age))] += 1
        return hist

    train_ids: set = set()
    train_utts = 0
    assigned_utts = 0
    train_hist = np.zeros(binner.n_bins)
    test_hist = np.zeros(binner.n_bins)

    for rec_id in rec_ids:
        n = len(by_rec[rec_id])
        hist = rec_hist(rec_id)
        total = assigned_utts + n
        err_train = abs((train_utts + n) / total - train_frac)
        err_test = abs(train_utts / total - train_frac)
        l1_train = _hist_l1(train_hist + hist, test_hist)
        l1_test = _hist_l1(train_hist, test_hist + hist)
        ok_train = err_train <= 0.05
        ok_test = err_test <= 0.05
        if ok_train and ok_test:
            to_train = (l1_train, err_train) <= (l1_test, err_test)
        elif ok_train or ok_test:
            to_train = ok_train
        else:
            to_train = err_train <= err_test
        if to_train:
            train_ids.add(rec_id)
            train_utts += n
            train_hist += hist
        else:
            test_hist += hist
        assigned_utts += n

    train_records = tuple(r for r in manifest.records if r.rec_id in train_ids)
    test_records = tuple(r for r in manifest.records if r.rec_id not in train_ids)
    note = manifest.provenance
    return (
        Manifest(train_records, provenance=f"{note} [train split]"),
        Manifest(test_records, provenance=f"{note} [test split]"),
    )


# ---------------------------------------------------------------------------
# Attribute CSV import
# ---------------------------------------------------------------------------

ATTRIBUTE_COLUMNS = ("speaker_id", "age", "nationality", "gender")


def load_attribute_csv(path) -> dict:
    """Read the attribute CSV (header: speaker_id, age, nationality,
    gender; empty cell = missing) into a speaker_id -> attributes map."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"attribute CSV {path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ATTRIBUTE_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: attribute CSV is missing columns {missing}")
        table: dict = {}
        for lineno, row in enumerate(reader, start=2):
            spk = (row.get("speaker_id") or "").strip()
            if not spk:
                raise DataError(f"{path}: line {lineno}: empty speaker_id")
            attrs = {}
            age = (row.get("age") or "").strip()
            if age:
                try:
                    attrs["age"] = float(age)
                except ValueError as exc:
                    raise DataError(f"{path}: line {lineno}: bad age {age!r}") from exc
            for key in ("nationality", "gender"):
                val = (row.get(key) or "").strip()
                if val:
                    attrs[key] = val
            table[spk] = attrs
    return table


def rebase_feature_paths(manifest: Manifest, root) -> Manifest:
    """Resolve relative feature paths against a root directory (typically
    the manifest's own directory)."""
    root = Path(root)
    records = []
    for rec in manifest.records:
        if rec.feature_path and not Path(rec.feature_path).is_absolute():
            rec = UtteranceRecord(
                utt_id=rec.utt_id,
                rec_id=rec.rec_id,
                speaker_id=rec.speaker_id,
                feature_path=str(root / rec.feature_path),
                num_frames=rec.num_frames,
                start_time=rec.start_time,
                end_time=rec.end_time,
                attributes=rec.attributes,
            )
        records.append(rec)
    return Manifest(tuple(records), provenance=manifest.provenance)


def apply_attributes(manifest: Manifest, table: dict) -> Manifest:
    """Merge per-speaker attributes from a CSV table into a manifest; CSV
    values win over any attributes already on a record."""
    records = []
    for rec in manifest.records:
        extra = table.get(rec.speaker_id, {})
        if extra:
            merged = dict(rec.attributes)
            merged.update(extra)
            rec = UtteranceRecord(
                utt_id=rec.utt_id,
                rec_id=rec.rec_id,
                speaker_id=rec.speaker_id,
                feature_path=rec.feature_path,
                num_frames=rec.num_frames,
                start_time=rec.start_time,
                end_time=rec.end_time,
                attributes=merged,
            )
        records.append(rec)
    return Manifest(tuple(records), provenance=manifest.provenance)
