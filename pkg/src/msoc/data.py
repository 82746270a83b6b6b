"""Shared record types, label conventions and the manifest file format.

Labels follow one convention everywhere: 0 = real (bonafide), 1 = fake.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

SCHEMA_VERSION = "1"
MANIFEST_MAGIC = "#msoc-manifest"

REAL, FAKE = 0, 1


class Category(str, enum.Enum):
    RARV = "RARV"
    FARV = "FARV"
    RAFV = "RAFV"
    FAFV = "FAFV"
    UNSYNCED = "UNSYNCED"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


TRAIN_CATEGORIES = (Category.RARV, Category.FARV, Category.RAFV, Category.FAFV)
TEST_CATEGORIES = (Category.RAFV, Category.FAFV, Category.FARV, Category.UNSYNCED)

# (audio_label, visual_label, synced) implied by each category
CATEGORY_LABELS = {
    Category.RARV: (REAL, REAL, True),
    Category.FARV: (FAKE, REAL, None),
    Category.RAFV: (REAL, FAKE, None),
    Category.FAFV: (FAKE, FAKE, None),
    Category.UNSYNCED: (REAL, REAL, False),
}


def av_label_for(audio_label: int, visual_label: int, synced: bool) -> int:
    return int(audio_label == FAKE or visual_label == FAKE or not synced)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    audio_ref: str
    visual_ref: str
    audio_label: int
    visual_label: int
    av_label: int
    synced: bool
    category: Category
    gen_method: str
    split: Split = Split.TRAIN

    @classmethod
    def from_category(cls, sample_id, audio_ref, visual_ref, category, gen_method,
                      split=Split.TRAIN, synced=None) -> "SampleRecord":
        """Build a record whose labels are implied by ``category``."""
        category = Category(category)
        a, v, s = CATEGORY_LABELS[category]
        if s is None:
            s = True if synced is None else synced
        return cls(sample_id, audio_ref, visual_ref, a, v, av_label_for(a, v, s),
                   s, category, gen_method, Split(split))

    def with_split(self, split) -> "SampleRecord":
        return replace(self, split=Split(split))

    def with_refs(self, audio_ref=None, visual_ref=None) -> "SampleRecord":
        return replace(self, audio_ref=audio_ref or self.audio_ref,
                        visual_ref=visual_ref or self.visual_ref)


def validate_record(r: SampleRecord) -> list[str]:
    """Return every violated record invariant; an empty list means valid."""
    problems = []
    for name in ("audio_label", "visual_label", "av_label"):
        if getattr(r, name) not in (0, 1):
            problems.append(f"{name} must be 0 or 1")
    if problems:
        return problems
    if r.av_label != av_label_for(r.audio_label, r.visual_label, r.synced):
        problems.append("av_label inconsistent")
    cat = Category(r.category)
    a, v, s = CATEGORY_LABELS[cat]
    if r.audio_label != a:
        problems.append(f"{cat.value} requires audio_label={a}")
    if r.visual_label != v:
        problems.append(f"{cat.value} requires visual_label={v}")
    if s is not None and r.synced != s:
        problems.append(f"{cat.value} requires synced={'true' if s else 'false'}")
    if (r.gen_method == "none") != (cat is Category.RARV):
        problems.append('gen_method="none" if and only if category=RARV')
    if not r.sample_id:
        problems.append("empty sample_id")
    return problems


@dataclass
class ClipBatch:
    """Aligned model inputs for one mini-batch (numpy or torch arrays)."""

    audio_features: object  # [B, 4T, 13]
    visual_frames: object  # [B, T, 3, 100, 100], values in [0, 1]
    audio_labels: object
    visual_labels: object
    av_labels: object
    sample_ids: tuple = ()

    def __post_init__(self):
        a, v = self.audio_features.shape, self.visual_frames.shape
        if len(a) != 3 or len(v) != 5 or a[0] != v[0]:
            raise ValueError(f"inconsistent batch shapes audio={tuple(a)} visual={tuple(v)}")
        if a[1] != 4 * v[1]:
            raise ValueError(f"audio rows {a[1]} != 4 x {v[1]} visual frames")

    def __len__(self):
        return self.audio_features.shape[0]


class ManifestError(ValueError):
    """Raised for unparseable or invariant-violating manifests."""


@dataclass
class BenchmarkManifest:
    entries: list[SampleRecord]
    schema_version: str = SCHEMA_VERSION
    seed: int = 0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def by_split(self, split) -> list[SampleRecord]:
        split = Split(split)
        return [r for r in self.entries if r.split is split]

    def get(self, sample_id: str) -> SampleRecord:
        if self._index is None:
            self._index = {r.sample_id: r for r in self.entries}
        try:
            return self._index[sample_id]
        except KeyError:
            raise KeyError(f"unknown sample_id {sample_id!r}") from None

    def test_set(self, category) -> list[SampleRecord]:
        """Shared real test pool plus the fakes of one test category."""
        category = Category(category)
        test = self.by_split(Split.TEST)
        return ([r for r in test if r.category is Category.RARV]
                + [r for r in test if r.category is category])

    def check(self) -> None:
        bad = {}
        seen = set()
        dupes = []
        for r in self.entries:
            if r.sample_id in seen:
                dupes.append(r.sample_id)
            seen.add(r.sample_id)
            problems = validate_record(r)
            if problems:
                bad[r.sample_id] = problems
        if dupes:
            raise ManifestError(f"duplicate sample_id: {', '.join(sorted(set(dupes)))}")
        if bad:
            detail = "; ".join(f"{k}: {', '.join(v)}" for k, v in bad.items())
            raise ManifestError(f"invalid records: {detail}")
        leaked = method_overlap(self.entries)
        if leaked:
            raise ManifestError(
                f"generation methods shared by train/val and test: {', '.join(sorted(leaked))}")


def method_overlap(entries) -> set[str]:
    dev = {r.gen_method for r in entries if r.split is not Split.TEST}
    test = {r.gen_method for r in entries if r.split is Split.TEST}
    return (dev & test) - {"none"}


KEY_ORDER = tuple(f.name for f in fields(SampleRecord))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value
    text = str(value)
    if any(c in text for c in "\t\n\r"):
        raise ManifestError(f"value {text!r} contains a tab or newline")
    return text


def format_manifest(m: BenchmarkManifest) -> str:
    lines = [f"{MANIFEST_MAGIC}\tschema_version={m.schema_version}\tseed={m.seed}"]
    for r in m.entries:
        lines.append("\t".join(f"{k}={_format_value(getattr(r, k))}" for k in KEY_ORDER))
    return "\n".join(lines) + "\n"


def _parse_bool(text, lineno):
    if text == "true":
        return True
    if text == "false":
        return False
    raise ManifestError(f"line {lineno}: expected true/false, got {text!r}")


def _parse_int_label(text, lineno, key):
    if text not in ("0", "1"):
        raise ManifestError(f"line {lineno}: {key} must be 0 or 1, got {text!r}")
    return int(text)


def _split_pairs(line, lineno):
    pairs = {}
    for token in line.split("\t"):
        key, sep, value = token.partition("=")
        if not sep:
            raise ManifestError(f"line {lineno}: malformed field {token!r}")
        pairs[key] = value
    return pairs


def parse_manifest(text: str) -> BenchmarkManifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MANIFEST_MAGIC + "\t"):
        raise ManifestError("line 1: missing manifest header")
    header = _split_pairs(lines[0][len(MANIFEST_MAGIC) + 1:], 1)
    try:
        version = header["schema_version"]
        seed = int(header["seed"])
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"line 1: bad header ({exc})") from None
    if version != SCHEMA_VERSION:
        raise ManifestError(f"line 1: unsupported schema_version {version!r}")

    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        pairs = _split_pairs(line, lineno)
        if tuple(pairs) != KEY_ORDER:
            raise ManifestError(f"line {lineno}: expected keys {', '.join(KEY_ORDER)}")
        try:
            record = SampleRecord(
                sample_id=pairs["sample_id"],
                audio_ref=pairs["audio_ref"],
                visual_ref=pairs["visual_ref"],
                audio_label=_parse_int_label(pairs["audio_label"], lineno, "audio_label"),
                visual_label=_parse_int_label(pairs["visual_label"], lineno, "visual_label"),
                av_label=_parse_int_label(pairs["av_label"], lineno, "av_label"),
                synced=_parse_bool(pairs["synced"], lineno),
                category=Category(pairs["category"]),
                gen_method=pairs["gen_method"],
                split=Split(pairs["split"]),
            )
        except ValueError as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"line {lineno}: {exc}") from None
        entries.append(record)
    m = BenchmarkManifest(entries, version, seed)
    m.check()
    return m


def save_manifest(m: BenchmarkManifest, path) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


def load_manifest(path) -> BenchmarkManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


def manifest_checksum(m: BenchmarkManifest) -> str:
    return hashlib.sha256(format_manifest(m).encode("utf-8")).hexdigest()


def label_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.array([r.audio_label for r in records], dtype=np.int64)
    v = np.array([r.visual_label for r in records], dtype=np.int64)
    av = np.array([r.av_label for r in records], dtype=np.int64)
    return a, v, av
