"""Benchmark construction: method-disjoint splits, derived fake categories, toy corpus.

Media references are plain strings. Two recipe prefixes are understood by
every store:

* ``shift:<k>:<ref>`` -- the aligned audio rows of ``ref`` cyclically delayed by k;
* ``vc:<warp>:<ref>`` -- the waveform of ``ref`` passed through a spectral warp
  (only stores that can provide waveforms resolve it).
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .data import (
    TEST_CATEGORIES,
    TRAIN_CATEGORIES,
    BenchmarkManifest,
    Category,
    SampleRecord,
    Split,
    validate_record,
)
from .frontend import (
    FRAME_SIZE,
    FrontendConfig,
    align_audio,
    desync_shift,
    extract_mfcc,
    prepare_frames,
    sample_shift,
    temporal_crop_offset,
)


class InsufficientDataError(ValueError):
    pass


class SubstitutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_per_category: int = 350
    val_per_category: int = 50
    test_per_category: int = 100
    holdout_methods: tuple = ("faceswap", "faceswap-wav2lip", "vc")
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "holdout_methods", tuple(sorted(set(self.holdout_methods))))
        if min(self.train_per_category, self.val_per_category, self.test_per_category) <= 0:
            raise ValueError("per-category counts must be positive")
        if not self.holdout_methods:
            raise ValueError("holdout_methods must be nonempty")
        if "none" in self.holdout_methods:
            raise ValueError('"none" (real) cannot be a holdout method')


def _sorted(records):
    return sorted(records, key=lambda r: r.sample_id)


def _permuted(records, rng):
    records = _sorted(records)
    return [records[i] for i in rng.permutation(len(records))]


def build_split(corpus, spec: SplitSpec) -> BenchmarkManifest:
    """Partition ``corpus`` so no held-out generation method reaches train/val.

    Train and val take ``*_per_category`` records of each training category
    from non-holdout methods. The test split holds one shared pool of
    ``test_per_category`` reals (disjoint from train/val reals) and, for each
    of RAFV/FAFV/FARV/UNSYNCED, ``test_per_category`` fakes drawn from
    held-out methods (any UNSYNCED record qualifies).
    """
    corpus = list(corpus)
    methods = {r.gen_method for r in corpus}
    unknown = sorted(set(spec.holdout_methods) - methods)
    if unknown:
        raise ValueError(f"holdout methods not present in corpus: {', '.join(unknown)}")
    holdout = set(spec.holdout_methods)
    rng = np.random.default_rng(spec.seed)

    dev_need = spec.train_per_category + spec.val_per_category
    entries = []
    shortfalls = []
    for cat in TRAIN_CATEGORIES:
        pool = [r for r in corpus if r.category is cat and r.gen_method not in holdout]
        need = dev_need + (spec.test_per_category if cat is Category.RARV else 0)
        if len(pool) < need:
            shortfalls.append(f"{cat.value}: need {need} non-holdout records, have {len(pool)} "
                              f"(shortfall {need - len(pool)})")
            continue
        chosen = _permuted(pool, rng)
        entries += [r.with_split(Split.TRAIN) for r in chosen[:spec.train_per_category]]
        entries += [r.with_split(Split.VAL) for r in chosen[spec.train_per_category:dev_need]]
        if cat is Category.RARV:
            entries += [r.with_split(Split.TEST) for r in chosen[dev_need:need]]
    for cat in TEST_CATEGORIES:
        pool = [r for r in corpus if r.category is cat
                and (cat is Category.UNSYNCED or r.gen_method in holdout)]
        if len(pool) < spec.test_per_category:
            shortfalls.append(f"{cat.value} test: need {spec.test_per_category} held-out records, "
                              f"have {len(pool)} (shortfall {spec.test_per_category - len(pool)})")
            continue
        entries += [r.with_split(Split.TEST) for r in _permuted(pool, rng)[:spec.test_per_category]]
    if shortfalls:
        raise InsufficientDataError("insufficient records: " + "; ".join(shortfalls))
    manifest = BenchmarkManifest(entries, seed=spec.seed)
    manifest.check()
    return manifest


def _pick_sources(real_records, count, rng, what):
    reals = [r for r in real_records if r.category is Category.RARV]
    if count > len(reals):
        raise InsufficientDataError(f"{what}: need {count} real records, have {len(reals)}")
    return _permuted(reals, rng)[:count]


def make_unsynced(real_records, count, seed, n_rows=None, cfg=FrontendConfig()) -> list[SampleRecord]:
    """Real clips whose audio is cyclically delayed; visual stream is reused as-is."""
    rng = np.random.default_rng(seed)
    n_rows = n_rows or cfg.audio_rows
    out = []
    for i, src in enumerate(_pick_sources(real_records, count, rng, "unsynced")):
        k = sample_shift(n_rows, rng)
        out.append(SampleRecord.from_category(
            f"UNSYNCED-shift-{i:04d}", f"shift:{k}:{src.audio_ref}", src.visual_ref,
            Category.UNSYNCED, "shift"))
    return out


def make_substituted_audio(real_records, substitution_hook, count, seed) -> list[SampleRecord]:
    """Synchronized FARV clips: real visuals with hook-transformed audio."""
    rng = np.random.default_rng(seed)
    tag = substitution_hook.tag
    out = []
    for i, src in enumerate(_pick_sources(real_records, count, rng, "substituted audio")):
        sample_id = f"FARV-{tag}-{i:04d}"
        try:
            audio_ref = substitution_hook(src, rng)
        except Exception as exc:
            raise SubstitutionError(f"substitution hook {tag!r} failed for {sample_id} "
                                    f"(source {src.sample_id}): {exc}") from exc
        out.append(SampleRecord.from_category(sample_id, audio_ref, src.visual_ref,
                                              Category.FARV, tag, synced=True))
    return out


def spectral_warp(waveform, warp: float, nperseg: int = 512) -> np.ndarray:
    """Stretch the magnitude spectrum along frequency by ``warp``, keeping phase."""
    x = np.asarray(waveform, dtype=np.float64)
    _, _, Z = signal.stft(x, nperseg=nperseg, noverlap=3 * nperseg // 4)
    bins = np.arange(Z.shape[0], dtype=np.float64)
    src = bins / warp
    mag = np.abs(Z)
    warped = np.empty_like(mag)
    for j in range(mag.shape[1]):
        warped[:, j] = np.interp(src, bins, mag[:, j], right=0.0)
    _, y = signal.istft(warped * np.exp(1j * np.angle(Z)), nperseg=nperseg, noverlap=3 * nperseg // 4)
    y = y[:len(x)]
    if len(y) < len(x):
        y = np.pad(y, (0, len(x) - len(y)))
    return y


class SpectralWarpHook:
    """Default voice-conversion stand-in: a per-clip spectral warp tagged ``vc``."""

    tag = "vc"

    def __init__(self, low=1.35, high=1.5):
        self.low, self.high = low, high

    def __call__(self, record, rng) -> str:
        if not record.audio_ref:
            raise ValueError("source record has no audio")
        return f"vc:{rng.uniform(self.low, self.high):.6f}:{record.audio_ref}"


# ---------------------------------------------------------------- media stores


class MediaStore:
    """Resolves record refs into aligned (audio [4T, 13], frames [T, 3, 100, 100]) pairs."""

    def __init__(self, cfg: FrontendConfig = FrontendConfig()):
        self.cfg = cfg

    def raw_frames(self, ref) -> np.ndarray:
        raise NotImplementedError

    def raw_audio(self, ref) -> np.ndarray:
        """Waveform (1-D) or feature rows (2-D) behind a base ref."""
        raise NotImplementedError

    def waveform(self, ref) -> np.ndarray:
        if ref.startswith("vc:"):
            _, warp, src = ref.split(":", 2)
            return spectral_warp(self.waveform(src), float(warp))
        x = self.raw_audio(ref)
        if x.ndim != 1:
            raise ValueError(f"{ref} holds features, not a waveform")
        return x

    def features(self, ref, frame_offset=0) -> np.ndarray:
        if ref.startswith("shift:"):
            _, k, src = ref.split(":", 2)
            return desync_shift(self.features(src, frame_offset), int(k))
        if ref.startswith("vc:"):
            rows = extract_mfcc(self.waveform(ref), self.cfg)
        else:
            x = self.raw_audio(ref)
            rows = extract_mfcc(x, self.cfg) if x.ndim == 1 else x
        return align_audio(rows, self.cfg, frame_offset)

    def clip(self, record) -> tuple[np.ndarray, np.ndarray]:
        frames = self.raw_frames(record.visual_ref)
        offset = temporal_crop_offset(len(frames), self.cfg.clip_frames)
        return self.features(record.audio_ref, offset), prepare_frames(frames, self.cfg)


class FileMediaStore(MediaStore):
    """Media under ``root``: ``.npy`` arrays (features, waveforms or [N, H, W, 3] frames) or ``.wav``."""

    def __init__(self, root, cfg: FrontendConfig = FrontendConfig()):
        super().__init__(cfg)
        self.root = Path(root)

    def _path(self, ref):
        path = self.root / ref
        if not path.exists():
            raise FileNotFoundError(f"media file not found: {path}")
        return path

    def raw_frames(self, ref):
        return np.load(self._path(ref))

    def raw_audio(self, ref):
        path = self._path(ref)
        if path.suffix == ".wav":
            from scipy.io import wavfile
            rate, x = wavfile.read(path)
            if rate != self.cfg.sample_rate:
                raise ValueError(f"{path}: sample rate {rate} != {self.cfg.sample_rate}")
            if x.ndim > 1:
                x = x.mean(axis=1)
            if np.issubdtype(x.dtype, np.integer):
                x = x / float(np.iinfo(x.dtype).max)
            return x.astype(np.float64)
        return np.load(path)


def read_corpus_table(table, columns=None) -> list[SampleRecord]:
    """Map a CSV metadata table of an external corpus into records.

    Required columns (renamable through ``columns``): sample_id, audio_ref,
    visual_ref, category, gen_method. Labels follow from the category.
    """
    columns = {k: k for k in ("sample_id", "audio_ref", "visual_ref", "category", "gen_method")} | (
        columns or {})
    records = []
    with open(table, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                get = {k: row[v] for k, v in columns.items()}
                cat = Category(get["category"].upper())
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{table}:{lineno}: {exc}") from None
            records.append(SampleRecord.from_category(
                get["sample_id"], get["audio_ref"], get["visual_ref"], cat, get["gen_method"],
                synced=cat is not Category.UNSYNCED))
    return records


# ---------------------------------------------------------------- toy corpus


@dataclass(frozen=True)
class ToyCorpusSpec:
    """Procedural stand-in corpus; one held-out audio and one held-out visual style.

    FAFV fakes combine a seen visual and a seen audio style; ``fafv_holdout``
    names the combinations kept out of train/val.
    """

    n_per_category: int = 350
    audio_fake_styles: tuple = ("noise", "tonesub", "vc")
    visual_fake_styles: tuple = ("checker", "patchswap", "blur", "swap2x")
    holdout_styles: tuple = ("swap2x", "vc")
    fafv_holdout: tuple = ("patchswap+noise",)
    seed: int = 0

    def __post_init__(self):
        if not set(self.holdout_styles) <= set(self.audio_fake_styles) | set(self.visual_fake_styles):
            raise ValueError("holdout_styles must be a subset of the fake styles")
        if self.n_per_category <= 0:
            raise ValueError("n_per_category must be positive")
        unknown = set(self.audio_fake_styles) - set(AUDIO_STYLES) | (
            set(self.visual_fake_styles) - set(VISUAL_STYLES))
        if unknown:
            raise ValueError(f"unknown toy styles: {sorted(unknown)}")
        for combo in self.fafv_holdout:
            if combo not in self.fafv_methods:
                raise ValueError(f"fafv_holdout entry {combo!r} is not a seen-style combination")

    def seen(self, styles):
        return [s for s in styles if s not in self.holdout_styles]

    @property
    def fafv_methods(self):
        return [f"{v}+{a}" for v in self.seen(self.visual_fake_styles)
                for a in self.seen(self.audio_fake_styles)]

    def split_spec(self, train, val, test, seed=None) -> SplitSpec:
        return SplitSpec(train, val, test, tuple(self.holdout_styles) + tuple(self.fafv_holdout),
                         self.seed if seed is None else seed)


AUDIO_STYLES = ("noise", "tonesub", "vc")
VISUAL_STYLES = ("checker", "patchswap", "blur", "stripes", "blend", "swap2x")
SWAP_FACTORS = {"patchswap": 4, "swap2x": 2}


def _rng_for(seed, key):
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


@dataclass
class _Identity:
    f0: float
    formants: tuple
    rate: float
    phase: float
    color: np.ndarray
    grating: tuple  # (fx, fy, phase)
    start: tuple
    velocity: tuple


def _identity(rng) -> _Identity:
    return _Identity(
        f0=rng.uniform(100, 220),
        formants=(rng.uniform(450, 650), rng.uniform(1100, 1500), rng.uniform(2300, 2700)),
        rate=rng.uniform(3.0, 6.0),
        phase=rng.uniform(0, 2 * np.pi),
        color=rng.uniform(0.35, 0.85, size=3),
        grating=(rng.uniform(0.08, 0.16) * rng.choice([-1, 1]), rng.uniform(0.08, 0.16),
                 rng.uniform(0, 2 * np.pi)),
        start=(rng.uniform(15, 45), rng.uniform(15, 45)),
        velocity=(rng.uniform(-2, 2), rng.uniform(-2, 2)),
    )


def _mouth_envelope(ident, t):
    return 0.5 + 0.5 * np.sin(2 * np.pi * ident.rate * t + ident.phase)


class ToyMediaStore(MediaStore):
    """Lazily synthesizes toy media from ``toy:<audio|visual>:<id>`` refs."""

    def __init__(self, toy: ToyCorpusSpec, cfg: FrontendConfig):
        super().__init__(cfg)
        self.toy = toy
        self.recipes: dict[str, dict] = {}

    @property
    def n_samples(self):
        return (self.cfg.audio_rows - 1) * self.cfg.hop + self.cfg.window

    def add(self, key, identity_key, audio_style=None, visual_style=None):
        self.recipes[key] = {"identity": identity_key, "audio": audio_style, "visual": visual_style}

    def _recipe(self, ref):
        try:
            kind, key = ref.split(":", 2)[1:]
            return kind, key, self.recipes[key]
        except (ValueError, KeyError):
            raise KeyError(f"unknown toy media ref {ref!r}") from None

    def raw_audio(self, ref):
        _, key, recipe = self._recipe(ref)
        ident = _identity(_rng_for(self.toy.seed, recipe["identity"]))
        return synth_audio(ident, recipe["audio"], self.n_samples, self.cfg.sample_rate,
                           _rng_for(self.toy.seed, "audio/" + key))

    def raw_frames(self, ref):
        _, key, recipe = self._recipe(ref)
        ident = _identity(_rng_for(self.toy.seed, recipe["identity"]))
        other = _identity(_rng_for(self.toy.seed, "swap/" + key))
        return synth_frames(ident, recipe["visual"], self.cfg.clip_frames, self.cfg.visual_fps,
                            _rng_for(self.toy.seed, "visual/" + key), other)


def synth_audio(ident, style, n, sr, rng) -> np.ndarray:
    t = np.arange(n) / sr
    k = np.arange(1, int(7000 // ident.f0) + 1)
    freqs = k * ident.f0
    if style == "tonesub":
        amps = 1.0 / k
    else:
        amps = 0.05 + sum(np.exp(-0.5 * ((freqs - f) / 180.0) ** 2) for f in ident.formants)
    phases = rng.uniform(0, 2 * np.pi, size=len(k))
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(0)
    x = 0.5 * x / np.abs(x).max()
    x *= 0.2 + 0.8 * _mouth_envelope(ident, t)
    x += 0.003 * rng.standard_normal(n)
    if style == "noise":
        sos = signal.butter(4, [3000, 6000], btype="bandpass", fs=sr, output="sos")
        noise = signal.sosfilt(sos, rng.standard_normal(n))
        snr_db = rng.uniform(5, 10)
        noise *= np.sqrt(np.mean(x ** 2) / np.mean(noise ** 2) / 10 ** (snr_db / 10))
        x = x + noise
    return x.astype(np.float64)


def _texture(color, grating, yy, xx):
    fx, fy, ph = grating
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    return color[None, None, :] * (0.6 + 0.4 * wave[..., None])


def synth_frames(ident, style, T, fps, rng, other) -> np.ndarray:
    """[T, 100, 100, 3] uint8 clip of a textured patch with a moving mouth bar."""
    size = 40
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    gy = np.linspace(0.15, 0.45, FRAME_SIZE)
    background = np.broadcast_to((gy[:, None, None] * (1 - ident.color[None, None, :] * 0.5)),
                                 (FRAME_SIZE, FRAME_SIZE, 3))
    tex = _texture(ident.color, ident.grating, yy, xx)
    if style in SWAP_FACTORS:
        lo, hi = 8, 32
        f = SWAP_FACTORS[style]
        tint = np.clip(other.color * 1.15, 0, 1)
        tex = tex.copy()
        # generated at reduced resolution, nearest-upsampled, pasted with a hard seam
        low = _texture(tint, other.grating, yy[lo:hi:f, lo:hi:f], xx[lo:hi:f, lo:hi:f])
        tex[lo:hi, lo:hi] = np.repeat(np.repeat(low, f, axis=0), f, axis=1)
        seam = [lo, lo + 1, hi - 2, hi - 1]
        tex[seam, lo:hi] *= 0.5
        tex[lo:hi, seam] *= 0.5
    elif style == "blend":
        box = np.zeros((size, size))
        box[6:34, 6:34] = 1.0
        alpha = ndimage.gaussian_filter(box, 3.0)[..., None]
        tex = (1 - alpha) * tex + alpha * _texture(other.color, other.grating, yy, xx)
    checker = ((np.add.outer(np.arange(size), np.arange(size)) % 2) * 2 - 1)[..., None]
    stripes = ((np.arange(size) % 2) * 2 - 1)[:, None, None]
    frames = np.empty((T, FRAME_SIZE, FRAME_SIZE, 3))
    for t in range(T):
        img = background.copy()
        y0 = int(round(np.clip(ident.start[0] + ident.velocity[0] * t, 0, FRAME_SIZE - size)))
        x0 = int(round(np.clip(ident.start[1] + ident.velocity[1] * t, 0, FRAME_SIZE - size)))
        patch = tex.copy()
        opening = _mouth_envelope(ident, t / fps)
        h = 2 + int(round(8 * opening))
        patch[28:28 + h, 12:28] *= 0.25
        if style == "checker":
            patch = patch + checker * rng.uniform(0.05, 0.08)
        elif style == "stripes":
            patch = patch + stripes * rng.uniform(0.05, 0.08)
        elif style == "blur":
            sigma = rng.uniform(1.0, 2.5)
            patch = ndimage.gaussian_filter(patch, sigma=(sigma, sigma, 0))
        img[y0:y0 + size, x0:x0 + size] = patch
        frames[t] = img
    frames += rng.normal(0, 0.008, size=frames.shape)
    return np.clip(np.round(frames * 255), 0, 255).astype(np.uint8)


def generate_toy_corpus(spec: ToyCorpusSpec, cfg: FrontendConfig = FrontendConfig()
                        ) -> tuple[ToyMediaStore, list[SampleRecord]]:
    """Records for every category (plus UNSYNCED) and a lazy store producing their media."""
    store = ToyMediaStore(spec, cfg)
    n = spec.n_per_category
    records = []

    def add(category, method, i, audio_style=None, visual_style=None):
        sid = f"{category.value}-{method}-{i:04d}"
        store.add(sid, "id/" + sid, audio_style, visual_style)
        records.append(SampleRecord.from_category(sid, f"toy:audio:{sid}", f"toy:visual:{sid}",
                                                  category, method))

    for i in range(n):
        add(Category.RARV, "none", i)
    reals = list(records)
    for style in spec.audio_fake_styles:
        if style == SpectralWarpHook.tag:
            continue
        for i in range(n):
            add(Category.FARV, style, i, audio_style=style)
    for style in spec.visual_fake_styles:
        for i in range(n):
            add(Category.RAFV, style, i, visual_style=style)
    for combo in spec.fafv_methods:
        v, a = combo.split("+")
        for i in range(n):
            add(Category.FAFV, combo, i, audio_style=a, visual_style=v)
    if SpectralWarpHook.tag in spec.audio_fake_styles:
        records += make_substituted_audio(reals, SpectralWarpHook(), n, spec.seed + 1)
    records += make_unsynced(reals, n, spec.seed + 2, cfg=cfg)
    bad = [r.sample_id for r in records if validate_record(r)]
    assert not bad, bad
    return store, records


# ---------------------------------------------------------------- in-memory clip arrays


@dataclass
class ClipData:
    """Materialized clips for one set of records (frames kept as uint8)."""

    records: list
    audio: np.ndarray  # [N, 4T, 13] float32
    frames: np.ndarray  # [N, T, 3, 100, 100] uint8
    audio_labels: np.ndarray = field(init=False)
    visual_labels: np.ndarray = field(init=False)
    av_labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.audio_labels = np.array([r.audio_label for r in self.records], dtype=np.int64)
        self.visual_labels = np.array([r.visual_label for r in self.records], dtype=np.int64)
        self.av_labels = np.array([r.av_label for r in self.records], dtype=np.int64)

    def __len__(self):
        return len(self.records)

    def batch(self, idx):
        from .data import ClipBatch
        idx = np.asarray(idx)
        return ClipBatch(self.audio[idx], self.frames[idx].astype(np.float32) / 255.0,
                         self.audio_labels[idx], self.visual_labels[idx], self.av_labels[idx],
                         tuple(self.records[i].sample_id for i in idx))

    def subset(self, records) -> "ClipData":
        pos = {r.sample_id: i for i, r in enumerate(self.records)}
        idx = np.array([pos[r.sample_id] for r in records], dtype=np.int64)
        return ClipData(list(records), self.audio[idx], self.frames[idx])


def load_clips(records, store: MediaStore) -> ClipData:
    records = list(records)
    cfg = store.cfg
    audio = np.empty((len(records), cfg.audio_rows, cfg.n_mfcc), dtype=np.float32)
    frames = np.empty((len(records), cfg.clip_frames, 3, FRAME_SIZE, FRAME_SIZE), dtype=np.uint8)
    for i, r in enumerate(records):
        a, v = store.clip(r)
        audio[i] = a
        frames[i] = np.round(v * 255.0).astype(np.uint8)
    return ClipData(records, audio, frames)


def materialize(manifest: BenchmarkManifest, store: MediaStore, root) -> BenchmarkManifest:
    """Write aligned media for every manifest record under ``root``; refs become relative paths."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "visual").mkdir(parents=True, exist_ok=True)
    written = {}
    entries = []
    for r in manifest.entries:
        vkey = r.visual_ref.replace(":", "_").replace("/", "_")
        vref = f"visual/{vkey}.npy"
        if vref not in written:
            raw = store.raw_frames(r.visual_ref)
            np.save(root / vref, raw)
            written[vref] = len(raw)
        offset = temporal_crop_offset(written[vref], store.cfg.clip_frames)
        aref = f"audio/{r.sample_id}.npy"
        np.save(root / aref, store.features(r.audio_ref, offset))
        entries.append(r.with_refs(audio_ref=aref, visual_ref=vref))
    return BenchmarkManifest(entries, manifest.schema_version, manifest.seed)
