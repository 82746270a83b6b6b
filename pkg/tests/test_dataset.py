import numpy as np
import pytest

from msoc.data import Category, SampleRecord, Split
from msoc.dataset import (
    FileMediaStore,
    InsufficientDataError,
    SpectralWarpHook,
    SplitSpec,
    SubstitutionError,
    ToyCorpusSpec,
    build_split,
    generate_toy_corpus,
    load_clips,
    make_substituted_audio,
    make_unsynced,
    materialize,
    read_corpus_table,
    spectral_warp,
)
from msoc.frontend import FrontendConfig

CFG = FrontendConfig(clip_frames=2)


def corpus(n=20):
    """Synthetic records: reals plus two methods per fake category."""
    out = [SampleRecord.from_category(f"r{i}", f"a/r{i}", f"v/r{i}", "RARV", "none") for i in range(3 * n)]
    for cat, methods in [("FARV", ("tts", "vc")), ("RAFV", ("fsgan", "faceswap")),
                         ("FAFV", ("fsgan-tts", "faceswap-wav2lip"))]:
        for m in methods:
            out += [SampleRecord.from_category(f"{cat}-{m}-{i}", "a", "v", cat, m) for i in range(n)]
    out += make_unsynced(out, n, seed=0, n_rows=100)
    return out


class TestSplit:
    def test_counts_and_disjointness(self):
        spec = SplitSpec(8, 2, 5, ("vc", "faceswap", "faceswap-wav2lip"), seed=1)
        m = build_split(corpus(), spec)
        for cat in (Category.RARV, Category.FARV, Category.RAFV, Category.FAFV):
            assert sum(r.category is cat for r in m.by_split(Split.TRAIN)) == 8
            assert sum(r.category is cat for r in m.by_split(Split.VAL)) == 2
        test = m.by_split(Split.TEST)
        assert len(test) == 5 * 5
        assert {r.gen_method for r in test} == {"none", "vc", "faceswap", "faceswap-wav2lip", "shift"}
        ids = [r.sample_id for r in m.entries]
        assert len(ids) == len(set(ids))

    def test_deterministic(self):
        spec = SplitSpec(8, 2, 5, ("vc", "faceswap", "faceswap-wav2lip"), seed=3)
        assert build_split(corpus(), spec).entries == build_split(corpus(), spec).entries

    def test_shortfall_reported(self):
        spec = SplitSpec(50, 2, 5, ("vc", "faceswap", "faceswap-wav2lip"))
        with pytest.raises(InsufficientDataError, match="shortfall"):
            build_split(corpus(), spec)

    def test_unknown_holdout(self):
        with pytest.raises(ValueError, match="not present"):
            build_split(corpus(), SplitSpec(1, 1, 1, ("diffusion",)))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SplitSpec(0, 1, 1)
        with pytest.raises(ValueError):
            SplitSpec(holdout_methods=("none",))


class TestGenerators:
    def test_unsynced_shift_range(self):
        recs = make_unsynced(corpus(), 20, seed=5, n_rows=100)
        for r in recs:
            k = int(r.audio_ref.split(":")[1])
            assert 25 <= k <= 75 and r.synced is False and r.av_label == 1

    def test_substituted_audio(self):
        reals = corpus()[:10]
        recs = make_substituted_audio(reals, SpectralWarpHook(), 5, seed=0)
        assert all(r.category is Category.FARV and r.synced and r.gen_method == "vc" for r in recs)
        assert recs[0].sample_id == "FARV-vc-0000"

    def test_hook_failure_names_sample(self):
        class Broken:
            tag = "bad"

            def __call__(self, record, rng):
                raise RuntimeError("boom")

        with pytest.raises(SubstitutionError, match="FARV-bad-0000"):
            make_substituted_audio(corpus()[:3], Broken(), 1, seed=0)

    def test_spectral_warp_moves_energy_up(self):
        sr = 16000
        t = np.arange(sr) / sr
        x = np.sin(2 * np.pi * 500 * t)
        y = spectral_warp(x, 1.4)
        freqs = np.fft.rfftfreq(len(x), 1 / sr)
        # STFT bins are 31.25 Hz wide
        assert abs(freqs[np.argmax(np.abs(np.fft.rfft(y)))] - 700) < 2 * 31.25


class TestToy:
    def test_corpus_and_split(self):
        toy = ToyCorpusSpec(n_per_category=12, seed=4)
        store, recs = generate_toy_corpus(toy, CFG)
        m = build_split(recs, toy.split_spec(6, 2, 4))
        test_methods = {r.gen_method for r in m.by_split(Split.TEST)}
        dev_methods = {r.gen_method for r in m.entries if r.split is not Split.TEST}
        assert not (test_methods & dev_methods) - {"none"}
        clips = load_clips(m.by_split(Split.TRAIN)[:5], store)
        assert clips.audio.shape == (5, 8, 13) and clips.frames.shape == (5, 2, 3, 100, 100)

    def test_media_deterministic(self):
        toy = ToyCorpusSpec(n_per_category=3, seed=9)
        a = generate_toy_corpus(toy, CFG)
        b = generate_toy_corpus(toy, CFG)
        for r in a[1][:20]:
            np.testing.assert_array_equal(a[0].clip(r)[0], b[0].clip(r)[0])
            np.testing.assert_array_equal(a[0].clip(r)[1], b[0].clip(r)[1])

    def test_unsynced_audio_is_shifted_real(self):
        toy = ToyCorpusSpec(n_per_category=3)
        store, recs = generate_toy_corpus(toy, CFG)
        u = next(r for r in recs if r.category is Category.UNSYNCED)
        _, k, src = u.audio_ref.split(":", 2)
        np.testing.assert_array_equal(store.features(u.audio_ref), np.roll(store.features(src), int(k), 0))

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            ToyCorpusSpec(holdout_styles=("sepia",))
        with pytest.raises(ValueError):
            ToyCorpusSpec(fafv_holdout=("stripes+vc",))

    def test_materialize_roundtrip(self, tmp_path):
        toy = ToyCorpusSpec(n_per_category=8)
        store, recs = generate_toy_corpus(toy, CFG)
        m = build_split(recs, toy.split_spec(3, 1, 2))
        written = materialize(m, store, tmp_path)
        files = FileMediaStore(tmp_path, CFG)
        a = load_clips(m.entries, store)
        b = load_clips(written.entries, files)
        np.testing.assert_allclose(a.audio, b.audio, atol=1e-6)
        np.testing.assert_array_equal(a.frames, b.frames)


class TestCorpusTable:
    def test_read(self, tmp_path):
        table = tmp_path / "c.csv"
        table.write_text("sample_id,audio_ref,visual_ref,category,gen_method\n"
                         "s1,a.wav,v.npy,RARV,none\ns2,b.wav,w.npy,FARV,tts\n")
        recs = read_corpus_table(table)
        assert [r.category for r in recs] == [Category.RARV, Category.FARV]
        assert recs[1].av_label == 1
