import numpy as np
import pytest
import torch

from msoc.data import Split
from msoc.dataset import ToyCorpusSpec, build_split, generate_toy_corpus, load_clips
from msoc.encoders import EncoderSpec
from msoc.frontend import FrontendConfig
from msoc.train import (
    TrainConfig,
    TrainingError,
    _batches,
    accuracy,
    aggregate,
    auc,
    build_model,
    evaluate_clips,
    fit,
    run_seeds,
    select_best,
)


def brute_auc(scores, labels):
    real = [s for s, y in zip(scores, labels) if y == 0]
    fake = [s for s, y in zip(scores, labels) if y == 1]
    total = sum(1.0 if r > f else 0.5 if r == f else 0.0 for r in real for f in fake)
    return total / (len(real) * len(fake))


class TestMetrics:
    def test_auc_examples(self):
        assert auc([0.9, 0.1], [0, 1]) == 1.0
        assert auc([0.9, 0.1, 0.5, 0.5], [0, 1, 0, 1]) == 0.875
        assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_auc_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = rng.integers(2, 30)
            y = rng.integers(0, 2, n)
            y[:2] = [0, 1]
            s = rng.integers(0, 5, n) / 4.0
            assert auc(s, y) == brute_auc(s, y)

    def test_auc_needs_both(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [0, 0])

    def test_select_best_first_max(self):
        assert select_best([0.6, 0.9, 0.7]) == 1
        assert select_best([0.9, 0.9]) == 0

    def test_aggregate(self):
        mean, std = aggregate([80, 82, 78, 80])
        assert mean == 80.0 and std == pytest.approx(1.633, abs=1e-3)
        assert aggregate([71.0]) == (71.0, 0.0)
        with pytest.raises(ValueError):
            aggregate([])

    def test_accuracy(self):
        assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 75.0

    def test_batches_merge_singleton(self):
        batches = _batches(9, 4, np.random.default_rng(0))
        assert [len(b) for b in batches] == [4, 5]
        assert sorted(np.concatenate(batches).tolist()) == list(range(9))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(selection_metric="eer")


CFG = FrontendConfig(clip_frames=2)
SMALL = dict(audio_spec=EncoderSpec("audio_resnet", width=4), visual_spec=EncoderSpec("visual_resnet", width=4))


@pytest.fixture(scope="module")
def tiny():
    toy = ToyCorpusSpec(n_per_category=16, seed=0)
    store, recs = generate_toy_corpus(toy, CFG)
    m = build_split(recs, toy.split_spec(8, 3, 4))
    return m, {s: load_clips(m.by_split(s), store) for s in Split}


class TestFit:
    def test_logs_and_selection(self, tiny):
        _, clips = tiny
        cfg = TrainConfig(epochs=2, batch_size=16)
        seen = []
        res = fit(build_model(**SMALL, seed=0), clips[Split.TRAIN], clips[Split.VAL], cfg, log_fn=seen.append)
        assert res.best_epoch == select_best(res.val_aucs) + 1
        assert [r["type"] for r in seen].count("epoch") == 2
        batch = next(r for r in seen if r["type"] == "batch")
        assert {"l_aoc_audio", "l_voc_visual", "l_av_total", "batch_digest"} <= set(batch)
        # every branch sees the same batches in the same order
        assert res.schedule["audio"] == res.schedule["visual"] == res.schedule["av"]

    def test_best_checkpoint_restored(self, tiny):
        _, clips = tiny
        cfg = TrainConfig(epochs=3, batch_size=16)
        res = fit(build_model(**SMALL, seed=1), clips[Split.TRAIN], clips[Split.VAL], cfg, seed=1)
        from msoc.train import deployed_score, predict
        val_auc = auc(deployed_score(res.model, predict(res.model, clips[Split.VAL])), clips[Split.VAL].av_labels)
        assert val_auc == pytest.approx(max(res.val_aucs), abs=1e-12)

    def test_non_finite_loss(self, tiny):
        _, clips = tiny
        model = build_model(**SMALL)
        with torch.no_grad():
            for p in model.audio_branch.parameters():
                p.fill_(float("nan"))
        with pytest.raises((TrainingError, ValueError)):
            fit(model, clips[Split.TRAIN], clips[Split.VAL], TrainConfig(epochs=1, batch_size=16))

    def test_evaluate_and_seeds(self, tiny):
        m, clips = tiny
        cfg = TrainConfig(epochs=1, batch_size=16, seeds=(0, 1))
        rep = run_seeds(m, cfg, None, lambda s: build_model(**SMALL, seed=s), clips=clips)
        assert set(rep.per_seed) == {0, 1}
        assert set(rep.mean) == {"RAFV", "FAFV", "FARV", "UNSYNCED"}
        one = rep.per_seed[0]
        assert set(one.branch_auc) == {"audio", "visual", "av"}
        assert len(one.decisions) == len(clips[Split.TEST])

    def test_avoc_evaluation(self, tiny):
        _, clips = tiny
        model = build_model(**SMALL, mode="avoc").eval()
        rep = evaluate_clips(model, clips[Split.TEST])
        assert rep.accuracy == rep.avoc_accuracy
        assert set(rep.branch_auc) == {"av"}
