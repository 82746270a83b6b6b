import numpy as np
import pytest
import torch

from msoc.data import ClipBatch
from msoc.encoders import EncoderSpec
from msoc.model import (
    MSOCModel,
    compute_losses,
    explain,
    fuse,
    fuse_avoc,
    fuse_scores,
    load_checkpoint,
    model_scores,
    save_checkpoint,
    state_digest,
)

SMALL_A = EncoderSpec("audio_resnet", width=4)
SMALL_V = EncoderSpec("visual_resnet", width=4)


def random_batch(B=4, T=2, seed=0):
    rng = np.random.default_rng(seed)
    return ClipBatch(rng.standard_normal((B, 4 * T, 13)).astype(np.float32),
                     rng.uniform(size=(B, T, 3, 100, 100)).astype(np.float32),
                     np.array([0, 1, 0, 1][:B]), np.array([0, 0, 1, 1][:B]), np.array([0, 1, 1, 1][:B]))


def small_model(**kw):
    torch.manual_seed(0)
    return MSOCModel(SMALL_A, SMALL_V, **kw)


class TestFusion:
    @pytest.mark.parametrize("a,v,av,bins,fused,verdict", [
        (0.8, 0.9, 0.9, (1, 1), 0.9667, 0),
        (0.8, 0.3, 0.7, (1, 0), 0.5667, 0),
        (-0.2, 0.1, 0.9, (0, 0), 0.3, 1),
    ])
    def test_worked_examples(self, a, v, av, bins, fused, verdict):
        a_bin, v_bin, f, out = fuse_scores([a], [v], [av])
        assert (a_bin[0], v_bin[0]) == bins
        assert f[0] == pytest.approx(fused, abs=1e-4)
        assert out[0] == verdict

    def test_tie_is_fake(self):
        # bins (1, 0) and av 0.5 give exactly 0.5
        assert fuse_scores([0.9], [0.1], [0.5])[3][0] == 1
        # a score equal to the threshold binarizes to fake
        assert fuse_scores([0.5], [0.9], [0.9])[0][0] == 0

    def test_avoc(self):
        from msoc.model import BranchOutputs
        out = BranchOutputs(None, None, None, None, np.array([0.5, 0.51, 0.2]), np.zeros((3, 4)))
        assert fuse_avoc(out).tolist() == [1, 0, 1]
        with pytest.raises(ValueError):
            fuse(out)

    def test_explain(self):
        from msoc.model import BranchOutputs
        out = BranchOutputs(None, None, np.array([0.9, 0.1]), np.array([0.2, 0.8]), np.array([0.3, 0.7]),
                            np.zeros((2, 4)))
        rows = explain(out)
        assert rows[0] == {"av": 0.3, "audio": "real", "visual": "fake"}
        assert rows[1]["audio"] == "fake" and rows[1]["visual"] == "real"


class TestModel:
    def test_forward_shapes(self):
        model = small_model().eval()
        with torch.no_grad():
            out = model(random_batch()).numpy()
        assert out.audio_oc_score.shape == (4,) and out.av_embedding.shape == (4, 256)
        assert np.all((out.av_real_prob >= 0) & (out.av_real_prob <= 1))
        assert np.all(np.abs(out.audio_oc_score) <= 1)

    def test_avoc_has_single_branch(self):
        model = small_model(mode="avoc")
        assert list(model.branches()) == ["av"]
        out = model.eval()(random_batch())
        assert out.audio_oc_score is None
        assert set(model_scores(model, out)) == {"av", "fused"}

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            MSOCModel(SMALL_A, SMALL_V, mode="late")

    def test_losses_finite_and_decomposed(self):
        losses = compute_losses(random_batch(), small_model()).as_floats()
        assert all(np.isfinite(v) for v in losses.values())
        assert losses["l_av_total"] == pytest.approx(
            losses["l_aoc_av"] + losses["l_voc_av"] + losses["l_ce_av"], rel=1e-6)

    def test_no_oc_av_loss_is_ce(self):
        losses = compute_losses(random_batch(), small_model(use_oc=False)).as_floats()
        assert losses["l_aoc_av"] == 0.0 and losses["l_voc_av"] == 0.0
        assert losses["l_av_total"] == pytest.approx(losses["l_ce_av"])

    def test_avoc_losses_report_nan_for_missing_branches(self):
        losses = compute_losses(random_batch(), small_model(mode="avoc")).as_floats()
        assert np.isnan(losses["l_aoc_audio"]) and np.isfinite(losses["l_av_total"])

    def test_missing_labels(self):
        b = random_batch()
        b.av_labels = None
        with pytest.raises(ValueError, match="labels"):
            small_model().branch_loss("av", b)

    def test_branch_loss_touches_one_branch(self):
        model = small_model()
        model.branch_loss("audio", random_batch())["l_aoc_audio"].backward()
        for name, branch in model.branches().items():
            has_grad = any(p.grad is not None for p in branch.parameters())
            assert has_grad == (name == "audio")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = small_model()
        save_checkpoint(model, tmp_path / "ck", extra={"seed": 3})
        assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == [
            "audio_branch.safetensors", "av_branch.safetensors", "bundle.json", "visual_branch.safetensors"]
        back = load_checkpoint(tmp_path / "ck")
        assert state_digest(back) == state_digest(model)
        with torch.no_grad():
            b = random_batch()
            np.testing.assert_array_equal(model.eval()(b).numpy().av_real_prob, back(b).numpy().av_real_prob)

    def test_partial_load(self, tmp_path):
        save_checkpoint(small_model(), tmp_path)
        torch.manual_seed(1)
        back = load_checkpoint(tmp_path, branches=["audio"])
        ref = small_model()
        assert state_digest(back.audio_branch) == state_digest(ref.audio_branch)
        assert state_digest(back.visual_branch) != state_digest(ref.visual_branch)

    def test_hash_mismatch(self, tmp_path):
        import json
        save_checkpoint(small_model(), tmp_path)
        bundle = json.loads((tmp_path / "bundle.json").read_text())
        bundle["config_hash"] = "0" * 16
        (tmp_path / "bundle.json").write_text(json.dumps(bundle))
        with pytest.raises(ValueError, match="hash"):
            load_checkpoint(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent")
