import csv
import json

import pytest
import yaml

from msoc.cli import EXIT_CONFIG, EXIT_DATA, main
from msoc.config import ConfigError, RunConfig
from msoc.data import load_manifest

TINY = {
    "data": {"toy_spec": {"n_per_category": 16}, "split": {"train_per_category": 8, "val_per_category": 3,
                                                        "test_per_category": 4}},
    "frontend": {"clip_frames": 2},
    "model": {"audio_width": 4, "visual_width": 4},
    "train": {"epochs": 1, "batch_size": 16, "seeds": [0, 1]},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    out = root / "out"
    assert main(["build-data", "--config", str(cfg), "--out-dir", str(out)]) == 0
    manifest = str(out / "manifest.tsv")
    assert main(["train", "--config", str(cfg), "--out-dir", str(out), "--manifest", manifest]) == 0
    assert main(["eval", "--config", str(cfg), "--out-dir", str(out), "--manifest", manifest]) == 0
    return cfg, out, manifest


class TestConfig:
    def test_defaults_resolve(self):
        cfg = RunConfig.load()
        r = cfg.resolved()
        assert r["train"]["epochs"] == 30 and r["train"]["lr"] == 2e-4 and r["train"]["batch_size"] == 64
        assert r["train"]["oc_params"] == {"alpha": 20.0, "m0": 0.9, "m1": 0.2}

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  epoch: 3\n")
        with pytest.raises(ConfigError, match="epoch"):
            RunConfig.load(p)

    def test_bad_encoder(self):
        with pytest.raises(ConfigError):
            RunConfig.load(overrides={"model": {"visual_encoder": "vit"}})


class TestPipeline:
    def test_build_outputs(self, run):
        _, out, manifest = run
        m = load_manifest(manifest)
        assert len(m.by_split("test")) == 5 * 4
        assert (out / "resolved_config.yaml").exists()
        assert not list(out.glob(".build-*"))
        r = m.entries[0]
        assert (out / "media" / r.audio_ref).exists() and (out / "media" / r.visual_ref).exists()

    def test_train_outputs(self, run):
        _, out, _ = run
        assert (out / "checkpoint" / "bundle.json").exists()
        lines = (out / "train_log.jsonl").read_text().splitlines()
        assert json.loads(lines[-1])["type"] == "epoch"

    def test_eval_reports(self, run):
        _, out, _ = run
        rows = list(csv.DictReader(open(out / "accuracy.csv")))
        assert {r["category"] for r in rows} == {"RAFV", "FAFV", "FARV", "UNSYNCED"}
        meta = json.loads((out / "histograms" / "histograms.json").read_text())
        assert len(meta) == 12 and all(m["threshold"] == 0.5 for m in meta)
        for m in meta:
            assert (out / "histograms" / m["figure"]).stat().st_size > 0
            counts = list(csv.DictReader(open(out / "histograms" / m["data"])))
            assert sum(int(c["real"]) for c in counts) == m["n_real"]
        emb = (out / "av_embeddings.tsv").read_text().splitlines()
        assert len(emb) == 1 + 20 and len(emb[0].split("\t")) == 2 + 256
        cen = (out / "av_centroids.tsv").read_text().splitlines()
        assert [c.split("\t")[0] for c in cen[1:]] == ["RARV", "RAFV", "FAFV", "FARV", "UNSYNCED"]
        assert "Branch AUC" in (out / "report.txt").read_text()

    def test_decisions_consistent(self, run):
        _, out, _ = run
        for row in csv.DictReader(open(out / "decisions.tsv"), delimiter="\t"):
            fused = (int(row["audio_bin"]) + int(row["visual_bin"]) + float(row["av_real_prob"])) / 3
            assert float(row["fused_score"]) == pytest.approx(fused, abs=1e-6)
            assert int(row["verdict"]) == (0 if fused > 0.5 else 1)

    def test_explain(self, run, capsys):
        cfg, out, manifest = run
        sid = load_manifest(manifest).by_split("test")[0].sample_id
        assert main(["explain", "--config", str(cfg), "--out-dir", str(out), "--manifest", manifest,
                     "--sample", sid]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].split("\t") == ["sample_id", "category", "av_real_prob", "audio", "visual"]
        assert lines[1].startswith(sid + "\t")

    def test_explain_unknown_sample(self, run):
        cfg, out, manifest = run
        assert main(["explain", "--config", str(cfg), "--out-dir", str(out), "--manifest", manifest,
                     "--sample", "ghost"]) == EXIT_DATA

    def test_run_seeds(self, run, tmp_path):
        cfg, _, manifest = run
        assert main(["run-seeds", "--config", str(cfg), "--out-dir", str(tmp_path), "--manifest", manifest,
                     "--mode", "avoc"]) == 0
        text = (tmp_path / "accuracy_seeds.txt").read_text()
        assert "AVOC" in text and "+-" in text
        rows = list(csv.DictReader(open(tmp_path / "accuracy_seeds.csv")))
        assert all(r["per_seed"].count(":") == 2 for r in rows)


class TestErrors:
    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--out-dir", str(tmp_path), "--manifest", str(tmp_path / "nope.tsv")]) == EXIT_DATA

    def test_bad_config(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("model:\n  mode: late\n")
        assert main(["build-data", "--config", str(p), "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_insufficient_data_leaves_nothing(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({**TINY, "data": {"toy_spec": {"n_per_category": 5}}}))
        out = tmp_path / "o"
        assert main(["build-data", "--config", str(p), "--out-dir", str(out)]) == EXIT_DATA
        assert not (out / "manifest.tsv").exists() and not (out / "media").exists()

    def test_corrupt_manifest(self, run, tmp_path):
        cfg, _, manifest = run
        bad = tmp_path / "manifest.tsv"
        bad.write_text(open(manifest).read().replace("synced=true", "synced=maybe", 1))
        (tmp_path / "media").mkdir()
        assert main(["eval", "--config", str(cfg), "--out-dir", str(tmp_path), "--manifest", str(bad)]) == EXIT_DATA
