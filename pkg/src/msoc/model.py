"""Multi-stream model: audio, visual and audio-visual branches, losses and score fusion."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

from .encoders import EncoderSpec, build_encoder
from .oc import OCSoftmax, OCSoftmaxParams, cross_entropy

THRESHOLD = 0.5
MODES = ("msoc", "avoc")
BRANCHES = ("audio", "visual", "av")


class UnimodalBranch(nn.Module):
    """One encoder scored against a one-class center (or a softmax head without OC)."""

    def __init__(self, spec: EncoderSpec, use_oc=True, oc_params=OCSoftmaxParams()):
        super().__init__()
        self.encoder = build_encoder(spec)
        self.use_oc = use_oc
        if use_oc:
            self.oc = OCSoftmax(spec.out_dim, oc_params)
        else:
            self.head = nn.Linear(spec.out_dim, 2)

    def score(self, emb):
        if self.use_oc:
            return self.oc.score(emb)
        return torch.softmax(self.head(emb), dim=1)[:, 0]

    def loss(self, emb, labels):
        if self.use_oc:
            return self.oc(emb, labels)
        return cross_entropy(self.head(emb), labels)


def classifier_head(in_dim):
    return nn.Sequential(nn.Linear(in_dim, 128), nn.ReLU(), nn.Linear(128, 64), nn.ReLU(),
                         nn.Linear(64, 2))


class AVBranch(nn.Module):
    def __init__(self, audio_spec, visual_spec, use_oc=True, oc_params=OCSoftmaxParams()):
        super().__init__()
        self.audio_encoder = build_encoder(audio_spec)
        self.visual_encoder = build_encoder(visual_spec)
        self.use_oc = use_oc
        if use_oc:
            self.oc_audio = OCSoftmax(audio_spec.out_dim, oc_params)
            self.oc_visual = OCSoftmax(visual_spec.out_dim, oc_params)
        self.head = classifier_head(audio_spec.out_dim + visual_spec.out_dim)

    def embed(self, audio, frames):
        return self.audio_encoder(audio), self.visual_encoder(frames)

    def logits(self, a_emb, v_emb):
        return self.head(torch.cat([a_emb, v_emb], dim=1))


@dataclass
class BranchOutputs:
    audio_emb: torch.Tensor | None
    visual_emb: torch.Tensor | None
    audio_oc_score: torch.Tensor | None
    visual_oc_score: torch.Tensor | None
    av_real_prob: torch.Tensor
    av_embedding: torch.Tensor  # concatenated AV-branch audio and visual embeddings

    def numpy(self) -> "BranchOutputs":
        conv = lambda t: None if t is None else np.asarray(
            t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t)
        return BranchOutputs(*(conv(getattr(self, k)) for k in self.__dataclass_fields__))


@dataclass
class LossBreakdown:
    l_aoc_audio: torch.Tensor
    l_voc_visual: torch.Tensor
    l_aoc_av: torch.Tensor
    l_voc_av: torch.Tensor
    l_ce_av: torch.Tensor
    l_av_total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in self.__dataclass_fields__}


def _as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class MSOCModel(nn.Module):
    """Three independently trained branches; in ``avoc`` mode only the AV branch exists."""

    def __init__(self, audio_spec=EncoderSpec("audio_resnet"), visual_spec=EncoderSpec("visual_resnet"),
                 mode="msoc", use_oc=True, oc_params=OCSoftmaxParams()):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if audio_spec.kind != "audio_resnet" or not visual_spec.kind.startswith("visual_"):
            raise ValueError("audio_spec must be an audio encoder and visual_spec a visual encoder")
        self.audio_spec, self.visual_spec = audio_spec, visual_spec
        self.mode, self.use_oc, self.oc_params = mode, use_oc, oc_params
        if mode == "msoc":
            self.audio_branch = UnimodalBranch(audio_spec, use_oc, oc_params)
            self.visual_branch = UnimodalBranch(visual_spec, use_oc, oc_params)
        else:
            self.audio_branch = self.visual_branch = None
        self.av_branch = AVBranch(audio_spec, visual_spec, use_oc, oc_params)

    def branches(self) -> dict[str, nn.Module]:
        named = {"audio": self.audio_branch, "visual": self.visual_branch, "av": self.av_branch}
        return {k: v for k, v in named.items() if v is not None}

    def config(self) -> dict:
        return {"mode": self.mode, "use_oc": self.use_oc, "oc_params": asdict(self.oc_params),
                "audio_spec": asdict(self.audio_spec), "visual_spec": asdict(self.visual_spec)}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config(), sort_keys=True).encode()).hexdigest()[:16]

    @staticmethod
    def _inputs(batch):
        audio = _as_tensor(batch.audio_features)
        frames = _as_tensor(batch.visual_frames)
        return audio, frames

    def forward(self, batch) -> BranchOutputs:
        audio, frames = self._inputs(batch)
        a_emb = v_emb = a_score = v_score = None
        if self.mode == "msoc":
            a_emb = self.audio_branch.encoder(audio)
            v_emb = self.visual_branch.encoder(frames)
            a_score = self.audio_branch.score(a_emb)
            v_score = self.visual_branch.score(v_emb)
        av_a, av_v = self.av_branch.embed(audio, frames)
        prob = torch.softmax(self.av_branch.logits(av_a, av_v), dim=1)[:, 0]
        return BranchOutputs(a_emb, v_emb, a_score, v_score, prob, torch.cat([av_a, av_v], dim=1))

    def branch_loss(self, name, batch) -> dict[str, torch.Tensor]:
        """Losses of a single branch on ``batch``; only that branch's parameters enter the graph."""
        if batch.audio_labels is None or batch.visual_labels is None or batch.av_labels is None:
            raise ValueError("batch is missing modality labels")
        audio, frames = self._inputs(batch)
        ya = _as_tensor(batch.audio_labels, torch.long)
        yv = _as_tensor(batch.visual_labels, torch.long)
        yav = _as_tensor(batch.av_labels, torch.long)
        if name == "audio":
            br = self.audio_branch
            return {"l_aoc_audio": br.loss(br.encoder(audio), ya)}
        if name == "visual":
            br = self.visual_branch
            return {"l_voc_visual": br.loss(br.encoder(frames), yv)}
        if name != "av":
            raise ValueError(f"unknown branch {name!r}")
        br = self.av_branch
        a_emb, v_emb = br.embed(audio, frames)
        ce = cross_entropy(br.logits(a_emb, v_emb), yav)
        if self.use_oc:
            l_aoc, l_voc = br.oc_audio(a_emb, ya), br.oc_visual(v_emb, yv)
        else:
            l_aoc = l_voc = torch.zeros((), dtype=ce.dtype)
        return {"l_aoc_av": l_aoc, "l_voc_av": l_voc, "l_ce_av": ce, "l_av_total": l_aoc + l_voc + ce}


def compute_losses(batch, model: MSOCModel) -> LossBreakdown:
    parts = {}
    for name in model.branches():
        parts.update(model.branch_loss(name, batch))
    nan = torch.tensor(float("nan"))
    fields = LossBreakdown.__dataclass_fields__
    return LossBreakdown(**{k: parts.get(k, nan) for k in fields})


@dataclass(frozen=True)
class FusionDecision:
    audio_bin: int
    visual_bin: int
    av_real_prob: float
    fused_score: float
    verdict: int  # 0 real, 1 fake


def fuse_scores(audio_score, visual_score, av_real_prob):
    """Vectorized fusion; returns (audio_bin, visual_bin, fused_score, verdict) arrays."""
    a = np.asarray(audio_score, dtype=np.float64)
    v = np.asarray(visual_score, dtype=np.float64)
    av = np.asarray(av_real_prob, dtype=np.float64)
    a_bin = (a > THRESHOLD).astype(np.int64)
    v_bin = (v > THRESHOLD).astype(np.int64)
    fused = (a_bin + v_bin + av) / 3.0
    verdict = np.where(fused > THRESHOLD, 0, 1)
    return a_bin, v_bin, fused, verdict


def _scores(outputs):
    out = outputs.numpy() if isinstance(outputs.av_real_prob, torch.Tensor) else outputs
    return out.audio_oc_score, out.visual_oc_score, out.av_real_prob


def fuse(outputs: BranchOutputs) -> list[FusionDecision]:
    a, v, av = _scores(outputs)
    if a is None or v is None:
        raise ValueError("fusion needs audio and visual branch scores; use fuse_avoc in avoc mode")
    a_bin, v_bin, fused, verdict = fuse_scores(a, v, av)
    return [FusionDecision(int(a_bin[i]), int(v_bin[i]), float(av[i]), float(fused[i]), int(verdict[i]))
            for i in range(len(fused))]


def avoc_verdicts(av_real_prob) -> np.ndarray:
    return np.where(np.asarray(av_real_prob, dtype=np.float64) > THRESHOLD, 0, 1)


def fuse_avoc(outputs: BranchOutputs) -> np.ndarray:
    return avoc_verdicts(_scores(outputs)[2])


def explain(outputs: BranchOutputs) -> list[dict]:
    """Per-sample modality readout: which stream looks fake, plus the AV real-probability."""
    a, v, av = _scores(outputs)
    name = {0: "fake", 1: "real"}
    rows = []
    for i in range(len(av)):
        row = {"av": float(av[i])}
        if a is not None:
            row["audio"] = name[int(a[i] > THRESHOLD)]
            row["visual"] = name[int(v[i] > THRESHOLD)]
        rows.append(row)
    return rows


def model_scores(model: MSOCModel, outputs: BranchOutputs) -> dict[str, np.ndarray]:
    """Deployed scores: fused score in msoc mode, AV real-probability in avoc mode."""
    out = outputs.numpy()
    scores = {"av": out.av_real_prob}
    if model.mode == "msoc":
        scores["audio"], scores["visual"] = out.audio_oc_score, out.visual_oc_score
        scores["fused"] = fuse_scores(out.audio_oc_score, out.visual_oc_score, out.av_real_prob)[2]
    else:
        scores["fused"] = out.av_real_prob
    return scores


def save_checkpoint(model: MSOCModel, directory, extra: dict | None = None) -> Path:
    """Write one safetensors container per branch plus a JSON bundle header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"config": model.config(), "config_hash": model.config_hash(), "branches": {},
              "extra": extra or {}}
    for name, branch in model.branches().items():
        state = {k: v.detach().clone().contiguous() for k, v in branch.state_dict().items()}
        fname = f"{name}_branch.safetensors"
        save_file(state, str(directory / fname),
                  metadata={"branch": name, "config_hash": header["config_hash"],
                            "config": json.dumps(model.config(), sort_keys=True)})
        header["branches"][name] = {
            "file": fname, "centers": sorted(k for k in state if k.endswith("center"))}
    (directory / "bundle.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return directory


def model_from_config(cfg: dict) -> MSOCModel:
    return MSOCModel(EncoderSpec(**cfg["audio_spec"]), EncoderSpec(**cfg["visual_spec"]),
                     mode=cfg["mode"], use_oc=cfg["use_oc"], oc_params=OCSoftmaxParams(**cfg["oc_params"]))


def load_checkpoint(directory, branches=None) -> MSOCModel:
    """Rebuild a model from a bundle; ``branches`` restricts which branch weights are loaded."""
    directory = Path(directory)
    bundle = directory / "bundle.json"
    if not bundle.exists():
        raise FileNotFoundError(f"no checkpoint bundle at {directory}")
    header = json.loads(bundle.read_text())
    model = model_from_config(header["config"])
    if model.config_hash() != header["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    for name, branch in model.branches().items():
        if branches is not None and name not in branches:
            continue
        branch.load_state_dict(load_file(str(directory / header["branches"][name]["file"])))
    model.eval()
    return model


def state_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
