"""Shared-schedule training of the three branches, AUC model selection, evaluation."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import TEST_CATEGORIES, Category, Split
from .dataset import ClipData, load_clips
from .encoders import EncoderSpec
from .model import (
    BranchOutputs,
    FusionDecision,
    MSOCModel,
    avoc_verdicts,
    fuse_scores,
)
from .oc import OCSoftmaxParams

log = logging.getLogger(__name__)

BRANCH_ORDER = ("audio", "visual", "av")
BRANCH_LOSS = {"audio": "l_aoc_audio", "visual": "l_voc_visual", "av": "l_av_total"}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-4
    batch_size: int = 64
    oc_params: OCSoftmaxParams = field(default_factory=OCSoftmaxParams)
    seeds: tuple = (0, 1, 2, 3)
    selection_metric: str = "auc"
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr > 0")
        if self.selection_metric != "auc":
            raise ValueError("only AUC model selection is supported")
        if isinstance(self.oc_params, dict):
            self.oc_params = OCSoftmaxParams(**self.oc_params)
        self.seeds = tuple(self.seeds)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def build_model(audio_spec=EncoderSpec("audio_resnet"), visual_spec=EncoderSpec("visual_resnet"),
                mode="msoc", use_oc=True, oc_params=OCSoftmaxParams(), seed=0) -> MSOCModel:
    torch.manual_seed(seed)
    return MSOCModel(audio_spec, visual_spec, mode=mode, use_oc=use_oc, oc_params=oc_params)


def auc(scores, labels) -> float:
    """P(real score > fake score) with ties counted 1/2; label 0 = real, higher score = more real."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    real, fake = s[y == 0], s[y == 1]
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("AUC needs both real and fake samples")
    fake_sorted = np.sort(fake)
    below = np.searchsorted(fake_sorted, real, side="left")
    not_above = np.searchsorted(fake_sorted, real, side="right")
    wins = int(below.sum())
    ties = int((not_above - below).sum())
    return (wins + 0.5 * ties) / (len(real) * len(fake))


def select_best(val_aucs) -> int:
    """Index of the first maximal validation AUC."""
    return int(np.argmax(np.asarray(val_aucs, dtype=np.float64)))


def predict(model: MSOCModel, clips: ClipData, batch_size=128) -> BranchOutputs:
    model.eval()
    parts = []
    with torch.no_grad():
        for start in range(0, len(clips), batch_size):
            idx = np.arange(start, min(start + batch_size, len(clips)))
            parts.append(model(clips.batch(idx)).numpy())
    cat = lambda k: None if getattr(parts[0], k) is None else np.concatenate([getattr(p, k) for p in parts])
    return BranchOutputs(*(cat(k) for k in BranchOutputs.__dataclass_fields__))


def deployed_score(model: MSOCModel, out: BranchOutputs) -> np.ndarray:
    if model.mode == "avoc":
        return out.av_real_prob
    return fuse_scores(out.audio_oc_score, out.visual_oc_score, out.av_real_prob)[2]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _digest(ids) -> str:
    return hashlib.sha1("\n".join(ids).encode()).hexdigest()[:12]


@dataclass
class TrainResult:
    model: MSOCModel
    log: list
    val_aucs: list
    best_epoch: int  # 1-based
    schedule: dict  # branch -> list of batch digests


def fit(model: MSOCModel, train_clips: ClipData, val_clips: ClipData, cfg: TrainConfig,
        seed: int = 0, log_fn=None) -> TrainResult:
    if len(train_clips) == 0 or len(val_clips) == 0:
        raise TrainingError("train and val splits must be nonempty")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    branches = model.branches()
    optims = {name: torch.optim.Adam(branches[name].parameters(), lr=cfg.lr)
              for name in BRANCH_ORDER if name in branches}
    records, val_aucs, schedule = [], [], {name: [] for name in optims}
    best_state, best_auc = None, -math.inf

    def emit(rec):
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        for b, idx in enumerate(_batches(len(train_clips), cfg.batch_size, rng)):
            batch = train_clips.batch(idx)
            digest = _digest(batch.sample_ids)
            losses = {}
            for name, opt in optims.items():
                schedule[name].append(digest)
                opt.zero_grad(set_to_none=True)
                parts = model.branch_loss(name, batch)
                total = parts[BRANCH_LOSS[name]]
                if not bool(torch.isfinite(total)):
                    raise TrainingError(f"non-finite {name} loss at epoch {epoch} batch {b}")
                total.backward()
                opt.step()
                losses.update({k: float(v.detach()) for k, v in parts.items()})
            emit({"type": "batch", "epoch": epoch, "batch": b, "batch_digest": digest, **losses})
        out = predict(model, val_clips, cfg.eval_batch_size)
        val_auc = auc(deployed_score(model, out), val_clips.av_labels)
        val_aucs.append(val_auc)
        emit({"type": "epoch", "epoch": epoch, "val_auc": val_auc,
              **{f"val_auc_{k}": v for k, v in branch_aucs(model, out, val_clips).items()}})
        log.info("epoch %d val AUC %.4f", epoch, val_auc)
        if val_auc > best_auc:
            best_auc = val_auc
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, records, val_aucs, select_best(val_aucs) + 1, schedule)


def train(manifest, model: MSOCModel, cfg: TrainConfig, store, seed=0, log_fn=None) -> TrainResult:
    train_clips = load_clips(manifest.by_split(Split.TRAIN), store)
    val_clips = load_clips(manifest.by_split(Split.VAL), store)
    return fit(model, train_clips, val_clips, cfg, seed=seed, log_fn=log_fn)


def branch_aucs(model, out: BranchOutputs, clips: ClipData) -> dict[str, float]:
    """AUC of each branch's score against its own modality's labels, where defined."""
    pairs = {"av": (out.av_real_prob, clips.av_labels)}
    if model.mode == "msoc":
        pairs["audio"] = (out.audio_oc_score, clips.audio_labels)
        pairs["visual"] = (out.visual_oc_score, clips.visual_labels)
    result = {}
    for name, (s, y) in pairs.items():
        if 0 < int(np.sum(y)) < len(y):
            result[name] = auc(s, y)
    return result


def accuracy(verdicts, labels) -> float:
    verdicts, labels = np.asarray(verdicts), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.mean(verdicts == labels))


@dataclass
class EvalReport:
    accuracy: dict  # category -> percent
    branch_auc: dict  # branch -> AUC on the pooled test split
    decisions: dict  # sample_id -> FusionDecision (msoc) or verdict int (avoc)
    avoc_accuracy: dict = field(default_factory=dict)
    outputs: BranchOutputs | None = None
    records: list = field(default_factory=list)


def evaluate_clips(model: MSOCModel, test_clips: ClipData, batch_size=128) -> EvalReport:
    if len(test_clips) == 0:
        raise ValueError("empty test split")
    out = predict(model, test_clips, batch_size)
    avoc = avoc_verdicts(out.av_real_prob)
    if model.mode == "msoc":
        a_bin, v_bin, fused, verdict = fuse_scores(out.audio_oc_score, out.visual_oc_score,
                                                   out.av_real_prob)
        decisions = {r.sample_id: FusionDecision(int(a_bin[i]), int(v_bin[i]), float(out.av_real_prob[i]),
                                                 float(fused[i]), int(verdict[i]))
                     for i, r in enumerate(test_clips.records)}
    else:
        verdict = avoc
        decisions = {r.sample_id: int(verdict[i]) for i, r in enumerate(test_clips.records)}
    cats = np.array([r.category.value for r in test_clips.records])
    real = cats == Category.RARV.value
    acc, acc_avoc = {}, {}
    for cat in TEST_CATEGORIES:
        sel = real | (cats == cat.value)
        if not np.any(cats == cat.value):
            log.warning("test category %s absent; skipped", cat.value)
            continue
        acc[cat.value] = accuracy(verdict[sel], test_clips.av_labels[sel])
        acc_avoc[cat.value] = accuracy(avoc[sel], test_clips.av_labels[sel])
    return EvalReport(acc, branch_aucs(model, out, test_clips), decisions, acc_avoc, out,
                      list(test_clips.records))


def evaluate(manifest, model: MSOCModel, store, batch_size=128) -> EvalReport:
    test = manifest.by_split(Split.TEST)
    if not test:
        raise ValueError("manifest has no test split")
    return evaluate_clips(model, load_clips(test, store), batch_size)


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); a single value has std 0."""
    v = np.asarray(list(values), dtype=np.float64)
    if len(v) == 0:
        raise ValueError("nothing to aggregate")
    if len(v) == 1:
        log.warning("single seed: standard deviation reported as 0")
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


@dataclass
class SeedReport:
    per_seed: dict  # seed -> EvalReport
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    avoc_mean: dict = field(default_factory=dict)
    avoc_std: dict = field(default_factory=dict)

    def __post_init__(self):
        seeds = sorted(self.per_seed)
        cats = [c.value for c in TEST_CATEGORIES if all(c.value in self.per_seed[s].accuracy for s in seeds)]
        for c in cats:
            self.mean[c], self.std[c] = aggregate(self.per_seed[s].accuracy[c] for s in seeds)
            self.avoc_mean[c], self.avoc_std[c] = aggregate(
                self.per_seed[s].avoc_accuracy[c] for s in seeds)


def run_seeds(manifest, cfg: TrainConfig, store, model_factory, clips=None, log_fn=None
              ) -> SeedReport:
    """Train and evaluate one model per seed; ``model_factory(seed)`` builds a fresh model."""
    if clips is None:
        clips = {split: load_clips(manifest.by_split(split), store) for split in Split}
    reports = {}
    for seed in cfg.seeds:
        seed_everything(seed)
        result = fit(model_factory(seed), clips[Split.TRAIN], clips[Split.VAL], cfg, seed=seed,
                     log_fn=log_fn)
        reports[seed] = evaluate_clips(result.model, clips[Split.TEST], cfg.eval_batch_size)
    return SeedReport(reports)
