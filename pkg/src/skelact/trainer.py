"""Training loop: decoupled-weight-decay Adam, warmup+cosine schedule,
global-norm gradient clipping and the per-epoch metrics log.

Normalization scales, bias tables, positional-bias tables and the joint
embedding are excluded from weight decay. One data rng stream drives
shuffling and augmentation so a fixed seed reproduces the metrics log
byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .augment import (AugmentConfig, bone_length_adain, normalize_indices,
                      resample_frames, apply_skeletal_aug,
                      trimmed_uniform_sample)
from .model import (ModelConfig, ModelParams, init_params,
                    label_smoothed_ce, model_forward)
from .skeldata import (AdjacencyTable, Dataset, ModalityKind,
                       SkeletonSequence, adjacency_for, derive_modality)
from .tensor import GradTape, NumericError, Tensor


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    warmup_lr: float = 1e-7
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    epochs: int = 60
    batch: int = 16
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    early_stop_acc: float = 0.0   # 0 disables early stopping


_NO_DECAY_SUFFIXES = (".gamma", ".beta", ".b", ".rel", ".abs")


def _decays(name: str) -> bool:
    return not (name.endswith(_NO_DECAY_SUFFIXES) or name == "se")


class AdamW:
    def __init__(self, params: ModelParams, oc: OptimConfig):
        self.params = params
        self.oc = oc
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}

    def step(self, lr: float) -> None:
        oc = self.oc
        self.step_count += 1
        b1c = 1.0 - oc.beta1 ** self.step_count
        b2c = 1.0 - oc.beta2 ** self.step_count
        for name, t in self.params.tensors.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= oc.beta1
            m += (1.0 - oc.beta1) * g
            v *= oc.beta2
            v += (1.0 - oc.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + oc.eps)
            if _decays(name):
                update = update + oc.weight_decay * t.data
            t.data -= (lr * update).astype(t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.params.tensors.values():
            t.zero_grad()


def lr_at(epoch_float: float, oc: OptimConfig) -> float:
    if epoch_float < oc.warmup_epochs:
        frac = epoch_float / oc.warmup_epochs
        return oc.warmup_lr + frac * (oc.base_lr - oc.warmup_lr)
    span = max(oc.epochs - oc.warmup_epochs, 1)
    frac = min((epoch_float - oc.warmup_epochs) / span, 1.0)
    return oc.min_lr + 0.5 * (oc.base_lr - oc.min_lr) * (1 + math.cos(math.pi * frac))


def clip_global_norm(params: ModelParams, max_norm: float) -> float:
    total = 0.0
    for t in params.tensors.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for t in params.tensors.values():
            if t.grad is not None:
                t.grad = (t.grad * scale).astype(t.grad.dtype)
    return norm


def train_step(clips: np.ndarray, t_norm: np.ndarray, labels: np.ndarray,
               params: ModelParams, opt: AdamW, cfg: ModelConfig,
               lr: float, rng: np.random.Generator) -> tuple[float, float, np.ndarray]:
    """One optimization step; returns (loss, pre-clip grad norm, logits)."""
    opt.zero_grad()
    with GradTape() as tape:
        logits = model_forward(clips, t_norm, params, cfg, mode="train",
                               rng=rng)
        loss = label_smoothed_ce(logits, labels, opt.oc.label_smoothing)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise NumericError(
                f"non-finite loss {loss_val} at step {opt.step_count + 1}")
        tape.backward(loss)
    grad_norm = clip_global_norm(params, opt.oc.clip_norm)
    opt.step(lr)
    return loss_val, grad_norm, logits.data


# -- data plumbing ---------------------------------------------------------------

@dataclass
class Pipeline:
    """Sampling + augmentation front end shared by train and eval paths."""

    cfg: ModelConfig
    aug: AugmentConfig
    adj: AdjacencyTable
    modality: ModalityKind = ModalityKind.JOINT

    def prepare(self, seq: SkeletonSequence, mode: str,
                rng: np.random.Generator | None = None,
                by_label: dict[int, list[SkeletonSequence]] | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
        idx = trimmed_uniform_sample(seq.t_total, self.cfg.T, mode, rng)
        t_norm = normalize_indices(idx, seq.t_total)
        frames = resample_frames(seq.frames, idx)
        sampled = SkeletonSequence(frames, seq.label, seq.persons,
                                   seq.dataset_kind, seq.n_classes)
        if mode == "train":
            sampled = apply_skeletal_aug(sampled, self.aug, self.adj, rng,
                                         self.cfg.stage_layout(0))
            if by_label and rng.random() < self.aug.adain_prob:
                pool = by_label.get(seq.label, [])
                if pool:
                    ref = pool[rng.integers(len(pool))]
                    sampled = bone_length_adain(sampled, ref, t_norm, self.adj)
        out = derive_modality(sampled, self.adj, self.modality)
        return out.frames, t_norm


def evaluate(params: ModelParams, cfg: ModelConfig, dataset: Dataset,
             pipeline: Pipeline, batch: int = 32) -> tuple[float, np.ndarray]:
    """Deterministic eval accuracy plus per-sequence softmax probabilities."""
    probs = []
    labels = []
    seqs = dataset.sequences
    for start in range(0, len(seqs), batch):
        chunk = seqs[start:start + batch]
        clips = []
        norms = []
        for seq in chunk:
            frames, t_norm = pipeline.prepare(seq, "eval")
            clips.append(frames)
            norms.append(t_norm)
            labels.append(seq.label)
        logits = model_forward(np.stack(clips), np.stack(norms), params, cfg,
                               mode="eval")
        probs.append(tn.softmax_lastdim(logits).data)
    probs = np.concatenate(probs, axis=0)
    labels = np.array(labels)
    acc = float((probs.argmax(axis=1) == labels).mean())
    return acc, probs


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    lr: float


@dataclass
class TrainResult:
    metrics: list[EpochRecord]
    best_acc: float
    best_params: ModelParams
    final_params: ModelParams


def _snapshot(params: ModelParams) -> ModelParams:
    out = ModelParams()
    for name, t in params.tensors.items():
        out.add(name, t.data.copy())
    out.buffers = {k: v.copy() for k, v in params.buffers.items()}
    return out


def train_model(train_set: Dataset, eval_set: Dataset, cfg: ModelConfig,
                oc: OptimConfig, aug: AugmentConfig, seed: int = 1,
                modality: ModalityKind = ModalityKind.JOINT,
                progress=None) -> TrainResult:
    adj = adjacency_for(train_set.sequences[0].dataset_kind,
                        train_set.sequences[0].persons)
    pipeline = Pipeline(cfg, aug, adj, modality)
    ss = np.random.SeedSequence(seed)
    data_seed, model_seed, init_seed = ss.spawn(3)
    data_rng = np.random.default_rng(data_seed)
    model_rng = np.random.default_rng(model_seed)
    params = init_params(cfg, seed=int(init_seed.generate_state(1)[0]))
    opt = AdamW(params, oc)

    by_label: dict[int, list[SkeletonSequence]] = {}
    for seq in train_set.sequences:
        by_label.setdefault(seq.label, []).append(seq)

    n = len(train_set.sequences)
    steps_per_epoch = max(1, math.ceil(n / oc.batch))
    metrics: list[EpochRecord] = []
    best_acc, best_params = -1.0, _snapshot(params)
    for epoch in range(oc.epochs):
        order = data_rng.permutation(n)
        losses, correct, seen = [], 0, 0
        for step in range(steps_per_epoch):
            sel = order[step * oc.batch:(step + 1) * oc.batch]
            if sel.size == 0:
                continue
            clips, norms, labels = [], [], []
            for i in sel:
                seq = train_set.sequences[int(i)]
                frames, t_norm = pipeline.prepare(seq, "train", data_rng,
                                                  by_label)
                clips.append(frames)
                norms.append(t_norm)
                labels.append(seq.label)
            lr = lr_at(epoch + step / steps_per_epoch, oc)
            loss, _, logits = train_step(np.stack(clips), np.stack(norms),
                                         np.array(labels), params, opt, cfg,
                                         lr, model_rng)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == np.array(labels)).sum())
            seen += len(labels)
        eval_acc, _ = evaluate(params, cfg, eval_set, pipeline, oc.batch)
        rec = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)),
                          train_acc=correct / max(seen, 1), eval_acc=eval_acc,
                          lr=lr_at(float(epoch), oc))
        metrics.append(rec)
        if progress is not None:
            progress(rec)
        if eval_acc > best_acc:
            best_acc = eval_acc
            best_params = _snapshot(params)
        if oc.early_stop_acc and eval_acc >= oc.early_stop_acc:
            break
    return TrainResult(metrics=metrics, best_acc=best_acc,
                       best_params=best_params, final_params=params)


def metrics_to_csv(metrics: list[EpochRecord]) -> str:
    lines = ["epoch,train_loss,train_acc,eval_acc,lr"]
    for r in metrics:
        lines.append(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},"
                     f"{r.eval_acc:.6f},{r.lr:.8f}")
    return "\n".join(lines) + "\n"
