"""Frame sampling and skeletal/inter-instance augmentation.

Intra-instance: trimmed-uniform frame sampling (random portion p in train
mode, deterministic centered p=0.95 in eval mode) followed by per-sequence
linear coordinate maps (shear, rotation, scaling) and index-level edits
(left/right flip, coordinate dropout, partition-aligned joint dropout,
actor permutation). Inter-instance: bone-length transfer from a same-label
reference clip with directions preserved.

Order is fixed: sample frames, then skeletal transforms, then the bone
length transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .partition import PartitionLayout, njp_view
from .skeldata import (AdjacencyTable, SkeletonSequence, bones_to_joints,
                       joints_to_bones)

ADAIN_EPS = 1e-6


@dataclass
class SampleIndices:
    t_idx: np.ndarray   # length-T frame indices (int) or fractional positions
    p: float
    t_s: int
    t_e: int

    @property
    def fractional(self) -> bool:
        return self.t_idx.dtype.kind == "f"


@dataclass
class AugmentConfig:
    """Per-transform application probabilities and parameter ranges."""

    shear_prob: float = 0.5
    shear_range: float = 0.5
    rotation_prob: float = 0.5
    rotation_range: float = np.pi / 6
    scaling_prob: float = 0.5
    scaling_range: tuple[float, float] = (0.8, 1.2)
    flip_prob: float = 0.5
    coord_dropout_prob: float = 0.5
    joint_dropout_prob: float = 0.5
    actor_permutation_prob: float = 0.5
    adain_prob: float = 0.2

    @staticmethod
    def nwucla_defaults() -> "AugmentConfig":
        return AugmentConfig(shear_prob=0.0,
                             rotation_prob=1.0, rotation_range=np.pi / 3,
                             scaling_prob=1.0, scaling_range=(0.5, 1.5),
                             flip_prob=0.0, coord_dropout_prob=0.0,
                             joint_dropout_prob=0.0,
                             actor_permutation_prob=0.0)

    @staticmethod
    def ntu_defaults() -> "AugmentConfig":
        return AugmentConfig()

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(shear_prob=0.0, rotation_prob=0.0,
                             scaling_prob=0.0, flip_prob=0.0,
                             coord_dropout_prob=0.0, joint_dropout_prob=0.0,
                             actor_permutation_prob=0.0, adain_prob=0.0)


# -- temporal sampling --------------------------------------------------------

def trimmed_uniform_sample(t_total: int, t_out: int, mode: str = "eval",
                           rng: np.random.Generator | None = None,
                           p_override: float | None = None) -> SampleIndices:
    """Pick T frame indices from a trimmed portion of the clip.

    Train mode draws p ~ U[0.5, 1] and a random trim start; eval mode uses
    p = 0.95 with a centered trim. One index is drawn per equal sub-interval
    of the trimmed range. When the trimmed range is shorter than T, the
    output is T fractional positions spread linearly over the range instead.
    """
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode sampling requires an rng")
        p = float(rng.uniform(0.5, 1.0)) if p_override is None else p_override
        t_s = int(rng.integers(0, int(t_total * (1.0 - p)) + 1))
    elif mode == "eval":
        p = 0.95 if p_override is None else p_override
        t_s = int(t_total * (1.0 - p) / 2.0)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    length = int(t_total * p)
    t_e = t_s + length

    if length < t_out:
        idx = np.linspace(t_s, max(t_e - 1, t_s), t_out)
        return SampleIndices(idx, p, t_s, t_e)

    edges = t_s + np.arange(t_out + 1) * (length / t_out)
    lo = np.ceil(edges[:-1]).astype(np.int64)
    hi = np.maximum(np.ceil(edges[1:]).astype(np.int64) - 1, lo)
    hi = np.minimum(hi, t_e - 1)
    if mode == "train":
        picks = np.array([int(rng.integers(a, b + 1))
                          for a, b in zip(lo, hi)], dtype=np.int64)
    else:
        picks = (lo + hi) // 2
    return SampleIndices(picks, p, t_s, t_e)


def resample_frames(frames: np.ndarray, idx: SampleIndices) -> np.ndarray:
    """Gather (or linearly interpolate) the sampled frames."""
    if not idx.fractional:
        return frames[idx.t_idx].copy()
    pos = np.clip(idx.t_idx, 0, frames.shape[0] - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, frames.shape[0] - 1)
    w = (pos - lo).astype(frames.dtype)[:, None, None]
    return frames[lo] * (1 - w) + frames[hi] * w


def normalize_indices(idx: SampleIndices, t_total: int) -> np.ndarray:
    """Map sampled positions into [-1, 1] over the source clip."""
    if t_total <= 1:
        return np.zeros(len(idx.t_idx))
    return 2.0 * np.asarray(idx.t_idx, dtype=np.float64) / (t_total - 1) - 1.0


# -- skeletal transforms --------------------------------------------------------

def shear_matrix(sh1: float, sh2: float) -> np.ndarray:
    return np.array([[1.0, sh1, sh2],
                     [sh1, 1.0, sh2],
                     [sh1, sh2, 1.0]])


_AXIS_PAIRS = ((0, 1), (1, 2), (0, 2))


def rotation_matrix(theta: float, axes: tuple[int, int]) -> np.ndarray:
    rot = np.eye(3)
    a, b = axes
    rot[a, a] = np.cos(theta)
    rot[a, b] = -np.sin(theta)
    rot[b, a] = np.sin(theta)
    rot[b, b] = np.cos(theta)
    return rot


def apply_skeletal_aug(seq: SkeletonSequence, cfg: AugmentConfig,
                       adj: AdjacencyTable, rng: np.random.Generator,
                       layout: PartitionLayout | None = None) -> SkeletonSequence:
    """Each transform fires independently with its own probability."""
    frames = seq.frames.astype(np.float64)
    linear = np.eye(3)
    if rng.random() < cfg.shear_prob:
        sh1, sh2 = rng.uniform(-cfg.shear_range, cfg.shear_range, size=2)
        linear = shear_matrix(sh1, sh2) @ linear
    if rng.random() < cfg.rotation_prob:
        theta = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
        axes = _AXIS_PAIRS[rng.integers(len(_AXIS_PAIRS))]
        linear = rotation_matrix(theta, axes) @ linear
    if rng.random() < cfg.scaling_prob:
        scales = rng.uniform(*cfg.scaling_range, size=3)
        linear = np.diag(scales) @ linear
    frames = frames @ linear.T

    if rng.random() < cfg.flip_prob:
        for a, b in adj.left_right_pairs:
            frames[:, [a, b]] = frames[:, [b, a]]
    if rng.random() < cfg.coord_dropout_prob:
        frames[:, :, rng.integers(3)] = 0.0
    if rng.random() < cfg.joint_dropout_prob and layout is not None:
        blocks = njp_view(layout)
        block = blocks[rng.integers(len(blocks))]
        frames[:, layout.joint_order[block]] = 0.0
    if seq.persons > 1 and rng.random() < cfg.actor_permutation_prob:
        jpp = seq.v_raw // seq.persons
        perm = rng.permutation(seq.persons)
        frames = frames.reshape(frames.shape[0], seq.persons, jpp, 3)
        frames = frames[:, perm].reshape(frames.shape[0], seq.v_raw, 3)

    return SkeletonSequence(frames.astype(np.float32), seq.label, seq.persons,
                            seq.dataset_kind, seq.n_classes)


# -- inter-instance -------------------------------------------------------------

def bone_length_adain(seq: SkeletonSequence, ref_seq_full: SkeletonSequence,
                      t_idx_norm: np.ndarray,
                      adj: AdjacencyTable) -> SkeletonSequence:
    """Transfer per-frame per-bone lengths from a same-label reference.

    The reference (unsampled) clip is resampled at the input's normalized
    temporal indices; every non-root bone keeps its direction and takes the
    reference length via r = (L_ref + eps) / (L + eps). Roots keep their
    original positions.
    """
    t_ref = ref_seq_full.t_total
    ref_idx = ((np.asarray(t_idx_norm) + 1.0) / 2.0 * t_ref).astype(np.int64)
    ref_idx = np.clip(ref_idx, 0, t_ref - 1)
    ref = ref_seq_full.frames[ref_idx].astype(np.float64)

    frames = seq.frames.astype(np.float64)
    bones = joints_to_bones(frames, adj)
    ref_bones = joints_to_bones(ref, adj)
    lengths = np.linalg.norm(bones, axis=2, keepdims=True)
    ref_lengths = np.linalg.norm(ref_bones, axis=2, keepdims=True)
    ratio = (ref_lengths + ADAIN_EPS) / (lengths + ADAIN_EPS)
    roots = adj.roots()
    ratio[:, roots] = 1.0
    adapted = bones_to_joints(bones * ratio, adj)
    return SkeletonSequence(adapted.astype(np.float32), seq.label,
                            seq.persons, seq.dataset_kind, seq.n_classes)
