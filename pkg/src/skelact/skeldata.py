"""Skeleton sequence data model, SKEL1 container IO and synthetic data.

The synthetic generator emits 20-joint single-person clips in four class
families, each designed to require one of the four partition-attention
relation types: fine one-hand oscillation, anti-phase two-hand motion,
slow single-limb trajectory, and whole-body translation with limb-pair
phase offsets. Per-sample directions and phases are randomized so that
time-averaged poses carry almost no class signal.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """Malformed SKEL1 container; message carries the byte offset."""


class StructureError(ValueError):
    """Adjacency table is not a forest."""


class ModalityKind(enum.Enum):
    JOINT = "joint"
    BONE = "bone"
    JOINT_MOTION = "joint_motion"
    BONE_MOTION = "bone_motion"


_DATASET_KINDS = ("ntu_like", "nwucla_like", "synthetic")


@dataclass
class AdjacencyTable:
    """Kinematic forest: per-joint parent index, roots self-parented."""

    parent: np.ndarray
    left_right_pairs: list[tuple[int, int]]

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self._check_forest()

    def _check_forest(self):
        n = self.parent.size
        for j in range(n):
            seen = set()
            cur = j
            while self.parent[cur] != cur:
                if cur in seen:
                    raise StructureError(f"adjacency cycle through joint {j}")
                seen.add(cur)
                cur = int(self.parent[cur])

    def roots(self) -> np.ndarray:
        return np.nonzero(self.parent == np.arange(self.parent.size))[0]

    def topological_order(self) -> list[int]:
        """Joints ordered so every parent precedes its children."""
        order, placed = [], set()
        pending = list(range(self.parent.size))
        while pending:
            rest = []
            for j in pending:
                p = int(self.parent[j])
                if p == j or p in placed:
                    order.append(j)
                    placed.add(j)
                else:
                    rest.append(j)
            pending = rest
        return order


# 20-joint Kinect-v1 style skeleton (0-based): spine chain, head, two arms
# hanging from the neck, two legs from the spine base.
_PARENT_20 = [0, 0, 1, 2,
              2, 4, 5, 6,      # left arm: shoulder<-neck, elbow, wrist, hand
              2, 8, 9, 10,     # right arm
              0, 12, 13, 14,   # left leg: hip<-base, knee, ankle, foot
              0, 16, 17, 18]   # right leg
_PAIRS_20 = [(4, 8), (5, 9), (6, 10), (7, 11),
             (12, 16), (13, 17), (14, 18), (15, 19)]

# 25-joint Kinect-v2 skeleton; joint 20 (0-based) is the mid-spine hub.
_PARENT_25 = [0, 0, 20, 2,
              20, 4, 5, 6,
              20, 8, 9, 10,
              0, 12, 13, 14,
              0, 16, 17, 18,
              1,
              7, 7,            # tip / thumb of left hand
              11, 11]          # tip / thumb of right hand
_PAIRS_25 = _PAIRS_20 + [(21, 23), (22, 24)]


def adjacency_for(dataset_kind: str, persons: int = 1) -> AdjacencyTable:
    if dataset_kind in ("nwucla_like", "synthetic"):
        base_parent, base_pairs, jpp = _PARENT_20, _PAIRS_20, 20
    elif dataset_kind == "ntu_like":
        base_parent, base_pairs, jpp = _PARENT_25, _PAIRS_25, 25
    else:
        raise ValueError(f"unknown dataset kind {dataset_kind!r}")
    parent = []
    pairs = []
    for p in range(persons):
        off = p * jpp
        parent.extend(j + off for j in base_parent)
        pairs.extend((a + off, b + off) for a, b in base_pairs)
    return AdjacencyTable(np.array(parent), pairs)


@dataclass
class SkeletonSequence:
    frames: np.ndarray      # (T_total, V_raw, 3) float32
    label: int
    persons: int = 1
    dataset_kind: str = "synthetic"
    n_classes: int = 0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (T, V, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("sequence must contain at least one frame")
        if not np.isfinite(self.frames).all():
            raise ValueError("coordinates must be finite")

    @property
    def t_total(self) -> int:
        return self.frames.shape[0]

    @property
    def v_raw(self) -> int:
        return self.frames.shape[1]


@dataclass
class Dataset:
    sequences: list[SkeletonSequence]
    class_names: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


# -- modalities -------------------------------------------------------------

def joints_to_bones(frames: np.ndarray, adj: AdjacencyTable) -> np.ndarray:
    """bone[t, v] = joint[t, v] - joint[t, parent(v)]; root bone = joint."""
    parents = adj.parent
    bones = frames - frames[:, parents, :]
    root = parents == np.arange(parents.size)
    bones[:, root, :] = frames[:, root, :]
    return bones


def bones_to_joints(bones: np.ndarray, adj: AdjacencyTable) -> np.ndarray:
    """Prefix-sum along the forest; inverse of :func:`joints_to_bones`."""
    joints = np.zeros_like(bones)
    for j in adj.topological_order():
        p = int(adj.parent[j])
        if p == j:
            joints[:, j] = bones[:, j]
        else:
            joints[:, j] = joints[:, p] + bones[:, j]
    return joints


def derive_modality(seq: SkeletonSequence, adj: AdjacencyTable,
                    kind: ModalityKind) -> SkeletonSequence:
    frames = seq.frames
    if kind in (ModalityKind.BONE, ModalityKind.BONE_MOTION):
        frames = joints_to_bones(frames, adj)
    if kind in (ModalityKind.JOINT_MOTION, ModalityKind.BONE_MOTION):
        motion = np.zeros_like(frames)
        motion[:-1] = frames[1:] - frames[:-1]
        frames = motion
    return SkeletonSequence(frames, seq.label, seq.persons,
                            seq.dataset_kind, seq.n_classes)


# -- SKEL1 container ----------------------------------------------------------

_MAGIC = b"SKEL"
_HEADER = struct.Struct("<4sBIHBBII")


def save_sequence(seq: SkeletonSequence, path: str) -> None:
    kind_code = _DATASET_KINDS.index(seq.dataset_kind)
    header = _HEADER.pack(_MAGIC, 1, seq.t_total, seq.v_raw, seq.persons,
                          kind_code, seq.label, seq.n_classes)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(seq.frames.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_sequence(path: str) -> SkeletonSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header at byte {len(raw)} in {path}")
    magic, version, t_total, v_raw, persons, kind_code, label, n_classes = \
        _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0 in {path}")
    if version != 1:
        raise FormatError(f"unsupported version {version} at byte 4 in {path}")
    if t_total < 1:
        raise FormatError(f"T_total must be >= 1, found 0 at byte 5 in {path}")
    if kind_code >= len(_DATASET_KINDS):
        raise FormatError(f"bad dataset kind {kind_code} at byte 12 in {path}")
    if n_classes and label >= n_classes:
        raise FormatError(
            f"label {label} >= N_c {n_classes} at byte 13 in {path}")
    need = t_total * v_raw * 3 * 4
    body = raw[_HEADER.size:]
    if len(body) != need:
        raise FormatError(
            f"payload length {len(body)} != expected {need} "
            f"at byte {_HEADER.size} in {path}")
    frames = np.frombuffer(body, dtype="<f4").reshape(t_total, v_raw, 3)
    return SkeletonSequence(frames.copy(), label, persons,
                            _DATASET_KINDS[kind_code], n_classes)


def save_dataset(dataset: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, seq in enumerate(dataset.sequences):
        name = f"seq_{i:05d}.skel"
        save_sequence(seq, os.path.join(out_dir, name))
        names.append(name)
    tmp = os.path.join(out_dir, "manifest.txt.tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(names) + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.txt"))


def load_dataset(data_dir: str) -> Dataset:
    manifest = os.path.join(data_dir, "manifest.txt")
    with open(manifest) as fh:
        names = [line.strip() for line in fh if line.strip()]
    seqs = [load_sequence(os.path.join(data_dir, n)) for n in names]
    n_classes = max((s.n_classes for s in seqs), default=0)
    class_names = [f"class_{i}" for i in range(n_classes)]
    return Dataset(seqs, class_names)


# -- synthetic generator -------------------------------------------------------

CLASS_NAMES = [
    "fine_hand_oscillation",
    "antiphase_hands",
    "slow_limb_trajectory",
    "body_translation_phase",
]

# Canonical standing pose for the 20-joint skeleton (meters).
def _base_pose() -> np.ndarray:
    pose = np.zeros((20, 3), dtype=np.float64)
    pose[0] = (0.0, 0.9, 0.0)    # base of spine
    pose[1] = (0.0, 1.15, 0.0)   # mid spine
    pose[2] = (0.0, 1.45, 0.0)   # neck
    pose[3] = (0.0, 1.65, 0.0)   # head
    for side, sign in ((4, -1.0), (8, 1.0)):       # arms
        pose[side + 0] = (sign * 0.20, 1.42, 0.0)
        pose[side + 1] = (sign * 0.30, 1.15, 0.0)
        pose[side + 2] = (sign * 0.35, 0.90, 0.05)
        pose[side + 3] = (sign * 0.38, 0.80, 0.08)
    for side, sign in ((12, -1.0), (16, 1.0)):     # legs
        pose[side + 0] = (sign * 0.12, 0.85, 0.0)
        pose[side + 1] = (sign * 0.14, 0.45, 0.02)
        pose[side + 2] = (sign * 0.15, 0.08, 0.0)
        pose[side + 3] = (sign * 0.16, 0.02, 0.10)
    return pose


_RIGHT_HAND = [9, 10, 11]
_LEFT_HAND = [5, 6, 7]
_RIGHT_ARM = [8, 9, 10, 11]
_LEFT_ARM = [4, 5, 6, 7]
_RIGHT_LEG = [16, 17, 18, 19]
_LEFT_LEG = [12, 13, 14, 15]


def _unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _make_clip(label: int, t_total: int, rng: np.random.Generator,
               noise_sigma: float) -> np.ndarray:
    pose = _base_pose()
    frames = np.repeat(pose[None], t_total, axis=0)
    t = np.arange(t_total) / max(t_total - 1, 1)
    amp = rng.uniform(0.15, 0.25)
    if label == 0:
        # Fine oscillation of one hand at high frequency: adjacent joints of
        # the hand move with alternating sign, so the motion is relative
        # within the hand rather than a rigid shift.  Which hand oscillates
        # varies per clip so a fixed-joint detector is not enough.
        hand = [_LEFT_HAND, _RIGHT_HAND][rng.integers(2)]
        d = _unit(rng)
        phase = rng.uniform(0, 2 * np.pi)
        cycles = rng.uniform(4.0, 6.0)
        wave = amp * np.sin(2 * np.pi * cycles * t + phase)
        signs = np.array([1.0, -1.0, 1.0])
        frames[:, hand, :] += (wave[:, None] * signs[None, :])[:, :, None] * d
    elif label == 1:
        # Anti-phase motion of both hands in the same frequency band as
        # family 0, so the classes are separated by which joints move and
        # how they correlate, not by frequency alone.
        d = _unit(rng)
        phase = rng.uniform(0, 2 * np.pi)
        cycles = rng.uniform(4.0, 6.0)
        wave = amp * np.sin(2 * np.pi * cycles * t + phase)
        frames[:, _RIGHT_HAND, :] += wave[:, None, None] * d
        frames[:, _LEFT_HAND, :] -= wave[:, None, None] * d
    elif label == 2:
        # Slow whole-limb trajectory across the full clip: the limb centroid
        # displacement is monotone along the trajectory axis.
        d = _unit(rng)
        limb = [_RIGHT_ARM, _LEFT_ARM, _RIGHT_LEG, _LEFT_LEG][rng.integers(4)]
        profile = 3 * t ** 2 - 2 * t ** 3   # smooth, strictly increasing
        reach = rng.uniform(0.2, 0.35)
        frames[:, limb, :] += (reach * profile)[:, None, None] * d
    elif label == 3:
        # Whole-body translation plus left/right limb phase offset.
        d = _unit(rng)
        reach = rng.uniform(0.2, 0.35)
        frames += (reach * t)[:, None, None] * d
        d2 = _unit(rng)
        phase = rng.uniform(0, 2 * np.pi)
        cycles = rng.uniform(1.5, 2.5)
        wave = amp * np.sin(2 * np.pi * cycles * t + phase)
        shift = amp * np.sin(2 * np.pi * cycles * t + phase + np.pi / 2)
        frames[:, _RIGHT_ARM, :] += wave[:, None, None] * d2
        frames[:, _LEFT_ARM, :] += shift[:, None, None] * d2
    else:
        raise ValueError(f"synthetic generator supports 4 families, got {label}")
    # Whole-body sway distractor shared by all families.  Its amplitude is
    # tied to the noise level so noiseless datasets stay distractor-free and
    # keep their clean geometric properties.
    sway_amp = min(0.05, 2.0 * noise_sigma)
    if sway_amp > 0:
        sway = sway_amp * np.sin(2 * np.pi * rng.uniform(0.5, 1.0) * t
                                 + rng.uniform(0, 2 * np.pi))
        frames += sway[:, None, None] * _unit(rng)
    # Center the clip so the time-averaged pose leaks little class signal.
    frames -= frames.mean(axis=(0, 1), keepdims=True) - \
        pose.mean(axis=0)[None, None, :]
    if noise_sigma > 0:
        frames += rng.normal(scale=noise_sigma, size=frames.shape)
    return frames.astype(np.float32)


def generate_synthetic(classes: int, per_class: int,
                       t_range: tuple[int, int] = (48, 96),
                       noise_sigma: float = 0.04,
                       seed: int = 1) -> Dataset:
    """Deterministic desk-scale dataset; labels cycle over 4 archetypes."""
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if classes > len(CLASS_NAMES):
        raise ValueError(f"at most {len(CLASS_NAMES)} synthetic classes")
    rng = np.random.default_rng(seed)
    seqs = []
    for label in range(classes):
        for _ in range(per_class):
            t_total = int(rng.integers(t_range[0], t_range[1] + 1))
            frames = _make_clip(label, t_total, rng, noise_sigma)
            seqs.append(SkeletonSequence(frames, label, persons=1,
                                         dataset_kind="synthetic",
                                         n_classes=classes))
    return Dataset(seqs, CLASS_NAMES[:classes])
