"""Joint-order tables and the four partition/reverse index transforms.

A layout arranges the V joints as K concatenated neighboring-joint blocks of
L elements and splits the T frames into M windows of N consecutive frames.
The four transform types regroup a (T, V, c) feature map so that each
attention block sees exactly one (joint group x frame group) combination:

  type1 -> (M*K, N, L, c)   neighboring joints, local window
  type2 -> (M*L, N, K, c)   distant joints,     local window
  type3 -> (N*K, M, L, c)   neighboring joints, strided global frames
  type4 -> (N*L, M, K, c)   distant joints,     strided global frames
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .tensor import DimensionError, Tensor, permute, reshape


class LayoutError(ValueError):
    """Joint table is not a valid partition layout."""


class SkateType(enum.Enum):
    TYPE1 = 1
    TYPE2 = 2
    TYPE3 = 3
    TYPE4 = 4


ALL_TYPES = (SkateType.TYPE1, SkateType.TYPE2, SkateType.TYPE3, SkateType.TYPE4)

# Neighboring-joint blocks in 0-based tracking indices, ordered outward from
# the body center: right arm, left arm, right leg, left leg, vertical torso
# (and horizontal torso for the 25-joint skeleton, which drops joint 21 and
# adds hand tips/thumbs).
NWUCLA_BLOCKS = [
    [8, 9, 10, 11],
    [4, 5, 6, 7],
    [16, 17, 18, 19],
    [12, 13, 14, 15],
    [1, 2, 0, 3],
]

NTU_PERSON_BLOCKS = [
    [10, 11, 23, 24],
    [6, 7, 21, 22],
    [16, 17, 18, 19],
    [12, 13, 14, 15],
    [1, 2, 0, 3],
    [4, 8, 5, 9],
]


@dataclass(frozen=True)
class PartitionLayout:
    """Joint permutation plus the (K, L, M, N) factorization."""

    joint_order: np.ndarray  # length V, raw joint index per layout position
    K: int
    L: int
    M: int
    N: int

    @property
    def V(self) -> int:
        return self.K * self.L

    @property
    def T(self) -> int:
        return self.M * self.N

    def with_time(self, M: int, N: int) -> "PartitionLayout":
        return replace(self, M=M, N=N)


def _factor_time(T: int, N: int = 8) -> tuple[int, int]:
    # Window length N stays fixed across downsampling until T < N.
    if T % N != 0:
        N = T if T < N else N
        while T % N != 0:
            N -= 1
    return T // N, N


def build_layout(kind: str, T: int, table: list[list[int]] | None = None,
                 M: int | None = None, N: int | None = None) -> PartitionLayout:
    """Build a layout for ``kind`` in {ntu_like, nwucla_like, custom}."""
    if kind == "nwucla_like":
        blocks = [list(b) for b in NWUCLA_BLOCKS]
        universe = 20
    elif kind == "ntu_like":
        blocks = [list(b) for b in NTU_PERSON_BLOCKS]
        blocks += [[j + 25 for j in b] for b in NTU_PERSON_BLOCKS]
        universe = 50
    elif kind == "custom":
        if table is None:
            raise LayoutError("custom layout requires a joint table")
        blocks = [list(b) for b in table]
        universe = None
    else:
        raise LayoutError(f"unknown layout kind {kind!r}")

    sizes = {len(b) for b in blocks}
    if len(sizes) != 1:
        raise LayoutError(f"njp blocks must share one size, got {sorted(sizes)}")
    L = sizes.pop()
    K = len(blocks)
    order = np.array([j for b in blocks for j in b], dtype=np.int64)
    if len(set(order.tolist())) != order.size:
        raise LayoutError("joint table is not a bijection: duplicate joint index")
    if (order < 0).any():
        raise LayoutError("joint table contains a negative index")
    if universe is not None and order.max() >= universe:
        raise LayoutError("joint table index out of range")

    if M is None or N is None:
        M, N = _factor_time(T)
    if M * N != T:
        raise LayoutError(f"M*N = {M}*{N} does not equal T = {T}")
    return PartitionLayout(order, K=K, L=L, M=M, N=N)


def load_custom_table(path: str) -> list[list[int]]:
    """Read K lines of L 1-based tracking indices."""
    table = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            table.append([int(tok) - 1 for tok in line.split()])
    if not table:
        raise LayoutError(f"empty layout table in {path}")
    return table


def njp_view(layout: PartitionLayout) -> list[np.ndarray]:
    """The K neighboring-joint blocks as positions 0..V-1 of the layout axis."""
    pos = np.arange(layout.V)
    return [pos[k * layout.L:(k + 1) * layout.L] for k in range(layout.K)]


def djp_view(layout: PartitionLayout) -> list[np.ndarray]:
    """The L distant-joint groups: same ordinal position of every njp block."""
    pos = np.arange(layout.V).reshape(layout.K, layout.L)
    return [np.ascontiguousarray(pos[:, l]) for l in range(layout.L)]


# Axis gymnastics shared by partition and reverse. After reshaping the
# (B, T, V, c) map to (B, M, N, K, L, c), each type moves its block axes
# next to the batch axis and flattens them into it.
_PERMS = {
    SkateType.TYPE1: (0, 1, 3, 2, 4, 5),  # (B, M, K, N, L, c)
    SkateType.TYPE2: (0, 1, 4, 2, 3, 5),  # (B, M, L, N, K, c)
    SkateType.TYPE3: (0, 2, 3, 1, 4, 5),  # (B, N, K, M, L, c)
    SkateType.TYPE4: (0, 2, 4, 1, 3, 5),  # (B, N, L, M, K, c)
}


def partition_shape(skate_type: SkateType, layout: PartitionLayout) -> tuple[int, int, int]:
    K, L, M, N = layout.K, layout.L, layout.M, layout.N
    return {
        SkateType.TYPE1: (M * K, N, L),
        SkateType.TYPE2: (M * L, N, K),
        SkateType.TYPE3: (N * K, M, L),
        SkateType.TYPE4: (N * L, M, K),
    }[skate_type]


def partition(x: Tensor, skate_type: SkateType,
              layout: PartitionLayout) -> Tensor:
    """Regroup (..., T, V, c) into (B*blocks, T', V', c) for one type."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, t, v, c = x.shape
    if t != layout.T or v != layout.V:
        raise DimensionError(
            f"input (T={t}, V={v}) does not match layout "
            f"(T={layout.T}, V={layout.V})")
    K, L, M, N = layout.K, layout.L, layout.M, layout.N
    x6 = reshape(x, (b, M, N, K, L, c))
    x6 = permute(x6, _PERMS[skate_type])
    blocks, tp, vp = partition_shape(skate_type, layout)
    return reshape(x6, (b * blocks, tp, vp, c))


def reverse(xp: Tensor, skate_type: SkateType, layout: PartitionLayout,
            batch: int = 1) -> Tensor:
    """Exact inverse of :func:`partition` back to (B, T, V, c)."""
    blocks, tp, vp = partition_shape(skate_type, layout)
    btot, t_in, v_in, c = xp.shape
    if (t_in, v_in) != (tp, vp) or btot != batch * blocks:
        raise DimensionError(
            f"partitioned shape {xp.shape} does not match type "
            f"{skate_type.name} blocks={blocks}, T'={tp}, V'={vp}")
    K, L, M, N = layout.K, layout.L, layout.M, layout.N
    mid = {
        SkateType.TYPE1: (batch, M, K, N, L, c),
        SkateType.TYPE2: (batch, M, L, N, K, c),
        SkateType.TYPE3: (batch, N, K, M, L, c),
        SkateType.TYPE4: (batch, N, L, M, K, c),
    }[skate_type]
    x6 = reshape(xp, mid)
    inv = np.argsort(_PERMS[skate_type])
    x6 = permute(x6, tuple(int(i) for i in inv))
    out = reshape(x6, (batch, layout.T, layout.V, c))
    if batch == 1:
        return out
    return out


def block_members(skate_type: SkateType, layout: PartitionLayout) -> np.ndarray:
    """Block id of every (t, v) grid point, shape (T, V).

    Tokens attend to each other iff they share a block id; this is the mask
    generator for the naive-attention equivalence oracle.
    """
    K, L, M, N = layout.K, layout.L, layout.M, layout.N
    t = np.arange(layout.T)
    v = np.arange(layout.V)
    m, n = t // N, t % N
    k, l = v // L, v % L
    if skate_type == SkateType.TYPE1:
        tb, vb, nb = m, k, K
    elif skate_type == SkateType.TYPE2:
        tb, vb, nb = m, l, L
    elif skate_type == SkateType.TYPE3:
        tb, vb, nb = n, k, K
    else:
        tb, vb, nb = n, l, L
    return tb[:, None] * nb + vb[None, :]


def block_coords(skate_type: SkateType,
                 layout: PartitionLayout) -> tuple[np.ndarray, np.ndarray]:
    """Within-block (t', v') coordinates of every (t, v) grid point."""
    K, L, M, N = layout.K, layout.L, layout.M, layout.N
    _ = (K, M)
    t = np.arange(layout.T)
    v = np.arange(layout.V)
    m, n = t // N, t % N
    k, l = v // L, v % L
    tp = n if skate_type in (SkateType.TYPE1, SkateType.TYPE2) else m
    vp = l if skate_type in (SkateType.TYPE1, SkateType.TYPE3) else k
    return (np.broadcast_to(tp[:, None], (layout.T, layout.V)).copy(),
            np.broadcast_to(vp[None, :], (layout.T, layout.V)).copy())
