"""Partition-specific multi-head self-attention with Kronecker positional bias.

Each of the four partition types runs its own attention over the flattened
T'*V' token axis of its blocks. The additive bias is a per-head Kronecker
product of a 1D relative temporal table and a skeletal factor: an all-ones
factor for neighboring-joint types (1, 3) and a learnable absolute V'xV'
table for distant-joint types (2, 4).

Also houses the naive masked-attention oracle used by equivalence tests and
the exact multiply-accumulate accounting for the partitioned layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as tn
from .partition import (ALL_TYPES, PartitionLayout, SkateType, block_coords,
                        block_members, partition, partition_shape, reverse)
from .tensor import Tensor


class ConfigError(ValueError):
    """Attention configuration is internally inconsistent."""


@dataclass
class AttentionParams:
    """Per-type projection weights and positional-bias tables."""

    wq: Tensor  # (c, c)
    wk: Tensor  # (c, c)
    wv: Tensor  # (c, c)
    rel_bias: Tensor        # (H', 2T'-1) relative temporal table
    abs_bias: Tensor | None  # (H', V', V') for djp types, None otherwise
    heads: int

    @property
    def c(self) -> int:
        return self.wq.shape[0]


def build_bias(skate_type: SkateType, params: AttentionParams,
               t_prime: int, v_prime: int) -> Tensor:
    """Assemble the (H', T'V', T'V') additive bias for one type."""
    hp = params.heads
    # B^t[t1, t2] reads the relative table at offset t1 - t2 + T' - 1.
    t1 = np.arange(t_prime)
    offsets = (t1[:, None] - t1[None, :] + t_prime - 1).reshape(-1)
    bt = tn.take(params.rel_bias, offsets, axis=1)          # (H', T'*T')
    bt = tn.reshape(bt, (hp, t_prime, t_prime))
    if params.abs_bias is None:
        bv_data = np.ones((hp, v_prime, v_prime),
                          dtype=params.rel_bias.dtype)
        bv = Tensor(bv_data)
    else:
        if params.abs_bias.shape[1:] != (v_prime, v_prime):
            raise ConfigError(
                f"absolute bias {params.abs_bias.shape} does not match "
                f"V'={v_prime}")
        bv = params.abs_bias
    # Kronecker product per head: B[(t1 V' + v1), (t2 V' + v2)] = Bt * Bv.
    bt5 = tn.reshape(bt, (hp, t_prime, 1, t_prime, 1))
    bv5 = tn.reshape(bv, (hp, 1, v_prime, 1, v_prime))
    full = tn.mul(bt5, bv5)
    return tn.reshape(full, (hp, t_prime * v_prime, t_prime * v_prime))


def msa(xp: Tensor, params: AttentionParams, bias: Tensor,
        attn_dropout: float = 0.0,
        rng: np.random.Generator | None = None,
        training: bool = False) -> Tensor:
    """Multi-head attention over flattened tokens of (B', T', V', c)."""
    bp, tp, vp, c = xp.shape
    hp = params.heads
    if c % hp != 0:
        raise ConfigError(f"channels {c} not divisible by heads {hp}")
    ch = c // hp
    s = tp * vp
    tokens = tn.reshape(xp, (bp, s, c))
    q = tn.matmul(tokens, params.wq)
    k = tn.matmul(tokens, params.wk)
    v = tn.matmul(tokens, params.wv)

    def heads(t):
        t = tn.reshape(t, (bp, s, hp, ch))
        return tn.permute(t, (0, 2, 1, 3))  # (B', H', S, ch)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scale = 1.0 / math.sqrt(ch)
    logits = tn.matmul(qh, tn.permute(kh, (0, 1, 3, 2))) * scale
    logits = tn.add(logits, tn.reshape(bias, (1,) + bias.shape))
    attn = tn.softmax_lastdim(logits)
    if training and attn_dropout > 0.0:
        attn = tn.dropout(attn, attn_dropout, rng, training)
    out = tn.matmul(attn, vh)                      # (B', H', S, ch)
    out = tn.permute(out, (0, 2, 1, 3))
    return tn.reshape(out, (bp, tp, vp, c))


def skate_msa(x_msa: Tensor, params: dict[SkateType, AttentionParams],
              layout: PartitionLayout, attn_dropout: float = 0.0,
              rng: np.random.Generator | None = None,
              training: bool = False) -> Tensor:
    """Four-branch partition -> attention -> reverse -> channel concat."""
    squeeze = x_msa.ndim == 3
    if squeeze:
        x_msa = tn.reshape(x_msa, (1,) + x_msa.shape)
    b, t, v, ctot = x_msa.shape
    if ctot % 4 != 0:
        raise ConfigError(f"channel count {ctot} not divisible by 4")
    c = ctot // 4
    groups = tn.split(x_msa, [c] * 4, axis=3)
    outs = []
    for skate_type, xg in zip(ALL_TYPES, groups):
        p = params[skate_type]
        xp = partition(xg, skate_type, layout)
        _, tp, vp = partition_shape(skate_type, layout)
        bias = build_bias(skate_type, p, tp, vp)
        y = msa(xp, p, bias, attn_dropout, rng, training)
        outs.append(reverse(y, skate_type, layout, batch=b))
    out = tn.concat(outs, axis=3)
    if squeeze:
        out = tn.reshape(out, (t, v, ctot))
    return out


def importance_scores(x_msa: Tensor, params: dict[SkateType, AttentionParams],
                      layout: PartitionLayout) -> np.ndarray:
    """Mean pre-softmax attention logit per type, additive bias excluded.

    Scaled query-key products are averaged over blocks, heads and token
    pairs; returns 4 scalars ordered type1..type4.
    """
    if x_msa.ndim == 3:
        x_msa = tn.reshape(x_msa, (1,) + x_msa.shape)
    c = x_msa.shape[3] // 4
    groups = tn.split(x_msa, [c] * 4, axis=3)
    scores = []
    for skate_type, xg in zip(ALL_TYPES, groups):
        p = params[skate_type]
        xp = partition(xg, skate_type, layout)
        bp, tp, vp, _ = xp.shape
        tokens = xp.data.reshape(bp, tp * vp, c)
        q = tokens @ p.wq.data
        k = tokens @ p.wk.data
        ch = c // p.heads
        qh = q.reshape(bp, -1, p.heads, ch).transpose(0, 2, 1, 3)
        kh = k.reshape(bp, -1, p.heads, ch).transpose(0, 2, 1, 3)
        logits = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(ch)
        scores.append(float(logits.mean()))
    return np.array(scores)


# -- naive oracle ----------------------------------------------------------

def naive_attention_oracle(x: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                           wv: np.ndarray, mask: np.ndarray,
                           bias: np.ndarray | None = None,
                           heads: int = 1,
                           counter: dict | None = None) -> np.ndarray:
    """Full-grid masked attention in float64; test/bench reference only.

    ``x`` is (T, V, c); ``mask`` is (TV, TV) with entries in {0, -inf};
    ``bias`` is (H', TV, TV) added to the scaled logits. When ``counter``
    is given, multiply-accumulate counts of the two attention matmuls are
    accumulated into ``counter['macs']``.
    """
    t, v, c = x.shape
    s = t * v
    ch = c // heads
    tokens = x.reshape(s, c).astype(np.float64)
    q = tokens @ wq
    k = tokens @ wk
    val = tokens @ wv
    out = np.zeros((s, c))
    for h in range(heads):
        qh = q[:, h * ch:(h + 1) * ch]
        kh = k[:, h * ch:(h + 1) * ch]
        vh = val[:, h * ch:(h + 1) * ch]
        logits = qh @ kh.T / math.sqrt(ch)
        if counter is not None:
            counter["macs"] = counter.get("macs", 0) + s * s * ch
        if bias is not None:
            logits = logits + bias[h]
        logits = logits + mask
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        attn = e / e.sum(axis=-1, keepdims=True)
        out[:, h * ch:(h + 1) * ch] = attn @ vh
        if counter is not None:
            counter["macs"] += s * s * ch
    return out.reshape(t, v, c)


def type_mask(skate_type: SkateType, layout: PartitionLayout) -> np.ndarray:
    """(TV, TV) additive mask: 0 within a partition block, -inf across."""
    ids = block_members(skate_type, layout).reshape(-1)
    allowed = ids[:, None] == ids[None, :]
    mask = np.where(allowed, 0.0, -np.inf)
    return mask


def expand_bias_to_grid(skate_type: SkateType, layout: PartitionLayout,
                        bias: np.ndarray) -> np.ndarray:
    """Scatter a per-block (H', T'V', V'T'...) bias onto the full token grid.

    Entries for token pairs in different blocks are zero; they sit under the
    -inf mask and never influence the oracle.
    """
    ids = block_members(skate_type, layout).reshape(-1)
    tp, vp = block_coords(skate_type, layout)
    tp, vp = tp.reshape(-1), vp.reshape(-1)
    _, tpn, vpn = partition_shape(skate_type, layout)
    flat = tp * vpn + vp
    hp = bias.shape[0]
    s = ids.size
    full = np.zeros((hp, s, s))
    same = ids[:, None] == ids[None, :]
    i1, i2 = np.nonzero(same)
    full[:, i1, i2] = bias[:, flat[i1], flat[i2]]
    _ = tpn
    return full


# -- complexity accounting ---------------------------------------------------

@dataclass
class FlopsReport:
    naive_macs: Fraction
    per_type_macs: tuple[Fraction, Fraction, Fraction, Fraction]
    skate_macs: Fraction
    ratio: Fraction

    def as_record(self) -> str:
        per = ",".join(str(int(p)) for p in self.per_type_macs)
        return (f'{{"naive_macs": {int(self.naive_macs)}, '
                f'"skate_macs": {int(self.skate_macs)}, '
                f'"per_type_macs": [{per}], '
                f'"ratio": {float(self.ratio):.3f}}}')


def count_flops(V: int, T: int, C: int, K: int, L: int,
                M: int, N: int) -> FlopsReport:
    """Exact MAC counts for naive vs partitioned attention.

    naive = 2 (VT)^2 (C/2); each type contributes
    (blocks) * 2 (T'V')^2 (C/8); the ratio is kept as an exact rational.
    """
    if V != K * L:
        raise ConfigError(f"V={V} must equal K*L={K * L}")
    if T != M * N:
        raise ConfigError(f"T={T} must equal M*N={M * N}")
    naive = 2 * Fraction(V * T) ** 2 * Fraction(C, 2)
    c8 = Fraction(C, 8)
    per = (
        Fraction(M * K) * 2 * Fraction(L * N) ** 2 * c8,
        Fraction(M * L) * 2 * Fraction(K * N) ** 2 * c8,
        Fraction(N * K) * 2 * Fraction(L * M) ** 2 * c8,
        Fraction(N * L) * 2 * Fraction(K * M) ** 2 * c8,
    )
    total = sum(per)
    return FlopsReport(naive_macs=naive, per_type_macs=per,
                       skate_macs=total, ratio=naive / total)
