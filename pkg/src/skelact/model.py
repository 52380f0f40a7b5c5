"""Network assembly: embedding, block, full forward, loss and checkpoints.

Stage widths follow the reference architecture: the first stage runs at C
channels, later stages at 2C, with the jump realized in the first block of
stage 2 (a 1x1 linear on its residual path). Temporal downsampling (stride-2
grouped conv + batch norm) sits between stages. Trunk linears carry no bias
terms; shifts come from the normalization betas. Only the classification
head has a bias.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .attention import AttentionParams, skate_msa
from .partition import (ALL_TYPES, PartitionLayout, SkateType, build_layout,
                        partition_shape)
from .tensor import DimensionError, Tensor


@dataclass
class ModelConfig:
    V: int = 20
    T: int = 16
    C: int = 32
    H: int = 8
    R: int = 4
    blocks_per_stage: int = 2
    k: int = 7
    e: int = 1
    N_c: int = 4
    layout_kind: str = "nwucla_like"
    custom_table: list[list[int]] | None = None
    stage_mn: list[tuple[int, int]] = field(default_factory=list)
    attn_dropout: float = 0.5
    drop_path: float = 0.2
    msa_identity: bool = False   # ablation: attention branches pass through

    def __post_init__(self):
        if self.H % 8 != 0 or self.C % 8 != 0:
            raise ValueError("H and C must be divisible by 8")
        if self.R % self.blocks_per_stage != 0:
            raise ValueError("R must be a multiple of blocks_per_stage")

    @property
    def n_stages(self) -> int:
        return self.R // self.blocks_per_stage

    def stage_t(self, s: int) -> int:
        return self.T // (2 ** s)

    def stage_c(self, s: int) -> int:
        return self.C if s == 0 else 2 * self.C

    def stage_layout(self, s: int) -> PartitionLayout:
        t_s = self.stage_t(s)
        if self.stage_mn and s < len(self.stage_mn):
            m, n = self.stage_mn[s]
            return build_layout(self.layout_kind, t_s, self.custom_table,
                                M=m, N=n)
        return build_layout(self.layout_kind, t_s, self.custom_table)

    @staticmethod
    def ntu_preset(n_classes: int = 60) -> "ModelConfig":
        return ModelConfig(V=48, T=64, C=96, H=32, R=8, blocks_per_stage=2,
                           k=7, e=4, N_c=n_classes, layout_kind="ntu_like")


def _trunc_normal(rng: np.random.Generator, shape, std,
                  dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled, then clipped, to two standard deviations."""
    vals = rng.normal(0.0, std, size=shape)
    for _ in range(4):
        bad = np.abs(vals) > 2 * std
        if not bad.any():
            break
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(vals, -2 * std, 2 * std).astype(dtype)


class ModelParams:
    """Flat name -> Tensor map of every learnable plus batch-norm stats."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}  # batch-norm running stats

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams()
        for name, t in self.tensors.items():
            out.add(name, t.data.astype(dtype))
        out.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return out

    def attention_params(self, stage: int, block: int, cfg: ModelConfig,
                         dtype=None) -> dict[SkateType, AttentionParams]:
        prefix = f"stage{stage}.block{block}.attn"
        out = {}
        for i, skate_type in enumerate(ALL_TYPES, start=1):
            base = f"{prefix}.type{i}"
            abs_b = self.tensors.get(f"{base}.abs")
            out[skate_type] = AttentionParams(
                wq=self[f"{base}.wq"], wk=self[f"{base}.wk"],
                wv=self[f"{base}.wv"], rel_bias=self[f"{base}.rel"],
                abs_bias=abs_b, heads=max(cfg.H // 8, 1))
        return out


def init_params(cfg: ModelConfig, seed: int = 0,
                dtype=np.float32) -> ModelParams:
    """Fan-in scaled truncated-normal weights; bias tables start at zero.

    Scale-preserving init keeps the input signal comparable to the joint
    embedding through the 3->6->9->C projection cascade, which a fixed small
    std does not at these widths.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams()

    def linear(name, cin, cout):
        params.add(name, _trunc_normal(rng, (cin, cout),
                                       std=1.0 / np.sqrt(cin), dtype=dtype))

    dims = [3, 6, 9, cfg.C]
    for i in range(3):
        linear(f"proj.{i}.w", dims[i], dims[i + 1])
    params.add("se", _trunc_normal(rng, (cfg.V, cfg.C),
                                   std=1.0 / np.sqrt(cfg.V), dtype=dtype))

    hq = max(cfg.H // 4, 1)   # G-Conv / T-Conv group count
    hp = max(cfg.H // 8, 1)   # heads per attention type
    for s in range(cfg.n_stages):
        c_in_stage = cfg.stage_c(s)
        layout = cfg.stage_layout(s)
        for b in range(cfg.blocks_per_stage):
            pre = f"stage{s}.block{b}"
            expand = s == 1 and b == 0
            cin = cfg.stage_c(s - 1) if expand else c_in_stage
            cout = c_in_stage
            params.add(f"{pre}.ln1.gamma", np.ones(cin, dtype=dtype))
            params.add(f"{pre}.ln2.gamma", np.ones(cout, dtype=dtype))
            params.add(f"{pre}.ln1.beta", np.zeros(cin, dtype=dtype))
            params.add(f"{pre}.ln2.beta", np.zeros(cout, dtype=dtype))
            linear(f"{pre}.pre.w", cin, cout)
            if expand:
                linear(f"{pre}.res.w", cin, cout)
            params.add(f"{pre}.gconv.g",
                       _trunc_normal(rng, (hq, cfg.V, cfg.V),
                                     std=1.0 / np.sqrt(cfg.V), dtype=dtype))
            ctc = cout // 4
            params.add(f"{pre}.tconv.w",
                       _trunc_normal(rng, (hq, cfg.k, ctc // hq, ctc // hq),
                                     std=1.0 / np.sqrt(cfg.k * (ctc // hq)),
                                     dtype=dtype))
            c_attn = cout // 8
            for i, skate_type in enumerate(ALL_TYPES, start=1):
                base = f"{pre}.attn.type{i}"
                for w in ("wq", "wk", "wv"):
                    linear(f"{base}.{w}", c_attn, c_attn)
                _, tp, vp = partition_shape(skate_type, layout)
                params.add(f"{base}.rel",
                           np.zeros((hp, 2 * tp - 1), dtype=dtype))
                if skate_type in (SkateType.TYPE2, SkateType.TYPE4):
                    params.add(f"{base}.abs",
                               np.zeros((hp, vp, vp), dtype=dtype))
            linear(f"{pre}.post.w", cout, cout)
            linear(f"{pre}.ffn.w1", cout, cfg.e * cout)
            linear(f"{pre}.ffn.w2", cfg.e * cout, cout)
        if s < cfg.n_stages - 1:
            cds = cfg.stage_c(s)
            # depthwise: each channel gets its own 3-tap temporal filter
            params.add(f"ds{s}.w",
                       _trunc_normal(rng, (cds, 3, 1, 1),
                                     std=1.0 / np.sqrt(3.0),
                                     dtype=dtype))
            params.add(f"ds{s}.bn.gamma", np.ones(cds, dtype=dtype))
            params.add(f"ds{s}.bn.beta", np.zeros(cds, dtype=dtype))
            params.buffers[f"ds{s}.bn.mean"] = np.zeros(cds, dtype=dtype)
            params.buffers[f"ds{s}.bn.var"] = np.ones(cds, dtype=dtype)

    c_last = cfg.stage_c(cfg.n_stages - 1)
    linear("head.w", c_last, cfg.N_c)
    params.add("head.b", np.zeros(cfg.N_c, dtype=dtype))
    return params


# -- building blocks ------------------------------------------------------------

def skate_embedding(se: Tensor, t_idx_norm: np.ndarray, C: int) -> Tensor:
    """Outer product of learnable joint features with fixed sinusoidal
    temporal features of the normalized sampled indices."""
    if C % 2 != 0:
        raise DimensionError("channel count must be even")
    t_idx_norm = np.atleast_2d(np.asarray(t_idx_norm, dtype=np.float64))
    b, t = t_idx_norm.shape
    te = np.empty((b, t, C))
    kk = np.arange(C // 2)
    freq = 1.0 / np.power(10000.0, 2.0 * kk / C)
    arg = t_idx_norm[:, :, None] * freq[None, None, :]
    te[:, :, 0::2] = np.sin(arg)
    te[:, :, 1::2] = np.cos(arg)
    te_t = Tensor(te.astype(se.dtype))
    se4 = tn.reshape(se, (1, 1) + se.shape)
    te4 = tn.reshape(te_t, (b, t, 1, C))
    return tn.mul(se4, te4)   # (B, T, V, C)


def g_conv(x: Tensor, g: Tensor) -> Tensor:
    """Group-wise joint mixing: group h is left-multiplied by G_h over V."""
    b, t, v, c = x.shape
    groups = g.shape[0]
    if c % groups != 0:
        raise DimensionError(f"channels {c} not divisible by {groups} groups")
    cg = c // groups
    xg = tn.reshape(x, (b, t, v, groups, cg))
    xg = tn.permute(xg, (0, 1, 3, 2, 4))          # (B, T, G, V, cg)
    g5 = tn.reshape(g, (1, 1) + g.shape)
    out = tn.matmul(g5, xg)                       # (B, T, G, V, cg)
    out = tn.permute(out, (0, 1, 3, 2, 4))
    return tn.reshape(out, (b, t, v, c))


def _drop_path(x: Tensor, rate: float, rng: np.random.Generator | None,
               training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    b = x.shape[0]
    keep = (rng.random((b, 1, 1, 1)) >= rate).astype(x.dtype) / (1.0 - rate)
    return tn.mul(x, Tensor(keep))


def block_forward(x: Tensor, params: ModelParams, stage: int, block: int,
                  cfg: ModelConfig, layout: PartitionLayout,
                  mode: str = "eval",
                  rng: np.random.Generator | None = None,
                  drop_path_rate: float = 0.0) -> Tensor:
    """One transformer block: grouped-conv/attention sub-layer plus FFN."""
    training = mode == "train"
    pre = f"stage{stage}.block{block}"
    y = tn.layer_norm(x, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
    y = tn.matmul(y, params[f"{pre}.pre.w"])
    c = y.shape[-1]
    x_gc, x_tc, x_msa = tn.split(y, [c // 4, c // 4, c // 2], axis=3)
    x_gc = g_conv(x_gc, params[f"{pre}.gconv.g"])
    x_tc = tn.conv1d_grouped(x_tc, params[f"{pre}.tconv.w"],
                             stride=1, pad=cfg.k // 2)
    if not cfg.msa_identity:
        attn_params = params.attention_params(stage, block, cfg)
        x_msa = skate_msa(x_msa, attn_params, layout,
                          attn_dropout=cfg.attn_dropout, rng=rng,
                          training=training)
    branch = tn.concat([x_gc, x_tc, x_msa], axis=3)
    branch = tn.matmul(branch, params[f"{pre}.post.w"])
    res_name = f"{pre}.res.w"
    residual = tn.matmul(x, params[res_name]) \
        if res_name in params.tensors else x
    x = tn.add(residual, _drop_path(branch, drop_path_rate, rng, training))

    y = tn.layer_norm(x, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
    y = tn.matmul(y, params[f"{pre}.ffn.w1"])
    y = tn.gelu(y)
    y = tn.matmul(y, params[f"{pre}.ffn.w2"])
    return tn.add(x, _drop_path(y, drop_path_rate, rng, training))


def model_forward(clip, t_idx_norm, params: ModelParams, cfg: ModelConfig,
                  mode: str = "eval",
                  rng: np.random.Generator | None = None,
                  shape_log: list | None = None) -> Tensor:
    """Forward pass to logits. ``clip`` is (B, T, V_raw, 3) in raw joint
    order; joints are gathered into layout order here, once."""
    training = mode == "train"
    x = clip if isinstance(clip, Tensor) else Tensor(np.asarray(clip))
    if x.ndim == 3:
        x = tn.reshape(x, (1,) + x.shape)
    if x.shape[1] != cfg.T:
        raise DimensionError(f"clip has T={x.shape[1]}, config expects {cfg.T}")

    def log(label, t):
        if shape_log is not None:
            shape_log.append((label, tuple(t.shape[1:])))

    layout0 = cfg.stage_layout(0)
    x = tn.take(x, layout0.joint_order, axis=2)
    log("input", x)
    for i in range(3):
        x = tn.matmul(x, params[f"proj.{i}.w"])
        log(f"linear{i + 1}", x)
    ste = skate_embedding(params["se"], t_idx_norm, cfg.C)
    x = tn.add(x, ste)

    n_blocks = cfg.R
    bi = 0
    for s in range(cfg.n_stages):
        layout = cfg.stage_layout(s)
        for b in range(cfg.blocks_per_stage):
            rate = cfg.drop_path * bi / max(n_blocks - 1, 1)
            x = block_forward(x, params, s, b, cfg, layout, mode, rng, rate)
            log(f"block{bi + 1}", x)
            bi += 1
        if s < cfg.n_stages - 1:
            x = tn.conv1d_grouped(x, params[f"ds{s}.w"], stride=2, pad=1)
            x = tn.batch_norm(x, params[f"ds{s}.bn.gamma"],
                              params[f"ds{s}.bn.beta"],
                              params.buffers[f"ds{s}.bn.mean"],
                              params.buffers[f"ds{s}.bn.var"],
                              training=training)
            log(f"downsample{s + 1}", x)

    x = tn.mean(x, axis=(1, 2))            # (B, C_last)
    if shape_log is not None:
        shape_log.append(("pool", (1, 1, x.shape[-1])))
    logits = tn.add(tn.matmul(x, params["head.w"]), params["head.b"])
    if shape_log is not None:
        shape_log.append(("classify", (1, 1, logits.shape[-1])))
    return logits


def label_smoothed_ce(logits: Tensor, labels, alpha: float = 0.1) -> Tensor:
    """Cross entropy against (1-a) one-hot + a/N_c uniform targets."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = tn.reshape(logits, (1,) + logits.shape)
    b, n_c = logits.shape
    if (labels >= n_c).any() or (labels < 0).any():
        raise IndexError(f"label out of range for N_c={n_c}")
    target = np.full((b, n_c), alpha / n_c, dtype=np.float64)
    target[np.arange(b), labels] += 1.0 - alpha
    logp = tn.log_softmax_lastdim(logits)
    nll = tn.mul(logp, Tensor(target.astype(logits.dtype)))
    return tn.neg(tn.mean(tn.sum_(nll, axis=1)))


# -- checkpoint container ---------------------------------------------------------

_CKPT_MAGIC = b"SKCK"
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class CheckpointError(ValueError):
    pass


def _meta_tensors(cfg: ModelConfig) -> dict[str, np.ndarray]:
    layout = cfg.stage_layout(0)
    kinds = {"ntu_like": 0, "nwucla_like": 1, "custom": 2}
    scalars = [cfg.V, cfg.T, cfg.C, cfg.H, cfg.R, cfg.blocks_per_stage,
               cfg.k, cfg.e, cfg.N_c, kinds[cfg.layout_kind],
               int(cfg.msa_identity), layout.K, layout.L]
    mn = [v for pair in (cfg.stage_mn or []) for v in pair]
    return {
        "meta.config": np.array(scalars, dtype=np.float64),
        "meta.stage_mn": np.array(mn, dtype=np.float64),
        "meta.joint_order": layout.joint_order.astype(np.float64),
    }


def config_from_meta(meta: dict[str, np.ndarray]) -> ModelConfig:
    s = [int(v) for v in meta["meta.config"]]
    kinds = {0: "ntu_like", 1: "nwucla_like", 2: "custom"}
    mn_flat = [int(v) for v in meta["meta.stage_mn"]]
    stage_mn = [(mn_flat[i], mn_flat[i + 1]) for i in range(0, len(mn_flat), 2)]
    table = None
    if kinds[s[9]] == "custom":
        order = [int(v) for v in meta["meta.joint_order"]]
        k_, l_ = s[11], s[12]
        table = [order[i * l_:(i + 1) * l_] for i in range(k_)]
    cfg = ModelConfig(V=s[0], T=s[1], C=s[2], H=s[3], R=s[4],
                      blocks_per_stage=s[5], k=s[6], e=s[7], N_c=s[8],
                      layout_kind=kinds[s[9]], msa_identity=bool(s[10]),
                      stage_mn=stage_mn)
    if table is not None:
        cfg.custom_table = table
    return cfg


def save_checkpoint(path: str, params: ModelParams, cfg: ModelConfig) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    entries.extend(sorted(_meta_tensors(cfg).items()))
    entries.extend(sorted((n, t.data) for n, t in params.tensors.items()))
    entries.extend(sorted((f"buffer.{n}", b) for n, b in params.buffers.items()))
    chunks = [_CKPT_MAGIC, struct.pack("<B", 1),
              struct.pack("<I", len(entries))]
    for name, arr in entries:
        nb = name.encode()
        dtype_code = 0 if arr.dtype == np.float32 else 1
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", dtype_code, arr.ndim))
        for d in arr.shape:
            chunks.append(struct.pack("<I", d))
        chunks.append(arr.astype("<f4" if dtype_code == 0 else "<f8").tobytes())
    body = b"".join(chunks)
    with open(path + ".tmp", "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", _fnv1a(body)))
    import os
    os.replace(path + ".tmp", path)


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 17 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    body, (check,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if _fnv1a(body) != check:
        raise CheckpointError(f"checksum mismatch in {path}")
    version, count = raw[4], struct.unpack_from("<I", raw, 5)[0]
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 9
    meta: dict[str, np.ndarray] = {}
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        dtype_code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        dt = "<f4" if dtype_code == 0 else "<f8"
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype=dt, count=size, offset=off)
        arr = arr.reshape(dims).copy()
        off += size * (4 if dtype_code == 0 else 8)
        (meta if name.startswith("meta.") else tensors)[name] = arr
    cfg = config_from_meta(meta)
    params = ModelParams()
    for name, arr in tensors.items():
        if name.startswith("buffer."):
            params.buffers[name[len("buffer."):]] = arr
        else:
            params.add(name, arr)
    return params, cfg
