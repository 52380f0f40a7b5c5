"""Command line front end.

Subcommands: ``gen-data`` (synthetic dataset), ``train`` (writes metrics.csv,
a curves figure and the best checkpoint), ``eval`` (single or mean-softmax
ensemble), ``flops`` (exact attention MAC accounting) and ``inspect``
(per-class relation-type importance CSV plus bar chart).

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
``SKATE_THREADS`` caps the BLAS worker pool when set.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as tn
from .attention import ConfigError, count_flops, importance_scores
from .augment import AugmentConfig
from .config import ConfigFileError, RunConfig, parse_file, preset, serialize
from .model import (CheckpointError, ModelConfig, label_smoothed_ce,
                    load_checkpoint, save_checkpoint)
from .partition import LayoutError
from .skeldata import (FormatError, ModalityKind, StructureError,
                       generate_synthetic, load_dataset, save_dataset)
from .tensor import DimensionError, NumericError, Tensor
from .trainer import Pipeline, evaluate, metrics_to_csv, train_model
from .skeldata import adjacency_for


def _apply_thread_cap() -> None:
    cap = os.environ.get("SKATE_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ConfigFileError(f"SKATE_THREADS must be an integer, got {cap!r}")
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_run_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = parse_file(args.config, cfg)
    for item in args.set or []:
        from .config import parse_text
        cfg = parse_text(item, cfg)
    return cfg


# -- subcommands ----------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.classes, args.per_class,
                            t_range=(args.t_min, args.t_max),
                            noise_sigma=args.noise, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.sequences)} sequences "
          f"({args.classes} classes x {args.per_class}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.modality:
        cfg.modality = args.modality
    train_set = load_dataset(args.train_data)
    eval_set = load_dataset(args.eval_data)
    n_c = max(train_set.n_classes, eval_set.n_classes)
    if n_c and cfg.n_classes != n_c:
        cfg.n_classes = n_c
    mcfg = cfg.model_config()
    os.makedirs(args.out, exist_ok=True)

    def progress(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  "
              f"train_acc {rec.train_acc:.3f}  eval_acc {rec.eval_acc:.3f}")

    result = train_model(train_set, eval_set, mcfg, cfg.optim_config(),
                         cfg.augment_config(), seed=cfg.seed,
                         modality=ModalityKind(cfg.modality),
                         progress=progress)
    _atomic_write(os.path.join(args.out, "metrics.csv"),
                  f"# modality = {cfg.modality}\n"
                  + metrics_to_csv(result.metrics))
    _atomic_write(os.path.join(args.out, "config.txt"), serialize(cfg))
    save_checkpoint(os.path.join(args.out, "best.ckpt"),
                    result.best_params, mcfg)
    from .report import render_training_curves
    render_training_curves(result.metrics,
                           os.path.join(args.out, "curves.png"))
    print(f"best_acc={result.best_acc:.6f}")
    return 0


def _eval_pipeline(cfg: ModelConfig, dataset) -> Pipeline:
    seq0 = dataset.sequences[0]
    return Pipeline(cfg, AugmentConfig.disabled(),
                    adjacency_for(seq0.dataset_kind, seq0.persons))


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    labels = np.array([s.label for s in dataset.sequences])
    prob_sum = None
    n_c = None
    for path in args.ckpt:
        params, cfg = load_checkpoint(path)
        if n_c is None:
            n_c = cfg.N_c
        elif cfg.N_c != n_c:
            raise ConfigFileError(
                f"ensemble class-count mismatch: {cfg.N_c} vs {n_c}")
        if dataset.n_classes and cfg.N_c != dataset.n_classes:
            raise ConfigFileError(
                f"checkpoint has {cfg.N_c} classes but dataset "
                f"has {dataset.n_classes}")
        acc, probs = evaluate(params, cfg, dataset,
                              _eval_pipeline(cfg, dataset), args.batch)
        if args.ensemble:
            prob_sum = probs if prob_sum is None else prob_sum + probs
        else:
            print(f"accuracy={acc:.6f} ckpt={path}")
    if args.ensemble:
        acc = float((prob_sum.argmax(axis=1) == labels).mean())
        print(f"accuracy={acc:.6f} over {len(labels)} sequences "
              f"(ensemble of {len(args.ckpt)})")
    return 0


def cmd_flops(args) -> int:
    report = count_flops(args.V, args.T, args.C, args.K, args.L,
                         args.M, args.N)
    print(report.as_record())
    return 0


def cmd_inspect(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    if dataset.n_classes and cfg.N_c != dataset.n_classes:
        raise ConfigFileError(
            f"checkpoint has {cfg.N_c} classes but dataset "
            f"has {dataset.n_classes}")
    pipeline = _eval_pipeline(cfg, dataset)
    _, probs = evaluate(params, cfg, dataset, pipeline, args.batch)
    labels = np.array([s.label for s in dataset.sequences])
    pred = probs.argmax(axis=1)

    layout = cfg.stage_layout(0)
    attn = params.attention_params(0, 0, cfg)
    sums = np.zeros((cfg.N_c, 4))
    counts = np.zeros(cfg.N_c)
    for seq in dataset.sequences:
        frames, t_norm = pipeline.prepare(seq, "eval")
        x = Tensor(frames[None])
        x = tn.take(x, layout.joint_order, axis=2)
        for i in range(3):
            x = tn.matmul(x, params[f"proj.{i}.w"])
        from .model import skate_embedding
        x = tn.add(x, skate_embedding(params["se"], t_norm[None], cfg.C))
        y = tn.layer_norm(x, params["stage0.block0.ln1.gamma"],
                          params["stage0.block0.ln1.beta"])
        y = tn.matmul(y, params["stage0.block0.pre.w"])
        c = y.shape[-1]
        x_msa = tn.split(y, [c // 4, c // 4, c // 2], axis=3)[2]
        sums[seq.label] += importance_scores(x_msa, attn, layout)
        counts[seq.label] += 1

    scores = sums / np.maximum(counts, 1)[:, None]
    names = dataset.class_names or [f"class_{i}" for i in range(cfg.N_c)]
    lines = ["# per-type importance = mean pre-softmax attention logit of the"
             " first block, positional bias excluded",
             "class,name,type1,type2,type3,type4,accuracy"]
    for cls in range(cfg.N_c):
        sel = labels == cls
        acc = float((pred[sel] == cls).mean()) if sel.any() else 0.0
        vals = ",".join(f"{v:.6f}" for v in scores[cls])
        lines.append(f"{cls},{names[cls]},{vals},{acc:.6f}")
    os.makedirs(args.out, exist_ok=True)
    _atomic_write(os.path.join(args.out, "importance.csv"),
                  "\n".join(lines) + "\n")
    from .report import render_importance_chart
    render_importance_chart(names, scores,
                            os.path.join(args.out, "importance.png"))
    print(f"wrote importance.csv and importance.png to {args.out}")
    return 0


# -- argument plumbing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="skelact",
        description="Partition-attention skeletal action recognition")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic SKEL1 dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=32)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--t-min", type=int, default=48)
    g.add_argument("--t-max", type=int, default=96)
    g.add_argument("--noise", type=float, default=0.04)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write metrics + checkpoint")
    t.add_argument("--train-data", required=True)
    t.add_argument("--eval-data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--preset", default="desk", help="desk or ntu")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key")
    t.add_argument("--modality",
                   choices=[m.value for m in ModalityKind],
                   help="input modality (overrides config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoint(s) on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", action="append", required=True,
                   help="repeat for a mean-softmax ensemble")
    e.add_argument("--batch", type=int, default=32)
    e.add_argument("--ensemble", action="store_true",
                   help="mean-softmax average over all checkpoints")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="attention MAC accounting")
    for name in ("V", "T", "C", "K", "L", "M", "N"):
        f.add_argument(name, type=int)
    f.set_defaults(func=cmd_flops)

    i = sub.add_parser("inspect", help="per-class relation-type importance")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--batch", type=int, default=32)
    i.set_defaults(func=cmd_inspect)
    return ap


_USAGE_ERRORS = (ConfigFileError, ConfigError, LayoutError, FormatError,
                 StructureError, CheckpointError, DimensionError,
                 ValueError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
