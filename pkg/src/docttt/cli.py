"""Operator surface: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime numerical
failure.  All errors go to standard error with the config path for context.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .docgen import DocDataset, generate_corpus, write_pgm
from .meta import MetaConfig, TrainState, TrainingData, run_phase
from .model import init_params
from .objectives import mask_image
from .tensor import TensorError
from .tokens import Dictionary
from .tta import AdaptConfig, ComparisonReport, EvalReport, evaluate


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docttt",
        description="Meta-auxiliary test-time training for handwritten document recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="run seed")
        p.add_argument("--data-dir", type=str, default=None)
        p.add_argument("--run-dir", type=str, default=None)
        for flag in (
            "no_ttt",
            "no_meta",
            "no_teacher_forcing",
            "no_positional_encoding",
            "no_curriculum_dropout",
        ):
            p.add_argument(f"--{flag}", action="store_true", default=None,
                           help=f"ablation switch: {flag.replace('_', ' ')}")
        return p

    common(sub.add_parser("gen-data", help="generate the synthetic corpus"))

    p = common(sub.add_parser("pretrain", help="phase 1: supervised pre-training"))
    p.add_argument("--steps", type=int, default=None, help="override phase-1 steps")

    p = common(sub.add_parser("train-meta", help="phase 2: meta-training"))
    p.add_argument("--steps", type=int, default=None, help="override phase-2 steps")
    p.add_argument("--init", type=str, default=None, help="initial checkpoint path")

    for name in ("eval", "adapt-eval"):
        p = common(sub.add_parser(name, help=f"{name} on a dataset split"))
        p.add_argument("--split", type=str, default="test")
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument("--steps", type=int, default=None,
                       help="adaptation steps (adapt-eval)")

    p = common(sub.add_parser("reconstruct", help="write qualitative reconstructions"))
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--count", type=int, default=4)

    p = common(sub.add_parser("grad-check", help="run all gradient suites"))
    p.add_argument("--points", type=int, default=100)
    return parser


def merge_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    for key in ("seed", "data_dir", "run_dir"):
        overrides[key] = getattr(args, key, None)
    cfg = apply_overrides(cfg, overrides)
    abl = {}
    for flag in (
        "no_ttt", "no_meta", "no_teacher_forcing",
        "no_positional_encoding", "no_curriculum_dropout",
    ):
        value = getattr(args, flag, None)
        if value:
            abl[f"ablation.{flag}"] = True
    cfg = apply_overrides(cfg, abl)
    return cfg


def _training_data(cfg: RunConfig, need_dataset: bool) -> TrainingData:
    dictionary = Dictionary()
    dataset = None
    if need_dataset:
        dataset = DocDataset(Path(cfg.data_dir), dictionary)
    return TrainingData(dictionary=dictionary, corpus=cfg.corpus, dataset=dataset)


def cmd_gen_data(cfg: RunConfig, args) -> int:
    root = generate_corpus(cfg.corpus, cfg.data_dir, Dictionary())
    counts = cfg.corpus.counts()
    print(f"wrote {sum(counts.values())} documents to {root}")
    for split, n in counts.items():
        print(f"  {split}: {n}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    arch = cfg.effective_arch()
    meta = cfg.effective_meta()
    steps = args.steps if args.steps is not None else cfg.train.phase1_steps
    data = _training_data(cfg, need_dataset=Path(cfg.data_dir, "manifest.tsv").exists())
    state = TrainState.fresh(init_params(arch, cfg.seed), seed=cfg.seed)
    state = run_phase(
        state, 1, data, meta, steps,
        log_path=run_dir / "train.log",
        on_checkpoint=lambda s: save_checkpoint(s, run_dir / "phase1.ckpt"),
        checkpoint_every=cfg.train.checkpoint_every,
        val_every=cfg.train.val_every,
        verbose=True,
    )
    save_checkpoint(state, run_dir / "phase1.ckpt")
    print(f"phase 1 complete at step {state.step}; checkpoint: {run_dir / 'phase1.ckpt'}")
    return 0


def cmd_train_meta(cfg: RunConfig, args) -> int:
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    arch = cfg.effective_arch()
    meta = cfg.effective_meta()
    init_path = Path(args.init) if args.init else run_dir / "phase1.ckpt"
    state = load_checkpoint(init_path, arch)
    state = replace(state, seed=cfg.seed)
    steps = args.steps if args.steps is not None else cfg.train.phase2_steps
    data = _training_data(cfg, need_dataset=True)
    state = run_phase(
        state, 2, data, meta, steps,
        use_meta=cfg.use_meta_training(),
        log_path=run_dir / "train.log",
        on_checkpoint=lambda s: save_checkpoint(s, run_dir / "model.ckpt"),
        checkpoint_every=cfg.train.checkpoint_every,
        val_every=cfg.train.val_every,
        verbose=True,
    )
    save_checkpoint(state, run_dir / "model.ckpt")
    mode = "meta" if cfg.use_meta_training() else "multi-task"
    print(f"phase 2 ({mode}) complete at step {state.step}; checkpoint: {run_dir / 'model.ckpt'}")
    return 0


def _load_model(cfg: RunConfig, args):
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(cfg.run_dir) / "model.ckpt"
    state = load_checkpoint(ckpt, cfg.effective_arch())
    return state.params


def write_report(report: EvalReport, tsv_path: Path, json_path: Path,
                 extra_aggregates: dict | None = None) -> None:
    cols = (
        "id cer wer char_dist char_len word_dist word_len ged gt_graph_size "
        "aux_before aux_after adapt_warning error pred_tokens"
    ).split()
    lines = ["\t".join(cols)]
    for r in report.records:
        lines.append("\t".join(str(getattr(r, c)) for c in cols))
    tsv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    payload = dict(report.aggregates)
    if extra_aggregates:
        payload.update(extra_aggregates)
    payload["split"] = report.split
    payload["adapted"] = report.adapted
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_eval(cfg: RunConfig, args) -> int:
    dataset = DocDataset(Path(cfg.data_dir), Dictionary())
    params = _load_model(cfg, args)
    report = evaluate(dataset, args.split, params, adapt=None)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, run_dir / f"eval_{args.split}.tsv", run_dir / f"eval_{args.split}.json")
    for key in ("cer", "wer", "loer", "map_cer"):
        if key in report.aggregates:
            print(f"{key}: {report.aggregates[key]:.3f}")
    return 0


def cmd_adapt_eval(cfg: RunConfig, args) -> int:
    dataset = DocDataset(Path(cfg.data_dir), Dictionary())
    params = _load_model(cfg, args)
    adapt = cfg.effective_adapt()
    if args.steps is not None:
        adapt = replace(adapt, steps=args.steps)
    adapted = evaluate(dataset, args.split, params, adapt=adapt)
    baseline = evaluate(dataset, args.split, params, adapt=None)
    comparison = ComparisonReport.build(adapted, baseline)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_report(
        comparison.adapted,
        run_dir / f"adapt_eval_{args.split}.tsv",
        run_dir / f"adapt_eval_{args.split}.json",
        extra_aggregates={
            k: v for k, v in comparison.aggregates.items() if k.endswith("_no_ttt")
        },
    )
    for key, value in sorted(comparison.aggregates.items()):
        print(f"{key}: {value:.4f}")
    return 0


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    from .model import reconstruct as reconstruct_fn
    from .meta import prepare_image
    from .tta import instance_rng

    dataset = DocDataset(Path(cfg.data_dir), Dictionary())
    params = _load_model(cfg, args)
    out_dir = Path(cfg.run_dir) / "reconstructions"
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = cfg.effective_meta()
    ids = dataset.split_ids(args.split)[: args.count]
    for doc_id in ids:
        inst = dataset.load(doc_id)
        padded, _ = prepare_image(inst.image, params.arch)
        masked, _ = mask_image(padded, meta.mask, instance_rng(doc_id))
        rec = reconstruct_fn(params.shared, params.auxiliary, masked, params.arch)
        gap = np.ones((padded.shape[0], 4), dtype=np.float32) * 0.5
        strip = np.concatenate([padded, gap, masked.data, gap, rec.data], axis=1)
        name = doc_id.replace("/", "_")
        write_pgm(out_dir / f"{name}_triptych.pgm", strip)
    print(f"wrote {len(ids)} reconstruction triptychs to {out_dir}")
    return 0


def cmd_grad_check(cfg: RunConfig, args) -> int:
    from .gradcheck import run_suites

    rows = run_suites(points=args.points)
    width = max(len(r[0]) for r in rows)
    failures = 0
    for name, err, tol, ok in rows:
        status = "PASS" if ok else "FAIL"
        print(f"{name:<{width}}  max_err={err:10.3e}  tol={tol:g}  {status}")
        failures += 0 if ok else 1
    print(f"{len(rows) - failures}/{len(rows)} suites passed")
    return 0 if failures == 0 else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-meta": cmd_train_meta,
    "eval": cmd_eval,
    "adapt-eval": cmd_adapt_eval,
    "reconstruct": cmd_reconstruct,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config_label = args.config or "<defaults>"
    try:
        cfg = merge_config(args)
    except ConfigError as exc:
        print(f"[config: {config_label}] error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"[config: {config_label}] error: {exc}", file=sys.stderr)
        return 1
    except (TensorError, CheckpointError, ValueError) as exc:
        print(f"[config: {config_label}] runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
