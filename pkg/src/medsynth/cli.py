"""Command-line entry point.

Subcommands: dataset build | train msdm | train lora | sweep ranks |
sweep augment | generate | evaluate | report | correlate |
annotation build | serve-annotation.

Exit codes: 0 success, 2 configuration error, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError, NumericError, ToolkitError


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _add_cfg_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="medsynth")
    sub = p.add_subparsers(dest="cmd", required=True)

    ds = sub.add_parser("dataset", help="dataset operations")
    ds_sub = ds.add_subparsers(dest="sub", required=True)
    ds_build = ds_sub.add_parser("build", help="build and save a synthetic dataset")
    _add_cfg_args(ds_build)
    ds_build.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="training")
    tr_sub = tr.add_subparsers(dest="sub", required=True)
    tr_msdm = tr_sub.add_parser("msdm", help="train the scratch model")
    _add_cfg_args(tr_msdm)
    tr_lora = tr_sub.add_parser("lora", help="pretrain a backbone and LoRA fine-tune")
    _add_cfg_args(tr_lora)

    sw = sub.add_parser("sweep", help="sweeps")
    sw_sub = sw.add_subparsers(dest="sub", required=True)
    sw_ranks = sw_sub.add_parser("ranks", help="LoRA rank sweep")
    _add_cfg_args(sw_ranks)
    sw_ranks.add_argument("--ranks", default="4,8,16,32,64,128,256")
    sw_ranks.add_argument("--out", required=True)
    sw_aug = sw_sub.add_parser("augment", help="compare the three paraphrase strategies")
    _add_cfg_args(sw_aug)
    sw_aug.add_argument("--out", required=True)

    gen = sub.add_parser("generate", help="sample images from a checkpoint")
    _add_cfg_args(gen)
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--dataset", required=True, help="dataset directory (for prompts)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-per-prompt", type=int)
    gen.add_argument("--n-total", type=int,
                     help="total image budget split over prompts (e.g. 5000)")
    gen.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("evaluate", help="metric report for a generated set")
    _add_cfg_args(ev)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--generated", required=True)
    ev.add_argument("--out", required=True)

    rp = sub.add_parser("report", help="combine model reports into a comparison table")
    rp.add_argument("--out", required=True)
    rp.add_argument("reports", nargs="+", metavar="NAME=REPORT_JSON")

    co = sub.add_parser("correlate", help="expert-rank vs metric correlation")
    co.add_argument("--export", required=True, help="annotation export CSV")
    co.add_argument("--metrics", required=True,
                    help="JSON file: model id -> {metric: value}")
    co.add_argument("--out", required=True)

    ab = sub.add_parser("annotation", help="annotation data operations")
    ab_sub = ab.add_subparsers(dest="sub", required=True)
    ab_build = ab_sub.add_parser("build", help="build blinded rating tasks")
    _add_cfg_args(ab_build)
    ab_build.add_argument("--dataset", required=True)
    ab_build.add_argument("--models", nargs=3, metavar="NAME=GEN_DIR", required=True)
    ab_build.add_argument("--data-dir", required=True)
    ab_build.add_argument("--n-tasks", type=int, default=40)
    ab_build.add_argument("--images-per-set", type=int, default=10)

    sv = sub.add_parser("serve-annotation", help="serve the rating API and UI")
    sv.add_argument("--addr", default="127.0.0.1:8800")
    sv.add_argument("--data-dir", required=True)
    sv.add_argument("--ui-dir", default=None)
    return p


def _cmd_dataset_build(args) -> int:
    from .harness import prepare_dataset
    from .synthdata import save_manifest

    cfg = _load_cfg(args)
    manifest = prepare_dataset(cfg)
    save_manifest(manifest, args.out)
    print(f"dataset: {len(manifest.images)} images, {len(manifest.prompts)} prompts, "
          f"{len(manifest.validation_ids)} held out -> {args.out}")
    return 0


def _cmd_train_msdm(args) -> int:
    from .harness import train_msdm

    cfg = _load_cfg(args)
    model, result = train_msdm(cfg)
    result.to_json(Path(cfg.out_dir) / "run_result.json")
    print(f"trained msdm -> {result.checkpoints[0]} "
          f"(final loss {result.extra['final_loss']:.4f}, {result.wall_clock:.1f}s)")
    return 0


def _cmd_train_lora(args) -> int:
    from .harness import pretrain_then_lora

    cfg = _load_cfg(args)
    result = pretrain_then_lora(cfg)
    print(f"lora rank {cfg.lora_rank}: zero-shot FID {result.extra['zero_shot_fid']:.2f}, "
          f"fine-tuned {result.extra['fid_mean']:.2f} ± {result.extra['fid_std']:.2f} "
          f"({result.extra['improved_runs']}/{cfg.run_count} runs improved)")
    return 0


def _cmd_sweep_ranks(args) -> int:
    from .harness import rank_sweep

    cfg = _load_cfg(args)
    ranks = [int(r) for r in args.ranks.split(",") if r.strip()]
    rows = rank_sweep(cfg, ranks=ranks, out_path=args.out)
    print(f"rank sweep over {ranks} -> {args.out} ({len(rows)} rows)")
    return 0


def _cmd_sweep_augment(args) -> int:
    from .harness import augmentation_experiment

    cfg = _load_cfg(args)
    rows = augmentation_experiment(cfg, args.out)
    best = min(rows, key=lambda r: r["fid"])
    print(f"augmentation comparison -> {args.out}; default strategy: add; "
          f"best here: {best['strategy']}")
    return 0


def _cmd_generate(args) -> int:
    from .harness import generate_set, load_model
    from .synthdata import load_manifest

    cfg = _load_cfg(args)
    model = load_model(args.checkpoint)
    manifest = load_manifest(args.dataset)
    from .harness import eval_prompt_records

    prompts = eval_prompt_records(manifest, cfg, include_rephrased=True)
    results = generate_set(model, prompts, args.n_per_prompt or cfg.sample_images_per_prompt,
                           seed=args.seed, out_dir=args.out, n_total=args.n_total)
    print(f"generated {len(results)} images -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .harness import evaluate, load_generated
    from .synthdata import load_manifest

    cfg = _load_cfg(args)
    manifest = load_manifest(args.dataset)
    generated = load_generated(args.generated)
    report = evaluate(manifest, generated, cfg, out_dir=args.out)
    print(report.to_json())
    return 0


def _cmd_report(args) -> int:
    from .harness import comparison_table
    from .metrics import MetricReport

    reports = {}
    for spec_arg in args.reports:
        if "=" not in spec_arg:
            raise ConfigError(f"expected NAME=REPORT_JSON, got {spec_arg!r}")
        name, path = spec_arg.split("=", 1)
        reports[name] = MetricReport.from_json(path)
    comparison_table(reports, args.out)
    print(f"comparison table -> {args.out}")
    return 0


def _cmd_correlate(args) -> int:
    import csv

    from .harness import correlate_ranks

    with open(args.export) as f:
        rows = list(csv.DictReader(f))
    metrics = json.loads(Path(args.metrics).read_text())
    result = correlate_ranks(rows, metrics, out_path=args.out)
    print(f"correlation table -> {args.out}")
    for metric, d in result.items():
        print(f"  {metric}: spearman {d['spearman']:+.3f}")
    return 0


def _cmd_annotation_build(args) -> int:
    from .annotation import AnnotationStore
    from .harness import load_generated
    from .synthdata import load_manifest

    cfg = _load_cfg(args)
    manifest = load_manifest(args.dataset)
    byid = manifest.prompt_by_id()
    model_sets = {}
    for spec_arg in args.models:
        if "=" not in spec_arg:
            raise ConfigError(f"expected NAME=GEN_DIR, got {spec_arg!r}")
        name, path = spec_arg.split("=", 1)
        by_pid: dict[str, list] = {}
        for im, pid in load_generated(path):
            by_pid.setdefault(pid, []).append(im)
        model_sets[name] = by_pid
    covered = set.intersection(*(set(s) for s in model_sets.values()))
    originals = sorted((byid[pid] for pid in covered if pid in byid
                        and byid[pid].origin == "original"), key=lambda p: p.id)
    refs = {}
    for im in manifest.validation_images():
        for pid in im.prompt_ids:
            refs.setdefault(pid, []).append(im)
    # match the rephrased texts the generation run used
    from .harness import eval_prompt_records
    reph = {r.parent_id: r
            for r in eval_prompt_records(manifest, cfg, include_rephrased=True)
            if r.origin == "paraphrase"}
    store = AnnotationStore(args.data_dir)
    tasks = store.build_tasks(originals, model_sets, refs, seed=cfg.seed,
                              n_tasks=args.n_tasks, images_per_set=args.images_per_set,
                              rephrasings=reph)
    print(f"built {len(tasks)} tasks -> {args.data_dir}")
    return 0


def _cmd_serve(args) -> int:
    from .annotation import AnnotationStore
    from .server import serve

    store = AnnotationStore(args.data_dir)
    serve(store, addr=args.addr, ui_dir=args.ui_dir)
    return 0


_HANDLERS = {
    ("dataset", "build"): _cmd_dataset_build,
    ("train", "msdm"): _cmd_train_msdm,
    ("train", "lora"): _cmd_train_lora,
    ("sweep", "ranks"): _cmd_sweep_ranks,
    ("sweep", "augment"): _cmd_sweep_augment,
    ("generate", None): _cmd_generate,
    ("evaluate", None): _cmd_evaluate,
    ("report", None): _cmd_report,
    ("correlate", None): _cmd_correlate,
    ("annotation", "build"): _cmd_annotation_build,
    ("serve-annotation", None): _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = _HANDLERS[(args.cmd, getattr(args, "sub", None))]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"runtime divergence: {e}", file=sys.stderr)
        return 3
    except ToolkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
