"""Command-line entry point: ``avit <command> [flags]``.

Commands: gen-data, pretrain, finetune, eval, protocol, gradcheck, ablate,
params. Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 failed check. Every command that writes files also writes
``manifest.json`` (argv, resolved config, seed, precision, version) next to
its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path


from . import __version__
from . import tensor as T
from .config import load_domain_specs, load_run_config
from .data import DomainDataset, default_domains, few_shot_split, generate_domain, load_dataset, save_dataset
from .errors import AvitError, ConfigError, FormatError, UsageError
from .metrics import evaluate, read_scores_csv, write_scores_csv
from .model import PARAM_GROUPS, AdaptiveViT, ModelConfig, ablate_adapters, count_params, params_report_csv
from .pipeline import (VARIANTS, StageConfig, finetune, leave_one_out, load_checkpoint, pretrain, report_csv,
                       save_checkpoint, test, variant_config)

log = logging.getLogger("avit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
DATA_SUFFIX = ".avitdata"
MANIFEST = "manifest.json"


class CheckFailed(AvitError):
    """A verification command found a violation (exit code 3)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers ------------------------------------------------------------------

def _resolve_precision(args) -> str:
    name = args.precision or os.environ.get("AVIT_PRECISION") or "f32"
    T.set_precision(name)
    return name


def write_manifest(out_dir, command: str, argv: list[str], **resolved) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"tool": "avit", "version": __version__, "command": command, "argv": list(argv),
           "precision": T.precision_name(), **resolved}
    path = out_dir / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_data_dir(path) -> list[DomainDataset]:
    """Load every dataset in ``path``, in manifest order when a manifest lists them."""
    path = Path(path)
    if not path.is_dir():
        raise FormatError(f"data directory {path} does not exist")
    order = None
    manifest = path / MANIFEST
    if manifest.exists():
        try:
            order = json.loads(manifest.read_text()).get("domains")
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest}: {exc}") from exc
    files = [path / f"{d}{DATA_SUFFIX}" for d in order] if order else sorted(path.glob(f"*{DATA_SUFFIX}"))
    if not files:
        raise FormatError(f"no {DATA_SUFFIX} files in {path}")
    return [load_dataset(f) for f in files]


def _target_index(datasets: list[DomainDataset], target: str) -> int:
    ids = [d.domain_id for d in datasets]
    if target not in ids:
        raise UsageError(f"unknown target {target!r}; available: {ids}")
    return ids.index(target)


def _run_configs(args) -> tuple[ModelConfig, StageConfig]:
    if args.config:
        if args.preset:
            raise UsageError("--preset conflicts with --config (set preset under [model] instead)")
        model_cfg, stage_cfg = load_run_config(args.config)
    else:
        model_cfg, stage_cfg = ModelConfig.preset(args.preset or "desk"), StageConfig()
    overrides = {}
    for key in ("pretrain_iters", "finetune_iters", "checkpoint_every", "lr", "weight_decay",
                "batch_per_domain", "cos_weight", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_flip", False):
        overrides["flip"] = False
    if "finetune_iters" in overrides and "checkpoint_every" not in overrides:
        overrides["checkpoint_every"] = 0
    stage_cfg = StageConfig(**{**stage_cfg.to_dict(), **overrides})
    return model_cfg, stage_cfg


def _add_train_flags(p: argparse.ArgumentParser, shots_default: int = 5) -> None:
    p.add_argument("--config", help="INI run config ([model], [train]) used as the base")
    p.add_argument("--preset", choices=("desk", "paper"), help="model preset (default desk)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--shots", type=int, default=shots_default, help="target samples per class (0 = zero-shot)")
    p.add_argument("--variant", default="vit_ensemble_adapter_fwt", choices=sorted(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-iters", type=int)
    p.add_argument("--finetune-iters", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-per-domain", type=int)
    p.add_argument("--cos-weight", type=float)
    p.add_argument("--no-flip", action="store_true", help="disable horizontal-flip augmentation")


def _prepare_run(args):
    model_cfg, stage_cfg = _run_configs(args)
    datasets = load_data_dir(args.data_dir)
    ti = _target_index(datasets, args.target)
    cfg, policy = variant_config(model_cfg, args.variant)
    if not VARIANTS[args.variant]["cos"]:
        stage_cfg = replace(stage_cfg, cos_weight=0.0)
    target = datasets[ti]
    sources = [d for i, d in enumerate(datasets) if i != ti]
    split = few_shot_split(target, args.shots, stage_cfg.seed)
    return cfg, policy, stage_cfg, sources, split


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args, argv) -> int:
    if args.spec:
        specs, gen = load_domain_specs(args.spec)
    else:
        specs, gen = default_domains(), {"image_size": 32, "count_per_class": 200}
    if args.count_per_class is not None:
        gen["count_per_class"] = args.count_per_class
    if args.image_size is not None:
        gen["image_size"] = args.image_size
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate domain ids in {ids}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        ds = generate_domain(spec, gen["count_per_class"], args.seed, image_size=gen["image_size"])
        save_dataset(out / f"{spec.domain_id}{DATA_SUFFIX}", ds)
        print(f"{spec.domain_id}: {len(ds)} images -> {out / (spec.domain_id + DATA_SUFFIX)}")
    write_manifest(out, "gen-data", argv, seed=args.seed, domains=ids, generator=gen,
                   specs=[s.to_dict() for s in specs])
    return EXIT_OK


def cmd_pretrain(args, argv) -> int:
    cfg, _, stage_cfg, sources, split = _prepare_run(args)
    model = AdaptiveViT(cfg, seed=stage_cfg.seed)
    record = pretrain(model, sources, split, stage_cfg, rng_tag=args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "pretrained.avit")
    (out / "train_log.csv").write_text(record.log_csv())
    print(f"pretrain: {stage_cfg.pretrain_iters} iters, final CE {record.log[-1][2].ce:.4f}")
    write_manifest(out, "pretrain", argv, seed=stage_cfg.seed, target=args.target, shots=args.shots,
                   variant=args.variant, model=cfg.to_dict(), train=stage_cfg.to_dict())
    return EXIT_OK


def cmd_finetune(args, argv) -> int:
    cfg, policy, stage_cfg, sources, split = _prepare_run(args)
    if args.init:
        model, _ = load_checkpoint(args.init)
        if model.cfg != cfg:
            raise ConfigError(f"{args.init}: checkpoint config does not match variant {args.variant}")
    else:
        model = AdaptiveViT(cfg, seed=stage_cfg.seed)
    out = Path(args.out)
    record = finetune(model, sources, split, stage_cfg, eval_set=split.remainder, out_dir=out,
                      policy=policy, rng_tag=args.target)
    (out / "train_log.csv").write_text(record.log_csv())
    final = record.checkpoints[-1].report
    (out / "report.csv").write_text(final.to_csv())
    mean, std = record.stability()
    print(f"finetune: {final.summary()}")
    print(f"stability (last 8 checkpoints AUC): mean {mean:.4f} std {std:.4f}")
    write_manifest(out, "finetune", argv, seed=stage_cfg.seed, target=args.target, shots=args.shots,
                   variant=args.variant, init=args.init, model=cfg.to_dict(), train=stage_cfg.to_dict())
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    if args.scores:
        if args.checkpoint:
            raise UsageError("give either --scores or --checkpoint, not both")
        ids, scores, labels = read_scores_csv(args.scores)
    else:
        if not (args.checkpoint and args.data_dir and args.target):
            raise UsageError("eval needs --scores, or --checkpoint with --data-dir and --target")
        model, _ = load_checkpoint(args.checkpoint)
        datasets = load_data_dir(args.data_dir)
        target = datasets[_target_index(datasets, args.target)]
        eval_set = few_shot_split(target, args.shots, args.seed).remainder if args.shots else target
        report = test(model, eval_set)
        scores, labels = report.scores, report.labels
        ids = [f"{args.target}:{i}" for i in range(len(scores))]
    report = evaluate(scores, labels, tuple(args.fpr), args.hter_threshold)
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv())
        write_scores_csv(out / "scores.csv", report.scores, report.labels, ids)
        write_manifest(out, "eval", argv, seed=args.seed, scores=args.scores, checkpoint=args.checkpoint,
                       target=args.target, shots=args.shots, hter_threshold=args.hter_threshold, fpr=args.fpr)
    return EXIT_OK


def cmd_protocol(args, argv) -> int:
    model_cfg, stage_cfg = _run_configs(args)
    datasets = load_data_dir(args.data_dir)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = leave_one_out(datasets, args.shots, model_cfg, stage_cfg, args.variant,
                            out_dir=None if args.no_checkpoints else out, jobs=args.jobs)
    name = f"report_{args.variant}_k{args.shots}_s{stage_cfg.seed}.csv"
    (out / name).write_text(report_csv(results))
    for r in results:
        print(f"{r.target}: AUC {r.final.auc:.4f} HTER {r.final.hter:.4f} "
              f"stability std {r.stability[1]:.4f}")
    print(f"report -> {out / name}")
    write_manifest(out, "protocol", argv, seed=stage_cfg.seed, shots=args.shots, variant=args.variant,
                   jobs=args.jobs, domains=[d.domain_id for d in datasets], model=model_cfg.to_dict(),
                   train=stage_cfg.to_dict())
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck import run_gradcheck

    cfg = load_run_config(args.config)[0] if args.config else ModelConfig.preset(args.preset)
    if args.ensemble_size is not None:
        cfg = replace(cfg, ensemble_size=args.ensemble_size)
    results = run_gradcheck(cfg, seed=args.seed, tol=args.tol, samples_per_tensor=args.samples)
    failures = []
    lines = ["group,max_rel_err,checked"]
    for group in PARAM_GROUPS:
        r = results[group]
        if r.checked == 0:
            print(f"{group:9s} n/a (no parameters)")
            continue
        status = "ok" if not r.failures else "FAIL"
        print(f"{group:9s} max relative error {r.max_rel_err:.3e} over {r.checked} entries "
              f"(worst {r.worst}) {status}")
        lines.append(f"{group},{r.max_rel_err!r},{r.checked}")
        failures += r.failures
    worst = max(r.max_rel_err for r in results.values())
    print(f"max relative error {worst:.3e} (tol {args.tol:g})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
        write_manifest(out, "gradcheck", argv, seed=args.seed, tol=args.tol, samples=args.samples,
                       model=cfg.to_dict())
    if failures:
        raise CheckFailed("gradient check failed for: " + "; ".join(failures))
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    datasets = load_data_dir(args.data_dir)
    target = datasets[_target_index(datasets, args.target)]
    eval_set = few_shot_split(target, args.shots, args.seed).remainder if args.shots else target
    base = test(model, eval_set)
    ablate_adapters(model, args.first, args.last)
    ablated = test(model, eval_set)
    print(f"intact:          {base.summary()}")
    print(f"ablated {args.first}-{args.last}: {ablated.summary()}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["setting,first,last,AUC,HTER,TPR@FPR1",
            f"intact,,,{base.auc!r},{base.hter!r},{base.tpr_at_fpr[0.01]!r}",
            f"ablated,{args.first},{args.last},{ablated.auc!r},{ablated.hter!r},{ablated.tpr_at_fpr[0.01]!r}"]
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")
    write_manifest(out, "ablate", argv, seed=args.seed, checkpoint=args.checkpoint, target=args.target,
                   shots=args.shots, first=args.first, last=args.last)
    return EXIT_OK


def cmd_params(args, argv) -> int:
    cfg = load_run_config(args.config)[0] if args.config else ModelConfig.preset(args.preset)
    text = params_report_csv(cfg)
    sys.stdout.write(text)
    print(f"# backbone+head {count_params(cfg, ('backbone', 'head'))}, adapters {count_params(cfg, ('adapters',))}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.csv").write_text(text)
        write_manifest(out, "params", argv, model=cfg.to_dict())
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avit", description="Few-shot adaptive ViT toolkit")
    parser.add_argument("--version", action="version", version=f"avit {__version__}")
    parser.add_argument("--precision", choices=("f32", "f64"),
                        help="floating-point precision (default: $AVIT_PRECISION or f32)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic domains")
    p.add_argument("--spec", help="INI generator config; default: four built-in domains")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count-per-class", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage 1: train the head with the backbone frozen")
    _add_train_flags(p)
    p.add_argument("--target", required=True, help="held-out domain id")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: fine-tune adapters/FWT with checkpoints")
    _add_train_flags(p)
    p.add_argument("--target", required=True, help="held-out domain id")
    p.add_argument("--init", help="checkpoint to start from (e.g. pretrain output)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a score CSV")
    p.add_argument("--scores", help="CSV with sample_id,score,label")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--target")
    p.add_argument("--shots", type=int, default=0, help="exclude this few-shot split from evaluation")
    p.add_argument("--seed", type=int, default=0, help="seed of the few-shot split")
    p.add_argument("--fpr", type=float, action="append", default=None)
    p.add_argument("--hter-threshold", type=float, help="fixed HTER threshold (default: EER threshold)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol", help="leave-one-domain-out runs over all targets")
    _add_train_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel target runs")
    p.add_argument("--no-checkpoints", action="store_true", help="do not write per-run checkpoints")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("gradcheck", help="compare backprop with central differences (64-bit)")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--config")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6, help="entries checked per parameter tensor")
    p.add_argument("--ensemble-size", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="bypass adapters in a block range and re-evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--first", type=int, required=True, help="first block (1-based)")
    p.add_argument("--last", type=int, required=True, help="last block (1-based, inclusive)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="parameter counts per group")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)
    return parser


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "fpr", "unset") is None:
            args.fpr = [0.01]
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(message)s", stream=sys.stdout, force=True)
        old = T.precision_name()
        try:
            _resolve_precision(args)
            return args.func(args, argv)
        finally:
            T.set_precision(old)
    except CheckFailed as exc:
        print(f"avit: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (FormatError, OSError) as exc:
        print(f"avit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigError) as exc:
        print(f"avit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
