"""Command-line front end.

Subcommands: `mix generate`, `mix stats`, `train`, `eval`, `experiment`,
`check-gradients`, `check-metrics`. Exit codes: 0 success, 2 config error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from .errors import ActiveExtractError, ConfigError, DivergedLoss, NonFiniteGradient
from .mixer import (
    CATEGORY_KEYS,
    CorpusConfig,
    Manifest,
    corpus_stats,
    generate_corpus,
    table_proportions,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _load_yaml(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _corpus_config(d: dict) -> CorpusConfig:
    splits = d.get("splits")
    if not isinstance(splits, dict):
        raise ConfigError("corpus config needs a `splits` mapping")
    resolved: dict[str, dict[str, int]] = {}
    for split, value in splits.items():
        # An integer asks for the published histogram scaled to that total.
        resolved[split] = table_proportions(int(value)) if isinstance(value, int) else dict(value)
    kwargs = {}
    for key in ("seed", "n_speakers", "visual_dim", "visual_cue_snr_db"):
        if key in d:
            kwargs[key] = d[key]
    for key in ("duration_range", "snr_range"):
        if key in d:
            kwargs[key] = tuple(d[key])
    cfg = CorpusConfig(splits=resolved, **kwargs)
    cfg.validate()
    return cfg


def _cmd_mix_generate(args) -> int:
    cfg = _corpus_config(_load_yaml(args.config))
    manifest = generate_corpus(cfg, args.out)
    print(f"wrote {len(manifest)} clips under {args.out}")
    _print_stats(manifest)
    return EXIT_OK


def _print_stats(manifest: Manifest) -> None:
    stats = corpus_stats(manifest)
    header = ["split", "clips", *CATEGORY_KEYS, "QQ h", "SQ h", "QS h", "SS h"]
    print("\t".join(header))
    for split, s in stats.items():
        row = [split, str(s["total"])]
        row += [str(s["categories"][k]) for k in CATEGORY_KEYS]
        row += [f"{s['hours'][lab]:.3f}" for lab in ("QQ", "SQ", "QS", "SS")]
        print("\t".join(row))


def _cmd_mix_stats(args) -> int:
    manifest = Manifest.load(args.manifest)
    _print_stats(manifest)
    return EXIT_OK


def _cmd_train(args) -> int:
    from .pipeline import train, train_config_from_dict

    config = train_config_from_dict(_load_yaml(args.config))
    result = train(config, init_checkpoint=args.init)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"best validation loss: {result.best_val:.6f} after {result.stopped_epoch} epochs")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluation import evaluate, report_render, system_from_model
    from .separator import load_checkpoint

    model, meta = load_checkpoint(args.ckpt)
    manifest = Manifest.load(args.manifest)
    report = evaluate(
        system_from_model(model),
        manifest,
        Path(args.manifest).parent,
        model_tag=args.tag or meta.get("stage_tag", "system"),
        dataset_tag=str(args.manifest),
        split=args.split,
    )
    text = report_render(report, args.format)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    from .pipeline import run_experiment

    recipe = _load_yaml(args.recipe)
    out_dir = args.out or recipe.get("out_dir", "runs/experiment")
    provenance = run_experiment(recipe, out_dir)
    print(provenance["report"], end="")
    print(f"provenance: {Path(out_dir) / 'provenance.json'}")
    return EXIT_OK


def _cmd_check_gradients(args) -> int:
    from .pipeline import check_gradients

    ok, lines = check_gradients(seed=args.seed)
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_DIVERGED


def _cmd_check_metrics(args) -> int:
    from .pipeline import check_metrics

    ok, lines = check_metrics(seed=args.seed)
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="activeextract")
    sub = p.add_subparsers(dest="command", required=True)

    mix = sub.add_parser("mix", help="corpus synthesis")
    mix_sub = mix.add_subparsers(dest="mix_command", required=True)
    g = mix_sub.add_parser("generate", help="generate a corpus from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_mix_generate)
    st = mix_sub.add_parser("stats", help="summarize a manifest")
    st.add_argument("--manifest", required=True)
    st.set_defaults(func=_cmd_mix_stats)

    tr = sub.add_parser("train", help="run one training stage")
    tr.add_argument("--config", required=True)
    tr.add_argument("--init", default=None, help="prerequisite checkpoint")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint over a manifest")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", default=None)
    ev.add_argument("--format", choices=("markdown", "tsv"), default="markdown")
    ev.add_argument("--split", default="test")
    ev.add_argument("--tag", default=None)
    ev.set_defaults(func=_cmd_eval)

    ex = sub.add_parser("experiment", help="three stages plus evaluation")
    ex.add_argument("--recipe", required=True)
    ex.add_argument("--out", default=None)
    ex.set_defaults(func=_cmd_experiment)

    cg = sub.add_parser("check-gradients", help="finite-difference gradient suite")
    cg.add_argument("--seed", type=int, default=0)
    cg.set_defaults(func=_cmd_check_gradients)

    cm = sub.add_parser("check-metrics", help="metric property suite")
    cm.add_argument("--seed", type=int, default=0)
    cm.set_defaults(func=_cmd_check_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DivergedLoss, NonFiniteGradient) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ActiveExtractError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
