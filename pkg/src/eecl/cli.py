"""Command line: ``eecl run|sweep|export|validate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, DataError, EeclError, SchemaVersionError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from exc
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("--seeds needs at least one seed and no repeats")
    return seeds


def _summary(result) -> str:
    m = result.manifest["metrics"]
    parts = [f"method={result.manifest['config']['method']}", f"seed={result.manifest['config']['seed']}"]
    parts.append(f"final_acc={m['overthinking']['final_acc']:.4f}")
    parts.append(f"auc={m['auc']:.4f}")
    if "auc_tlc" in m:
        parts.append(f"auc_tlc={m['auc_tlc']:.4f}")
    return " ".join(parts)


def cmd_run(args) -> int:
    from .pipeline import run_experiment

    cfg = load_config(args.config)
    out = Path(args.output) if args.output else Path(cfg.output_dir)
    result = run_experiment(cfg, out, figures=not args.no_figures)
    print(_summary(result))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .pipeline import export_plot_data, run_experiment

    cfg = load_config(args.config)
    seeds = _seeds(args.seeds)
    root = Path(args.output) if args.output else Path(cfg.output_dir)
    manifests = []
    for seed in seeds:
        result = run_experiment(cfg.replace(seed=seed), root / f"seed-{seed}", figures=not args.no_figures)
        manifests.append(result.manifest)
        print(_summary(result))
    (root / "sweep.csv").write_text(export_plot_data(manifests), encoding="utf-8")
    if not args.no_figures:
        from .plots import render_sweep_figure

        render_sweep_figure(manifests, root / "sweep_budget_curves.png")
    print(f"wrote {root}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .pipeline import export_plot_data, load_manifest

    text = export_plot_data([load_manifest(p) for p in args.manifests])
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    from .pipeline import load_scenario

    cfg = load_config(args.config)
    scenario = load_scenario(cfg)
    sizes = [len(t.class_range) for t in scenario.tasks]
    print(f"config ok: dataset={cfg.dataset} method={cfg.method} tasks={len(sizes)} classes per task={sizes}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eecl", description="Continual early-exit training, TLC and budgeted inference.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration and write its manifest")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (default: output_dir from the config)")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one configuration over several seeds")
    s.add_argument("config")
    s.add_argument("--seeds", required=True, help="comma-separated seeds, e.g. 0,1,2")
    s.add_argument("-o", "--output")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("export", help="merge manifests into one long-format CSV")
    e.add_argument("manifests", nargs="+", help="manifest.json files or run directories")
    e.add_argument("-o", "--output", help="CSV path (default: stdout)")
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("validate", help="check a config and its data without training")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaVersionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EeclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
