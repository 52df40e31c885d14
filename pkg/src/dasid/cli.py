"""``dasid`` command line: data generation, training, SID inference, featurization, evaluation, ablations.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.  Every
failure prints one line ``dasid: <kind>: <reason>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import tempfile
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import evalsuite as ev
from . import experiments as ex
from . import features as ft
from . import numerics as nx
from .alignment import NegativeTruncationWarning
from .dataset import load_dataset
from .quantizer import SIDES, infer_sid, read_embeddings, write_sid_tsv
from .synthdata import SynthConfig, generate, write_dataset
from .trainer import CheckpointError, TrainConfig, TrainingDivergedError, fit, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("dasid")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so ``run`` owns the exit code."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_manifest(path: str | Path, stage: str, config: dict, seed: int, outputs: dict,
                   metrics: dict | None = None) -> None:
    manifest = {
        "stage": stage,
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "outputs": {k: str(v) for k, v in outputs.items()},
        "metrics": ev._plain(metrics or {}),
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None


def _train_config(path: str, seed: int | None) -> TrainConfig:
    cfg = TrainConfig.from_dict(_load_json(path))
    return replace(cfg, seed=seed) if seed is not None else cfg


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    cfg = SynthConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    world = generate(cfg)
    out = write_dataset(world, args.out)
    write_manifest(out / "manifest.json", "gen-data", asdict(cfg), cfg.seed,
                   {"data": out}, {"click_rate": float(world.click.mean()), "ctr_bias": world.ctr_bias})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args.config, args.seed)
    data = load_dataset(args.data)
    result = fit(data, cfg, progress=args.verbose)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, ckpt)
    trace = Path(f"{ckpt}.trace.jsonl")
    atomic_write_text(trace, "".join(json.dumps(t, sort_keys=True) + "\n" for t in result.trace))
    write_manifest(f"{ckpt}.manifest.json", "train", cfg.to_dict(), cfg.seed,
                   {"checkpoint": ckpt, "trace": trace, "data": args.data},
                   {"epochs": result.epochs})
    return EXIT_OK


def cmd_infer_sid(args) -> int:
    model = load_checkpoint(args.ckpt)
    ids, vectors = read_embeddings(getattr(args, "in"))
    rq = model.rq(args.side)
    if vectors.shape[1] != rq.d_sem:
        raise ValueError(f"{args.side} embeddings have dim {vectors.shape[1]}, checkpoint expects {rq.d_sem}")
    with nx.precision(model.config.precision):
        codes, _ = infer_sid(rq, vectors)
    write_sid_tsv(args.out, ids, np.atleast_2d(codes))
    return EXIT_OK


def _check_entities(model, data) -> None:
    if model.user_ids != data.user_ids or model.ad_ids != data.ad_ids:
        raise ValueError("checkpoint entity ids do not match the dataset")


def cmd_featurize(args) -> int:
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    _check_entities(model, data)
    toggles = ft.FeatureToggles.parse(args.features)
    reps = ev.entity_representations(model, data)
    rows = {"train": data.train_rows, "test": data.test_rows, "all": np.arange(len(data))}[args.split]
    examples = ft.featurize(data, rows, toggles, reps.user_codes, reps.ad_codes, reps.z_u, reps.z_i)
    ft.write_examples(args.out, examples)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    _check_entities(model, data)
    seed = model.config.seed if args.seed is None else args.seed
    cfg = ex.EvalConfig(k=args.k, full_pool=args.full_pool, probe=ft.ProbeConfig(seed=seed),
                        probe_features=args.features)
    report = ex.evaluate(model, data, cfg, seed=seed, probe=not args.no_probe)
    if not args.no_probe:
        report["probe_auc_id_only"] = ex.baseline_probe_auc(data, cfg)
    ev.write_json_report(report, args.report)
    write_manifest(f"{args.report}.manifest.json", "eval", {"k": args.k, "full_pool": args.full_pool,
                   "features": args.features, "probe": not args.no_probe}, seed,
                   {"report": args.report, "checkpoint": args.ckpt, "data": args.data}, report)
    print(ev.format_table([ex.summary_row(Path(args.ckpt).name, report)],
                          [c for c in ex.summary_row("", report)]), end="")
    return EXIT_OK


def load_grid(path: str) -> dict:
    """Grid file: {"synth": {...}, "train": {...}, "variants": [...], "seeds": [...], "probe": {...}}."""
    grid = _load_json(path)
    unknown = set(grid) - {"synth", "train", "variants", "seeds", "probe", "eval"}
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    grid.setdefault("variants", list(ex.VARIANTS))
    grid.setdefault("seeds", [0])
    bad = [v for v in grid["variants"] if v not in ex.VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; choose from {list(ex.VARIANTS)}")
    return grid


def run_grid(grid: dict, progress: bool = False) -> dict:
    """Train and evaluate every (seed, variant); returns per-run rows and per-variant medians."""
    synth = SynthConfig.from_dict(grid.get("synth", {}))
    base = TrainConfig.from_dict(grid.get("train", {}))
    eval_extra = dict(grid.get("eval", {}))
    rows, baselines = [], {}
    for seed in grid["seeds"]:
        data = generate(replace(synth, seed=seed)).to_dataset()
        eval_cfg = ex.EvalConfig(**eval_extra, probe=ft.ProbeConfig(**{**grid.get("probe", {}), "seed": seed}))
        baselines[seed] = ex.baseline_probe_auc(data, eval_cfg)
        for name in grid["variants"]:
            out = ex.run_variant(data, replace(base, seed=seed), name, eval_cfg)
            row = {"seed": seed, **out["row"]}
            row.pop("seconds", None)
            rows.append(row)
            if progress:
                log.info("seed %d %s: %s", seed, name, {k: round(v, 4) for k, v in row.items()
                                                        if isinstance(v, float)})
    metric_cols = [c for c in rows[0] if c not in ("seed", "variant")]
    medians = []
    for name in grid["variants"]:
        sel = [r for r in rows if r["variant"] == name]
        medians.append({"variant": name, **{c: float(np.median([r[c] for r in sel])) for c in metric_cols}})
    return {"rows": rows, "medians": medians, "baseline_probe_auc": baselines,
            "baseline_probe_auc_median": float(np.median(list(baselines.values())))}


def cmd_ablate(args) -> int:
    grid = load_grid(args.grid)
    if args.seed is not None:
        grid["seeds"] = [args.seed]
    results = run_grid(grid, progress=args.verbose)
    cols = ["variant", *[c for c in results["medians"][0] if c != "variant"]]
    table = ev.format_table(results["medians"], cols)
    table += f"id-only probe AUC (median over seeds): {results['baseline_probe_auc_median']:.4f}\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ev.write_json_report(results, out / "ablation.json")
        atomic_write_text(out / "ablation.txt", table)
        write_manifest(out / "manifest.json", "ablate", grid, grid["seeds"][0],
                       {"results": out / "ablation.json", "table": out / "ablation.txt"},
                       {"medians": results["medians"]})
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="dasid", description="Semantic IDs co-trained with debiased CF representations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=ArgumentParser, required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic interaction world")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="co-train quantizers, towers and alignment")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer-sid", help="assign semantic IDs to an embedding file")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--side", required=True, choices=SIDES)
    i.add_argument("--in", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer_sid)

    f = sub.add_parser("featurize", help="write CTR examples with SID features as JSONL")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--features", default="all", help="'all' or families joined by '+', e.g. id+prefix")
    f.add_argument("--split", default="all", choices=("train", "test", "all"))
    f.set_defaults(func=cmd_featurize)

    e = sub.add_parser("eval", help="retrieval, codebook statistics and the CTR probe")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--k", type=int, default=100)
    e.add_argument("--full-pool", action="store_true", help="score every non-positive instead of 99 samples")
    e.add_argument("--features", default="all")
    e.add_argument("--no-probe", action="store_true")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the variant grid and print a comparison table")
    a.add_argument("--grid", required=True)
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def _fail(kind: str, code: int, reason: str) -> int:
    reason = " ".join(str(reason).split())
    print(f"dasid: {kind}: {reason}", file=sys.stderr)
    return code


def _unknown_flags(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    known = set(parser._option_string_actions)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                known |= set(sub._option_string_actions)
    return [a for a in argv if a.startswith("-") and a.split("=", 1)[0] not in known]


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        unknown = _unknown_flags(parser, argv)
        reason = str(e)
        if unknown and "unrecognized" not in reason:
            reason += f" (unrecognized arguments: {' '.join(unknown)})"
        return _fail("usage", EXIT_USAGE, reason)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", NegativeTruncationWarning)
            return args.func(args)
    except (TrainingDivergedError, nx.NonFiniteError, nx.NondeterminismError) as e:
        return _fail("runtime", EXIT_RUNTIME, e)
    except (CheckpointError, nx.ShapeError, nx.CollapseError, ValueError, KeyError, IndexError,
            FileNotFoundError, IsADirectoryError) as e:
        return _fail("validation", EXIT_VALIDATION, e)
    except (OSError, RuntimeError, MemoryError) as e:
        return _fail("runtime", EXIT_RUNTIME, e)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
