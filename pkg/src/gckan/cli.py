"""Command-line interface: ``gckan generate | infer | eval | report``.

Exit codes: 0 success, 1 usage / configuration / input error, 2 runtime or
numeric failure.  Matrix files are CSV with row = effect series and
column = cause series.  Every command writes into a staging directory
that replaces the files in ``--out`` only after the whole run succeeded.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .datagen import (
    PanelParseError,
    SimulationError,
    generate_var,
    load_panel,
    load_truth,
    simulate_lorenz96,
    write_matrix,
    write_panel,
    write_truth,
)
from .evalmetrics import EvalSpec, aggregate, gc_auroc
from .fusion import infer_with_fusion
from .granger import ComponentError, fit_gckan, select_penalties
from .runconfig import ConfigError, RunConfig, load_run_config
from .trainer import TrainingError

log = logging.getLogger("gckan")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# artifacts


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def versions() -> dict:
    import numba
    import scipy
    import yaml

    return {
        "gckan": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pyyaml": yaml.__version__,
    }


class Staging:
    """Collects outputs in a temporary sibling of ``out`` and publishes them on success."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def __enter__(self) -> Path:
        parent = self.out.resolve().parent
        try:
            parent.mkdir(parents=True, exist_ok=True)
            if self.out.exists() and not self.out.is_dir():
                raise ConfigError(f"output path {self.out} exists and is not a directory")
            self.dir = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.partial-", dir=parent))
        except OSError as exc:
            raise ConfigError(f"output directory {self.out} is not writable: {exc.strerror}") from None
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.dir, ignore_errors=True)
            return False
        self.out.mkdir(parents=True, exist_ok=True)
        for src in sorted(self.dir.rglob("*")):
            dest = self.out / src.relative_to(self.dir)
            if src.is_dir():
                dest.mkdir(parents=True, exist_ok=True)
            else:
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(src, dest)
        shutil.rmtree(self.dir, ignore_errors=True)
        return False


def digests(root: Path) -> dict:
    return {
        str(p.relative_to(root)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }


def _manifest(kind: str, cfg: RunConfig | None, started: float, body: dict, root: Path) -> dict:
    return {
        "kind": kind,
        "versions": versions(),
        "config": None if cfg is None else {**cfg.raw, "out": str(cfg.out)},
        "started_at": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "elapsed_seconds": round(time.time() - started, 3),
        **body,
        "digests": digests(root),
    }


# ---------------------------------------------------------------------------
# datasets


def _generate(cfg: RunConfig, r: int):
    gen = cfg.generator_for(r)
    if cfg.dataset["kind"] == "lorenz96":
        panel, truth = simulate_lorenz96(gen)
    else:
        panel, truth = generate_var(gen)
    return [panel], truth, {"generator_seed": gen.seed}


def iter_datasets(cfg: RunConfig):
    """Yield ``(index, panels, truth_or_None, source_info)`` for each independent dataset."""
    ds = cfg.dataset
    if ds["kind"] != "files":
        for r in range(ds["replicates"]):
            yield (r, *_generate(cfg, r))
        return
    truths = ds.get("truth")
    for r, path in enumerate(ds["paths"]):
        panels = load_panel(
            path, ds["format"], replicate_length=ds.get("replicate_length"), replicate_column=ds.get("replicate_column")
        )
        truth = None
        if truths:
            truth = load_truth(truths[0] if len(truths) == 1 else truths[r])
            if truth.n_series != panels[0].n_series:
                raise PanelParseError(f"{truths[0]}: truth is {truth.n_series}x{truth.n_series} but {path} has "
                                      f"{panels[0].n_series} series")
        yield r, panels, truth, {"path": str(path), "n_replicates": len(panels)}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> dict:
    if cfg.dataset["kind"] == "files":
        raise ConfigError("dataset.kind: generate needs a generator kind (lorenz96 or var)")
    started = time.time()
    with Staging(cfg.out) as stage:
        items, truths = [], []
        for r, panels, truth, info in iter_datasets(cfg):
            name = f"panel_r{r}.csv"
            write_panel(stage / name, panels[0])
            items.append({"replicate": r, "panel": name, **info})
            truths.append(truth)
        shared = all(t == truths[0] for t in truths)
        if shared:
            write_truth(stage / "truth.csv", truths[0])
        for item, truth in zip(items, truths):
            if shared:
                item["truth"] = "truth.csv"
            else:
                item["truth"] = f"truth_r{item['replicate']}.csv"
                write_truth(stage / item["truth"], truth)
        manifest = _manifest("generate", cfg, started, {"replicates": items}, stage)
        write_json(stage / MANIFEST, manifest)
    return manifest


def _losses_dict(result) -> dict:
    agg = result.aggregate_losses
    return {
        "aggregate": agg.as_dict(),
        "per_component": [loss.as_dict() for loss in result.per_component_losses],
        "seeds": result.seeds,
    }


def _infer_one(cfg: RunConfig, panels, stage: Path, r: int) -> dict:
    run_dir = stage / f"r{r}"
    run_dir.mkdir()
    train = cfg.train
    entry: dict = {"index": r, "directory": f"r{r}"}
    sw = cfg.sweep
    if sw["enabled"]:
        train, scores = select_penalties(
            panels, cfg.lag, train, cfg.model,
            lambdas=sw["lambdas"], gammas=sw["gammas"], holdout=sw["holdout"],
            criterion=sw["criterion"], workers=cfg.workers,
        )
        entry["sweep"] = [{"lam": lam, "gamma": gam, "score": s} for (lam, gam), s in sorted(scores.items())]
    entry["penalties"] = {"lam": train.lam, "gamma": train.gamma}
    files = {}
    if cfg.fusion_enabled:
        out = infer_with_fusion(panels, cfg.lag, train, cfg.fusion, cfg.model, workers=cfg.workers)
        results = {"original": out.original_result, "reversed": out.reversed_result}
        matrices = {"G_original": out.original, "G_reversed": out.reversed_result.gc_matrix, "G_fused": out.fused}
        entry["branch"] = out.branch
        entry["fusion_losses"] = out.losses
    else:
        res = fit_gckan(panels, cfg.lag, train, cfg.model, workers=cfg.workers)
        results = {"original": res}
        matrices = {"G_original": res.gc_matrix}
    for name, mat in matrices.items():
        write_matrix(run_dir / f"{name}.csv", mat)
        files[name] = f"r{r}/{name}.csv"
    write_matrix(run_dir / "selected_lags.csv", results["original"].selected_lags, integer=True)
    files["selected_lags"] = f"r{r}/selected_lags.csv"
    losses = {k: _losses_dict(v) for k, v in results.items()}
    write_json(run_dir / "losses.json", losses)
    files["losses"] = f"r{r}/losses.json"
    entry["losses"] = {k: v["aggregate"] for k, v in losses.items()}
    entry["files"] = files
    return entry


def cmd_infer(cfg: RunConfig) -> dict:
    started = time.time()
    with Staging(cfg.out) as stage:
        runs = []
        for r, panels, truth, info in iter_datasets(cfg):
            log.info("dataset %d: %d replicate(s) of shape %s", r, len(panels), panels[0].values.shape)
            entry = _infer_one(cfg, panels, stage, r)
            entry["source"] = info
            if truth is not None:
                write_truth(stage / f"r{r}" / "truth.csv", truth)
                entry["files"]["truth"] = f"r{r}/truth.csv"
            runs.append(entry)
        body = {"dataset": cfg.dataset_name, "runs": runs}
        manifest = _manifest("infer", cfg, started, body, stage)
        write_json(stage / MANIFEST, manifest)
    return manifest


def _read_matrix(path) -> np.ndarray:
    try:
        mat = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise PanelParseError(f"{path}: cannot read matrix: {exc}") from None
    if mat.shape[0] != mat.shape[1]:
        raise PanelParseError(f"{path}: matrix is {mat.shape[0]}x{mat.shape[1]}, expected square")
    return mat


def _run_pairs(run_dir: Path, which: str):
    manifest = _load_manifest(run_dir)
    pairs = []
    for run in manifest["runs"]:
        files = run["files"]
        if "truth" not in files:
            raise ConfigError(f"{run_dir}: run {run['index']} has no ground truth to evaluate against")
        key = which if which in files else "G_original"
        pairs.append((run_dir / files[key], run_dir / files["truth"]))
    return manifest, pairs


def evaluate_pairs(pairs, spec: EvalSpec) -> dict:
    scores = []
    for g_path, t_path in pairs:
        G = _read_matrix(g_path)
        truth = load_truth(t_path)
        if G.shape != truth.adjacency.shape:
            raise PanelParseError(f"{g_path}: shape {G.shape} does not match truth {truth.adjacency.shape}")
        scores.append(gc_auroc(G, truth, spec))
    summary = aggregate(scores)
    return {
        "auroc": scores,
        "mean": summary.mean,
        "std": summary.std,
        "n": summary.n,
        "summary": summary.format(),
        "include_diagonal": spec.include_diagonal,
    }


def cmd_eval(args) -> dict:
    spec = EvalSpec.gene_network() if args.off_diagonal else EvalSpec()
    if args.run:
        _, pairs = _run_pairs(Path(args.run), args.matrix)
    else:
        if not args.scores or not args.truth:
            raise UsageError("eval: give --run DIR or both --scores and --truth")
        truths = args.truth
        if len(truths) not in (1, len(args.scores)):
            raise UsageError("eval: give one truth file or one per scores file")
        pairs = [(s, truths[0] if len(truths) == 1 else truths[i]) for i, s in enumerate(args.scores)]
    result = evaluate_pairs(pairs, spec)
    for (g, _), auc in zip(pairs, result["auroc"]):
        print(f"{g}\tAUROC {auc:.4f}")
    print(f"mean ± std over {result['n']}: {result['summary']}")
    if args.out:
        out = Path(args.out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            write_json(out, result)
        except OSError as exc:
            raise ConfigError(f"cannot write {out}: {exc.strerror}") from None
    return result


def _load_manifest(run_dir: Path) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.is_file():
        raise ConfigError(f"{run_dir}: no {MANIFEST} found")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}") from None
    if manifest.get("kind") != "infer":
        raise ConfigError(f"{path}: not an infer manifest")
    return manifest


def report_rows(run_dirs: Sequence[Path], include_diagonal: bool | None = None) -> list[dict]:
    rows = []
    for run_dir in run_dirs:
        manifest = _load_manifest(Path(run_dir))
        if include_diagonal is None:
            diag = manifest["config"]["eval"]["include_diagonal"]
        else:
            diag = include_diagonal
        spec = EvalSpec(include_diagonal=diag)
        row = {"dataset": manifest["dataset"], "runs": len(manifest["runs"])}
        for which in ("G_fused", "G_original", "G_reversed"):
            if all(which in run["files"] for run in manifest["runs"]) and all(
                "truth" in run["files"] for run in manifest["runs"]
            ):
                pairs = [(Path(run_dir) / r["files"][which], Path(run_dir) / r["files"]["truth"]) for r in manifest["runs"]]
                row[which] = evaluate_pairs(pairs, spec)["summary"]
            else:
                row[which] = "-"
        branches: dict = {}
        for run in manifest["runs"]:
            b = run.get("branch", "no-fusion")
            branches[b] = branches.get(b, 0) + 1
        row["branches"] = ", ".join(f"{k} {v}" for k, v in sorted(branches.items()))
        rows.append(row)
    return rows


def render_table(rows: list[dict]) -> str:
    header = ["dataset", "runs", "AUROC fused", "AUROC original", "AUROC reversed", "branches"]
    keys = ["dataset", "runs", "G_fused", "G_original", "G_reversed", "branches"]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(row[k]) for k in keys) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> str:
    if not args.runs:
        raise UsageError("report: give at least one run directory")
    for d in args.runs:
        if not Path(d).is_dir():
            raise ConfigError(f"{d}: not a directory")
    table = render_table(report_rows([Path(d) for d in args.runs]))
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w", newline="\n") as fh:
            fh.write(table)
    return table


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gckan", description="KAN-based Granger causality inference.")
    parser.add_argument("--version", action="version", version=f"gckan {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def run_flags(p):
        p.add_argument("--config", required=True, help="YAML run file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="component models trained concurrently")

    g = sub.add_parser("generate", help="simulate benchmark datasets")
    run_flags(g)
    i = sub.add_parser("infer", help="fit GC models and write G, reversed G and fused G")
    run_flags(i)
    i.add_argument("--no-fusion", action="store_true", help="fit the original direction only")
    i.add_argument("--transpose-reversed", action="store_true", help="transpose the reversed-series matrix before fusing")
    i.add_argument("--no-sweep", action="store_true", help="use the configured penalties without a sweep")

    e = sub.add_parser("eval", help="AUROC of score matrices against ground truth")
    e.add_argument("--scores", nargs="+", help="score matrix CSV files")
    e.add_argument("--truth", nargs="+", help="truth CSV (one, or one per scores file)")
    e.add_argument("--run", help="infer output directory (uses its matrices and truth)")
    e.add_argument("--matrix", default="G_fused", choices=["G_fused", "G_original", "G_reversed"])
    e.add_argument("--off-diagonal", action="store_true", help="skip self-loops (gene-network protocol)")
    e.add_argument("--out", help="write the result as JSON")

    r = sub.add_parser("report", help="summary table over infer runs")
    r.add_argument("runs", nargs="*", help="infer output directories, one table row each")
    r.add_argument("--out", help="also write the table to this file")
    return parser


def _cli_overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.workers is not None:
        over["workers"] = args.workers
    if getattr(args, "no_fusion", False):
        over.setdefault("fusion", {})["enabled"] = False
    if getattr(args, "transpose_reversed", False):
        over.setdefault("fusion", {})["transpose_reversed"] = True
    if getattr(args, "no_sweep", False):
        over["sweep"] = {"enabled": False}
    return over


def main(argv: Sequence[str] | None = None, environ=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.command is None:
            raise UsageError("gckan: choose a command: generate, infer, eval or report")
        if args.command in ("generate", "infer"):
            cfg = load_run_config(args.config, environ, _cli_overrides(args))
            manifest = cmd_generate(cfg) if args.command == "generate" else cmd_infer(cfg)
            print(f"wrote {cfg.out} ({len(manifest['digests'])} files)")
        elif args.command == "eval":
            cmd_eval(args)
        else:
            cmd_report(args)
        return EXIT_OK
    except (UsageError, ConfigError, PanelParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ComponentError, SimulationError, FloatingPointError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
