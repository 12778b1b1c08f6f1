"""Command line entry point and the epsilon-sweep pipeline.

Exit codes: 0 success, 1 configuration or input error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import __version__
from .aim import SynthConfig, synthesize
from .attacks import LinkageConfig, LinkageConfigError, MiaConfig, linkage_attack, run_mia
from .data import (DiscreteTable, EncodingError, SchemaError, StructuralError, decode, encode,
                   load_csv, load_schema, write_csv)
from .forest import RfConfig
from .lmm import RegressionSpec
from .marginals import load_workload
from .utility import EvalProtocol, utility_report

logger = logging.getLogger("dpsynth")

ENV_OUTPUT_DIR = "DPSYNTH_OUTPUT_DIR"
FALLBACK_OUTPUT_DIR = "dpsynth_runs"
DEFAULT_EPSILONS = [1, 2, 5, 10, 20, 50, 100]
STAGES = ("synthesize", "attack_linkage", "attack_mia", "evaluate")
EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2

TOP_KEYS = {"data_path", "schema_path", "epsilons", "delta", "seeds", "output_dir", "stages",
            "workload_path", "id_column", "missing_policy", "synth", "linkage", "mia",
            "evaluation", "workers"}
SYNTH_KEYS = {"rounds_max", "init_fraction", "select_fraction", "treewidth_cap",
              "anneal_factor", "n_output", "max_clique_cells"}
LINKAGE_KEYS = {"exact", "numeric", "offset", "scale", "threshold", "origin", "aux_path"}
MIA_KEYS = {"target_row", "draws", "metric", "calib_fraction", "synth_size"}
EVAL_KEYS = {"target", "group_col", "k_features", "test_fraction", "seed", "rf", "regression",
             "center", "workload_k", "corr_columns"}
RF_KEYS = {"n_trees", "max_depth", "min_leaf", "mtry"}
REGRESSION_KEYS = {"outcome", "fixed_effects", "group_col", "random_slope", "categorical"}


class ConfigError(Exception):
    def __init__(self, errors: list[str], warnings: list[str] | None = None):
        super().__init__("; ".join(errors))
        self.errors = errors
        self.warnings = warnings or []


@dataclass
class RunConfig:
    data_path: str
    schema_path: str
    epsilons: list[float] = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    delta: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = FALLBACK_OUTPUT_DIR
    stages: list[str] = field(default_factory=lambda: ["synthesize"])
    workload_path: str | None = None
    id_column: str | None = None
    missing_policy: str = "dedicated_code"
    synth: dict = field(default_factory=dict)
    linkage: dict | None = None
    mia: dict | None = None
    evaluation: dict | None = None
    workers: int = 1
    warnings: list[str] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("warnings")
        return out


def default_output_dir() -> str:
    return os.environ.get(ENV_OUTPUT_DIR) or FALLBACK_OUTPUT_DIR


def _writable(path: Path) -> bool:
    p = path.resolve()
    while not p.exists():
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _unknown(block: dict, known: set[str], where: str, warnings: list[str]) -> None:
    for k in sorted(set(block) - known):
        warnings.append(f"unknown key {where}{k!r} ignored")


def _block(obj: dict, key: str, known: set[str], errors: list[str], warnings: list[str]) -> dict | None:
    block = obj.get(key)
    if block is None:
        return None
    if not isinstance(block, dict):
        errors.append(f"{key} must be an object")
        return None
    _unknown(block, known, f"in {key}: ", warnings)
    return {k: v for k, v in block.items() if k in known}


def build_synth_config(epsilon: float, delta: float | None, seed: int, opts: dict) -> SynthConfig:
    return SynthConfig(epsilon=float(epsilon), delta=delta, seed=int(seed), **opts)


def build_linkage_config(opts: dict) -> LinkageConfig:
    exact = opts.get("exact")
    if isinstance(exact, str):
        exact = [c for c in exact.split(",") if c]
    return LinkageConfig(tuple(exact or ()), opts.get("numeric") or "",
                         offset=float(opts.get("offset", 0.5)), scale=float(opts.get("scale", 1.5)),
                         sim_threshold=float(opts.get("threshold", 0.8)), origin=opts.get("origin"))


def build_mia_config(opts: dict, seed: int) -> MiaConfig:
    return MiaConfig(metric=opts.get("metric", "hamming"), n_draws=int(opts.get("draws", 100)),
                     calib_fraction=float(opts.get("calib_fraction", 0.5)),
                     synth_size=opts.get("synth_size"), seed=int(seed))


def build_protocol(opts: dict, seed: int = 0) -> EvalProtocol:
    rf_opts = dict(opts.get("rf") or {})
    reg = opts.get("regression")
    spec = None
    if reg:
        spec = RegressionSpec(reg["outcome"], tuple(reg["fixed_effects"]), reg["group_col"],
                              reg.get("random_slope"), tuple(reg.get("categorical", ())))
    center = opts.get("center")
    if isinstance(center, dict):
        center = (center["value_col"], center["new_col"])
    return EvalProtocol(
        target=opts["target"], group_col=opts.get("group_col"),
        k_features=int(opts.get("k_features", 12)),
        test_fraction=float(opts.get("test_fraction", 0.2)),
        rf=RfConfig(seed=int(opts.get("seed", seed)), **rf_opts),
        seed=int(opts.get("seed", seed)), regression=spec,
        center=tuple(center) if center else None,
        workload_k=int(opts.get("workload_k", 2)),
        corr_columns=tuple(opts["corr_columns"]) if opts.get("corr_columns") else None,
    )


def validate_config(source: str | Path | dict, overrides: dict | None = None) -> RunConfig:
    """Parse and check a run configuration, collecting every problem before failing.

    Relative paths are resolved against the config file's directory. Unknown
    keys only produce warnings (available as ``RunConfig.warnings``).
    """
    errors: list[str] = []
    warnings: list[str] = []
    base = Path(".")
    if isinstance(source, dict):
        obj = dict(source)
    else:
        path = Path(source)
        base = path.parent
        try:
            obj = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from None
        if not isinstance(obj, dict):
            raise ConfigError(["config must be a JSON object"])
    obj.update({k: v for k, v in (overrides or {}).items() if v is not None})
    _unknown(obj, TOP_KEYS, "", warnings)

    def resolve(p):
        return str(p if Path(p).is_absolute() else base / p)

    paths = {}
    for key in ("data_path", "schema_path"):
        val = obj.get(key)
        if not isinstance(val, str) or not val:
            errors.append(f"{key} is required")
        elif not Path(resolve(val)).is_file():
            errors.append(f"{key} {val!r} does not exist")
        else:
            paths[key] = resolve(val)
    workload_path = obj.get("workload_path")
    if workload_path is not None:
        if not Path(resolve(workload_path)).is_file():
            errors.append(f"workload_path {workload_path!r} does not exist")
        else:
            workload_path = resolve(workload_path)

    epsilons = obj.get("epsilons", list(DEFAULT_EPSILONS))
    if not isinstance(epsilons, list) or not epsilons:
        errors.append("epsilons must be non-empty")
        epsilons = []
    else:
        bad = [e for e in epsilons if not _is_number(e) or e <= 0]
        if bad:
            errors.append(f"epsilons must be positive finite numbers, got {bad}")
        elif len(set(map(float, epsilons))) != len(epsilons):
            errors.append("epsilons must be distinct")

    delta = obj.get("delta")
    if delta is not None and (not _is_number(delta) or not 0 < delta < 1):
        errors.append("delta must lie in (0, 1)")

    seeds = obj.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
        errors.append("seeds must be a non-empty list of integers")
        seeds = []
    elif len(set(seeds)) != len(seeds):
        errors.append("seeds must be distinct")

    stages = obj.get("stages", ["synthesize"])
    if not isinstance(stages, list) or not stages:
        errors.append("stages must be a non-empty list")
        stages = []
    else:
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            errors.append(f"unknown stages {unknown}; choose from {list(STAGES)}")

    output_dir = obj.get("output_dir") or default_output_dir()
    if not _writable(Path(output_dir)):
        errors.append(f"output_dir {output_dir!r} is not writable")

    missing_policy = obj.get("missing_policy", "dedicated_code")
    if missing_policy not in ("dedicated_code", "drop_row"):
        errors.append("missing_policy must be 'dedicated_code' or 'drop_row'")

    workers = obj.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        errors.append("workers must be a positive integer")

    synth = _block(obj, "synth", SYNTH_KEYS, errors, warnings) or {}
    try:
        build_synth_config(1.0, None, 0, synth)
    except (TypeError, ValueError) as exc:
        errors.append(f"synth: {exc}")

    linkage = _block(obj, "linkage", LINKAGE_KEYS, errors, warnings)
    if "attack_linkage" in stages and linkage is None:
        errors.append("stage attack_linkage needs a linkage block")
    if linkage is not None:
        try:
            build_linkage_config(linkage)
        except (LinkageConfigError, TypeError, ValueError) as exc:
            errors.append(f"linkage: {exc}")
        aux = linkage.get("aux_path")
        if aux is not None:
            if not Path(resolve(aux)).is_file():
                errors.append(f"linkage.aux_path {aux!r} does not exist")
            else:
                linkage["aux_path"] = resolve(aux)

    mia = _block(obj, "mia", MIA_KEYS, errors, warnings)
    if "attack_mia" in stages and mia is None:
        errors.append("stage attack_mia needs a mia block")
    if mia is not None:
        row = mia.get("target_row")
        if not isinstance(row, int) or isinstance(row, bool) or row < 0:
            errors.append("mia.target_row must be a non-negative integer")
        try:
            build_mia_config(mia, 0)
        except (TypeError, ValueError) as exc:
            errors.append(f"mia: {exc}")

    evaluation = _block(obj, "evaluation", EVAL_KEYS, errors, warnings)
    if "evaluate" in stages and evaluation is None:
        errors.append("stage evaluate needs an evaluation block")
    if evaluation is not None:
        if isinstance(evaluation.get("rf"), dict):
            _unknown(evaluation["rf"], RF_KEYS, "in evaluation.rf: ", warnings)
        if isinstance(evaluation.get("regression"), dict):
            _unknown(evaluation["regression"], REGRESSION_KEYS, "in evaluation.regression: ", warnings)
        if not isinstance(evaluation.get("target"), str):
            errors.append("evaluation.target is required")
        else:
            try:
                build_protocol(evaluation)
            except (KeyError, TypeError, ValueError) as exc:
                errors.append(f"evaluation: {exc!r}")

    for w in warnings:
        logger.warning(w)
    if errors:
        raise ConfigError(errors, warnings)
    return RunConfig(
        data_path=paths["data_path"], schema_path=paths["schema_path"],
        epsilons=[float(e) for e in epsilons], delta=delta, seeds=list(seeds),
        output_dir=str(output_dir), stages=[s for s in STAGES if s in stages],
        workload_path=workload_path, id_column=obj.get("id_column"),
        missing_policy=missing_policy, synth=synth, linkage=linkage, mia=mia,
        evaluation=evaluation, workers=workers, warnings=warnings,
    )


def eps_dirname(eps: float) -> str:
    return f"eps_{eps:08.3f}"


_EPS_DIR = re.compile(r"^eps_(\d+(?:\.\d+)?)$")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _write_roc(path: Path, roc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in roc.to_rows():
            w.writerow([repr(thr), repr(fpr), repr(tpr)])


def _load_inputs(data_path, schema_path, missing_policy="dedicated_code", id_column=None):
    schema = load_schema(schema_path)
    raw = load_csv(data_path)
    table, clamps = encode(raw, schema, missing_policy, id_column)
    if clamps.total:
        logger.warning("clamped %d out-of-range values: %s", clamps.total, dict(clamps.counts))
    return raw, table


def _encode_like(path: Path, table: DiscreteTable) -> DiscreteTable:
    synth, _ = encode(load_csv(path), table.schema)
    return synth


@dataclass
class _CellJob:
    epsilon: float
    seed: int
    out_dir: str
    stages: list[str]
    table: DiscreteTable
    raw_real: Any
    workload: Any
    delta: float | None
    synth: dict
    linkage: dict | None
    mia: dict | None


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def _run_cell(job: _CellJob) -> dict:
    root = Path(job.out_dir)
    cell_dir = root / eps_dirname(job.epsilon) / f"seed_{job.seed}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    record = {"epsilon": job.epsilon, "seed": job.seed, "dir": _rel(cell_dir, root),
              "status": {}, "artifacts": {}, "errors": {}}
    timing = {}
    synth_path = cell_dir / "synth.csv"

    def attempt(stage, fn):
        t0 = time.perf_counter()
        try:
            fn()
            record["status"][stage] = "ok"
        except Exception as exc:  # a stage failure must not take down the sweep
            logger.error("eps=%g seed=%d %s failed: %s", job.epsilon, job.seed, stage, exc)
            record["status"][stage] = "failed"
            record["errors"][stage] = f"{type(exc).__name__}: {exc}"
        timing[stage] = time.perf_counter() - t0

    if "synthesize" in job.stages:
        def do_synth():
            cfg = build_synth_config(job.epsilon, job.delta, job.seed, job.synth)
            synth, log = synthesize(job.table, job.workload, cfg)
            write_csv(decode(synth), synth_path)
            (cell_dir / "round_log.json").write_text(log.dumps())
            _write_json(cell_dir / "ledger.json",
                        {"epsilon": job.epsilon, "delta": log.delta,
                         "total_rho": log.ledger.total_rho, "spent_rho": log.ledger.spent,
                         "entries": log.ledger.dump()})
            record["ledger"] = {"total_rho": log.ledger.total_rho, "spent_rho": log.ledger.spent,
                                "delta": log.delta, "entries": log.ledger.dump()}
            record["artifacts"].update({"synth": _rel(synth_path, root),
                                        "round_log": _rel(cell_dir / "round_log.json", root),
                                        "ledger": _rel(cell_dir / "ledger.json", root)})
        attempt("synthesize", do_synth)

    synth_ok = record["status"].get("synthesize", "ok") == "ok" and synth_path.is_file()
    if "attack_linkage" in job.stages:
        if not synth_ok:
            record["status"]["attack_linkage"] = "skipped"
        else:
            def do_link():
                aux = load_csv(job.linkage["aux_path"]) if job.linkage.get("aux_path") else job.raw_real
                result = linkage_attack(load_csv(synth_path), aux, build_linkage_config(job.linkage))
                _write_json(cell_dir / "matches.json", result.to_json())
                record["artifacts"]["matches"] = _rel(cell_dir / "matches.json", root)
            attempt("attack_linkage", do_link)

    if "attack_mia" in job.stages:
        def do_mia():
            target = job.table.rows[int(job.mia["target_row"])]
            cfg = build_synth_config(job.epsilon, job.delta, job.seed, job.synth)
            res = run_mia(target, job.table, build_mia_config(job.mia, job.seed), synth_cfg=cfg,
                          workload=job.workload)
            _write_roc(cell_dir / "roc.csv", res.roc)
            _write_json(cell_dir / "mia_summary.json", res.summary())
            record["artifacts"].update({"roc": _rel(cell_dir / "roc.csv", root),
                                        "mia_summary": _rel(cell_dir / "mia_summary.json", root)})
        attempt("attack_mia", do_mia)
    return {"record": record, "timing": timing}


def _write_report(report: dict, matrices: dict, out_path: Path) -> dict[str, str]:
    _write_json(out_path, report)
    written = {}
    for key, cm in matrices.items():
        name = "corr_real.csv" if key == "real" else f"corr_{eps_dirname(float(key))}.csv"
        p = out_path.parent / name
        cm.to_csv(p)
        written[key] = p
    return written


def run_pipeline(cfg: RunConfig) -> tuple[dict, int]:
    """Run every (epsilon, seed) cell, then per-seed evaluation, then write the manifest."""
    t_start = time.perf_counter()
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    raw, table = _load_inputs(cfg.data_path, cfg.schema_path, cfg.missing_policy, cfg.id_column)
    workload = load_workload(cfg.workload_path, table.schema) if cfg.workload_path else None

    jobs = [_CellJob(eps, seed, str(root), cfg.stages, table, raw, workload, cfg.delta,
                     cfg.synth, cfg.linkage, cfg.mia)
            for eps in cfg.epsilons for seed in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    cells = [r["record"] for r in results]
    timing = {"cells": {c["dir"]: r["timing"] for c, r in zip(cells, results)}}

    evaluation = {}
    if "evaluate" in cfg.stages:
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            key = f"seed_{seed}"
            synths = {}
            for c in cells:
                path = root / c["dir"] / "synth.csv"
                if c["seed"] == seed and c["status"].get("synthesize", "ok") == "ok" and path.is_file():
                    synths[c["epsilon"]] = _encode_like(path, table)
                elif c["seed"] == seed:
                    c["status"]["evaluate"] = "skipped"
            try:
                report, matrices = utility_report(table, synths, build_protocol(cfg.evaluation, seed))
                out = root / "evaluation" / key / "report.json"
                written = _write_report(report, matrices, out)
                evaluation[key] = {"status": "ok", "report": _rel(out, root),
                                   "correlations": {k: _rel(p, root) for k, p in written.items()}}
                for c in cells:
                    if c["seed"] == seed and c["epsilon"] in synths:
                        c["status"]["evaluate"] = "ok"
            except Exception as exc:
                logger.error("evaluation for seed %d failed: %s", seed, exc)
                evaluation[key] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            timing[f"evaluate/{key}"] = time.perf_counter() - t0

    failed = any(s == "failed" for c in cells for s in c["status"].values()) or any(
        e["status"] == "failed" for e in evaluation.values())
    timing["total"] = time.perf_counter() - t_start
    manifest = {
        "version": __version__,
        "root_seeds": cfg.seeds,
        "config": cfg.to_json(),
        "cells": cells,
        "evaluation": evaluation,
        "status": "failed" if failed else "ok",
        "timing": timing,
    }
    _write_json(root / "manifest.json", manifest)
    return manifest, EXIT_STAGE if failed else EXIT_OK


def _out_path(p: str, output_dir: str | None) -> Path:
    path = Path(p)
    if path.is_absolute() or output_dir is None:
        return path
    return Path(output_dir) / path


def _cmd_synthesize(args) -> int:
    cfg = build_synth_config(args.epsilon, args.delta, args.seed,
                             {k: v for k, v in (("rounds_max", args.rounds_max),
                                                ("n_output", args.n_output)) if v is not None})
    _, table = _load_inputs(args.data, args.schema)
    workload = load_workload(args.workload, table.schema) if args.workload else None
    out, log_path = _out_path(args.out, args.output_dir), _out_path(args.log, args.output_dir)
    try:
        synth, log = synthesize(table, workload, cfg)
    except Exception as exc:
        logger.error("synthesis failed: %s", exc)
        return EXIT_STAGE
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(decode(synth), out)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text(log.dumps())
    if args.ledger:
        _write_json(_out_path(args.ledger, args.output_dir),
                    {"epsilon": cfg.epsilon, "delta": log.delta, "total_rho": log.ledger.total_rho,
                     "spent_rho": log.ledger.spent, "entries": log.ledger.dump()})
    return EXIT_OK


def _cmd_attack_linkage(args) -> int:
    cfg = build_linkage_config({"exact": args.exact, "numeric": args.numeric, "offset": args.offset,
                                "scale": args.scale, "threshold": args.threshold,
                                "origin": args.origin})
    target, aux = load_csv(args.target), load_csv(args.aux)
    try:
        result = linkage_attack(target, aux, cfg)
    except LinkageConfigError:
        raise
    except Exception as exc:
        logger.error("linkage attack failed: %s", exc)
        return EXIT_STAGE
    _write_json(_out_path(args.out, args.output_dir), result.to_json())
    print(f"{len(result)} matches")
    return EXIT_OK


def _cmd_attack_mia(args) -> int:
    synth_cfg = build_synth_config(args.epsilon, args.delta, args.seed, {})
    mia_cfg = build_mia_config({"draws": args.draws, "metric": args.metric,
                                "calib_fraction": args.calib_fraction,
                                "synth_size": args.synth_size}, args.seed)
    _, table = _load_inputs(args.data, args.schema)
    if not 0 <= args.target_row < table.n:
        raise ConfigError([f"target-row must lie in [0, {table.n})"])
    workload = load_workload(args.workload, table.schema) if args.workload else None
    try:
        res = run_mia(table.rows[args.target_row], table, mia_cfg, synth_cfg=synth_cfg,
                      workload=workload)
    except Exception as exc:
        logger.error("membership inference failed: %s", exc)
        return EXIT_STAGE
    out = _out_path(args.out, args.output_dir)
    summary = _out_path(args.summary, args.output_dir) if args.summary else out.with_suffix(".json")
    _write_roc(out, res.roc)
    _write_json(summary, res.summary())
    print(json.dumps(res.summary()))
    return EXIT_OK


def find_synth_files(synth_dir: Path, seed: int) -> dict[float, Path]:
    """Map epsilon to synth.csv under ``eps_*/seed_<seed>/`` or ``eps_*/``."""
    found = {}
    for d in sorted(synth_dir.iterdir()):
        m = _EPS_DIR.match(d.name)
        if not m or not d.is_dir():
            continue
        for cand in (d / f"seed_{seed}" / "synth.csv", d / "synth.csv"):
            if cand.is_file():
                found[float(m.group(1))] = cand
                break
    return found


def _cmd_evaluate(args) -> int:
    opts = {"target": args.target, "group_col": args.group_col, "k_features": args.k_features,
            "test_fraction": args.test_fraction, "seed": args.seed,
            "rf": {"n_trees": args.n_trees}}
    if args.fixed_effects:
        opts["regression"] = {"outcome": args.target, "fixed_effects": args.fixed_effects.split(","),
                              "group_col": args.group_col, "random_slope": args.random_slope,
                              "categorical": args.categorical.split(",") if args.categorical else []}
    if args.center:
        value_col, _, new_col = args.center.partition(":")
        opts["center"] = [value_col, new_col or f"{value_col}_dev"]
    protocol = build_protocol(opts, args.seed)
    _, real = _load_inputs(args.real, args.schema)
    files = find_synth_files(Path(args.synth_dir), args.seed)
    if not files:
        raise ConfigError([f"no eps_*/synth.csv files under {args.synth_dir}"])
    synths = {eps: _encode_like(p, real) for eps, p in files.items()}
    try:
        report, matrices = utility_report(real, synths, protocol)
    except Exception as exc:
        logger.error("evaluation failed: %s", exc)
        return EXIT_STAGE
    _write_report(report, matrices, _out_path(args.out, args.output_dir))
    return EXIT_OK


def _cmd_pipeline(args) -> int:
    overrides = {"output_dir": args.output_dir, "workers": args.workers}
    if args.epsilons:
        overrides["epsilons"] = [float(e) for e in args.epsilons.split(",")]
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    cfg = validate_config(args.config, overrides)
    manifest, code = run_pipeline(cfg)
    print(f"pipeline {manifest['status']}: {Path(cfg.output_dir) / 'manifest.json'}")
    return code


def _cmd_validate(args) -> int:
    cfg = validate_config(args.config)
    print(json.dumps(cfg.to_json(), indent=2))
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpsynth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=None,
                        help=f"base for relative output paths (default: ${ENV_OUTPUT_DIR})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="generate one synthetic table")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--workload")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds-max", type=int)
    p.add_argument("--n-output", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--ledger")
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("attack-linkage", parents=[common], help="link two tables on quasi-identifiers")
    p.add_argument("--target", required=True)
    p.add_argument("--aux", required=True)
    p.add_argument("--exact", required=True, help="comma-separated exact-match columns")
    p.add_argument("--numeric", required=True)
    p.add_argument("--offset", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=1.5)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--origin", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attack_linkage)

    p = sub.add_parser("attack-mia", parents=[common], help="closest-distance membership inference")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--target-row", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--metric", choices=["hamming", "euclidean"], default="hamming")
    p.add_argument("--calib-fraction", type=float, default=0.5)
    p.add_argument("--synth-size", type=int)
    p.add_argument("--workload")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="summary JSON path (default: --out with .json suffix)")
    p.set_defaults(func=_cmd_attack_mia)

    p = sub.add_parser("evaluate", parents=[common], help="utility report for an epsilon sweep")
    p.add_argument("--real", required=True)
    p.add_argument("--synth-dir", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--group-col")
    p.add_argument("--k-features", type=int, default=12)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--n-trees", type=int, default=200)
    p.add_argument("--fixed-effects", help="comma-separated LMM fixed effects")
    p.add_argument("--random-slope")
    p.add_argument("--categorical", help="comma-separated categorical fixed effects")
    p.add_argument("--center", help="VALUE:NEW, centre VALUE within --group-col into NEW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("pipeline", parents=[common], help="run a configured epsilon sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--epsilons", help="comma-separated, overrides the config")
    p.add_argument("--seeds", help="comma-separated, overrides the config")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("validate", help="check a run config and print it with defaults filled in")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "output_dir", None) is None and args.command != "validate":
        args.output_dir = os.environ.get(ENV_OUTPUT_DIR) if args.command != "pipeline" else None
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, EncodingError, StructuralError, LinkageConfigError,
            OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
