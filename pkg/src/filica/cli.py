"""Command-line entry point: ``filica {gen,run,fuse,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import matrixio
from .engine import EngineError
from .evaluation import aggregate, evaluate_fit
from .fusion import METHODS, FiLicaConfig, fit_method
from .matrixio import DatasetError
from .report import write_boxplots
from .simgen import SETTINGS, gen_replicate

log = logging.getLogger("filica")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

DEFAULT_ITERS = {"filica": 1000, "completer": 1500, "replace0": 1500, "oracle": 1500}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    settings: list = field(default_factory=lambda: list(SETTINGS))
    missing_pcts: list = field(default_factory=lambda: [0.05, 0.10, 0.20])
    n_replicates: int = 100
    methods: list = field(default_factory=lambda: list(METHODS))
    L: int = 5
    # int for every method, or a {method: iterations} mapping
    lica_iters: object = field(default_factory=lambda: dict(DEFAULT_ITERS))
    fi_updates: int = 20
    tol_rel: float = 1e-3
    base_seed: int = 0
    out_dir: str = "results"
    parallelism: int = 1

    def __post_init__(self):
        bad = [s for s in self.settings if s not in SETTINGS]
        if not self.settings or bad:
            raise ConfigError(f"settings must be a non-empty subset of {SETTINGS}; got {self.settings}")
        bad = [m for m in self.methods if m not in METHODS]
        if not self.methods or bad:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}; got {self.methods}")
        self.missing_pcts = [float(p) for p in self.missing_pcts]
        if any(p not in (0.05, 0.10, 0.20) for p in self.missing_pcts):
            raise ConfigError(f"missing_pcts must be drawn from 0.05, 0.10, 0.20; got {self.missing_pcts}")
        if not self.missing_pcts and set(self.methods) != {"oracle"}:
            raise ConfigError("missing_pcts may only be empty when running the oracle alone")
        for name in ("n_replicates", "L", "fi_updates", "parallelism"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0 < float(self.tol_rel) < 1:
            raise ConfigError("tol_rel must lie in (0, 1)")
        if isinstance(self.lica_iters, int):
            self.lica_iters = {m: self.lica_iters for m in METHODS}
        elif isinstance(self.lica_iters, dict):
            unknown = set(self.lica_iters) - set(METHODS)
            if unknown:
                raise ConfigError(f"lica_iters has unknown methods {sorted(unknown)}")
            self.lica_iters = {**DEFAULT_ITERS, **self.lica_iters}
        else:
            raise ConfigError("lica_iters must be an integer or a {method: integer} mapping")
        if any(not isinstance(v, int) or v < 1 for v in self.lica_iters.values()):
            raise ConfigError("lica_iters values must be positive integers")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def fusion_config(self, method: str, seed: int) -> FiLicaConfig:
        return FiLicaConfig(L=self.L, lica_iters=self.lica_iters[method], fi_updates=self.fi_updates,
                            tol_rel=float(self.tol_rel), seed=seed)

    def cells(self):
        """Every (setting, pct, replicate, method) cell in canonical order.

        The oracle ignores missingness, so it runs once per replicate at pct 0.
        """
        out = []
        for setting in self.settings:
            for rep in range(self.n_replicates):
                for method in self.methods:
                    pcts = [0.0] if method == "oracle" else self.missing_pcts
                    out.extend((setting, pct, rep, method) for pct in pcts)
        return sorted(out)


def _record(out: Path, cell) -> Path:
    setting, pct, rep, method = cell
    return matrixio.record_path(out, setting, pct, method, rep)


def replicate_seed(base_seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, replicate]).generate_state(1)[0])


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(raw)


def run_cell(cell, cfg: ExperimentConfig) -> dict:
    """Fit and score one cell; returns the record payload."""
    setting, pct, rep, method = cell
    seed = replicate_seed(cfg.base_seed, rep)
    t0 = time.perf_counter()
    truth, masked, full = gen_replicate(setting, pct, seed)
    try:
        result = fit_method(method, masked, cfg.fusion_config(method, seed), full)
    except (EngineError, ValueError) as exc:
        return {"rows": [], "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    rows = evaluate_fit(result, truth, rep)
    info = {
        "status": "ok",
        "seed": seed,
        "effective_iters": result.effective_iters,
        "engine_converged": bool(result.decomposition.converged),
        "fi_updates_run": len(result.fi_deltas),
        "fi_converged": bool(result.fi_converged),
        "seconds": round(time.perf_counter() - t0, 3),
    }
    return {"rows": rows, **info}


def _cell_worker(args):
    cell, cfg_dict = args
    return cell, run_cell(cell, ExperimentConfig(**cfg_dict))


def _valid_record(path: Path) -> bool:
    try:
        payload = matrixio.read_record(path)
    except (OSError, ValueError):
        return False
    return payload.get("status") == "ok"


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> int:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc)
        return EXIT_CONFIG
    cells = cfg.cells()
    todo = []
    for cell in cells:
        path = _record(out, cell)
        if resume and path.exists() and _valid_record(path):
            continue
        todo.append(cell)
    log.info("%d cells, %d to run", len(cells), len(todo))

    failures = []

    def collect(cell, payload):
        matrixio.write_record(_record(out, cell), payload["rows"],
                              {k: v for k, v in payload.items() if k != "rows"})
        if payload["status"] != "ok":
            failures.append({"cell": list(cell), "error": payload["error"]})
            log.warning("cell %s failed: %s", cell, payload["error"])

    if cfg.parallelism > 1 and len(todo) > 1:
        cfg_dict = asdict(cfg)
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
            for cell, payload in pool.map(_cell_worker, [(c, cfg_dict) for c in todo]):
                collect(cell, payload)
    else:
        for cell in todo:
            collect(cell, run_cell(cell, cfg))

    rows = []
    for cell in cells:
        rows.extend(matrixio.read_record(_record(out, cell))["rows"])
    _write_outputs(out, rows)
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return EXIT_PARTIAL if failures else EXIT_OK


def _write_outputs(out: Path, rows: list[dict]) -> None:
    report = aggregate(rows)
    matrixio.write_summary_csv(out / "summary.csv", report.rows)
    matrixio.write_aggregates_csv(out / "aggregates.csv", report.aggregates)
    if report.rows:
        write_boxplots(report.rows, out / "figures")


def cmd_gen(args) -> int:
    cfg = load_config(args.config, _overrides(args)) if args.config else ExperimentConfig(
        **{k: v for k, v in _overrides(args).items() if v is not None})
    out = Path(args.out or cfg.out_dir)
    for setting in cfg.settings:
        for rep in range(cfg.n_replicates):
            seed = replicate_seed(cfg.base_seed, rep)
            for pct in [0.0] + cfg.missing_pcts:
                truth, masked, _ = gen_replicate(setting, pct, seed)
                d = out / setting / f"pct{round(pct * 100):02d}" / f"replicate_{rep}"
                matrixio.save_dataset(d, masked)
                (d / "truth.json").write_text(json.dumps(truth.to_dict()) + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    return run_experiment(cfg, resume=args.resume)


def cmd_report(args) -> int:
    out = Path(args.out)
    rows = matrixio.load_results(out)
    _write_outputs(out, rows)
    return EXIT_OK


def cmd_fuse(args) -> int:
    manifest, mods = matrixio.load_dataset(args.manifest)
    cfg = FiLicaConfig(L=args.L, lica_iters=args.lica_iters or DEFAULT_ITERS[args.method],
                       fi_updates=args.fi_updates, tol_rel=args.tol_rel, seed=args.seed or 0)
    if args.method == "oracle" and not all(m.is_complete for m in mods):
        raise DatasetError("oracle requires a dataset without missing subjects")
    result = fit_method(args.method, mods, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = result.decomposition
    ids = [manifest.subject_ids[i] for i in result.subjects]
    with open(out / "H.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ids)
        for row in d.h:
            writer.writerow([repr(float(x)) for x in row])
    for spec, xw in zip(manifest.modalities, d.xw):
        matrixio.write_matrix_csv(out / f"XW_{spec.name}.csv", xw)
    meta = {
        "method": result.method,
        "n_components": d.n_components,
        "subjects": ids,
        "weights": {s.name: w.tolist() for s, w in zip(manifest.modalities, d.weights)},
        "noise_var": dict(zip([s.name for s in manifest.modalities], d.noise_var)),
        "engine_converged": d.converged,
        "objective_trace": list(d.objective_trace),
        "fi_deltas": list(result.fi_deltas),
        "fi_converged": result.fi_converged,
        "effective_iters": result.effective_iters,
    }
    (out / "fusion.json").write_text(json.dumps(meta, indent=2) + "\n")
    return EXIT_OK


def _overrides(args) -> dict:
    methods = args.methods.split(",") if getattr(args, "methods", None) else None
    return {
        "out_dir": getattr(args, "out", None),
        "base_seed": getattr(args, "seed", None),
        "n_replicates": getattr(args, "replicates", None),
        "parallelism": getattr(args, "parallelism", None),
        "methods": methods,
    }


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="filica", description="Full-information linked ICA")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="base seed")
        sp.add_argument("--replicates", type=int)
        sp.add_argument("--parallelism", type=int)
        sp.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))

    sp = sub.add_parser("gen", help="write simulated datasets")
    common(sp, False)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("run", help="run a simulation experiment")
    common(sp, True)
    sp.add_argument("--resume", action="store_true", help="skip cells with a valid record")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="re-aggregate records into CSV and SVG")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("fuse", help="fit one method on a dataset manifest")
    sp.add_argument("manifest")
    sp.add_argument("--method", choices=METHODS, default="filica")
    sp.add_argument("--out", required=True)
    sp.add_argument("--L", type=int, default=5)
    sp.add_argument("--lica-iters", type=int)
    sp.add_argument("--fi-updates", type=int, default=20)
    sp.add_argument("--tol-rel", type=float, default=1e-3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_fuse)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DatasetError, EngineError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
