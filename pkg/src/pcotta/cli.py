"""Command-line entry point: ``pcotta <command> --config PATH [--seed N] [--out DIR] [--baseline-frozen]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import geometry as geo
from .config import RunConfig
from .errors import ConfigError, ContractError, ParseError, RuntimeFailure
from .model import MPMModel
from .prototypes import load_bank, save_bank
from .pipeline import ABLATION_FIELDS, REFERENCE_NOTES, ablate, adapt, export_features, init_bank, pretrain_model, stream_schedule
from .svg import line_chart, running_mean
from .tasks import TASKS, PromptPool
from .blobs import write_blob

log = logging.getLogger("pcotta")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("pretrain", "init-bank", "adapt", "ablate", "export-features")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _blob_files(stem: Path) -> list[Path]:
    return [stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")]


class Run:
    """Collects artifacts and timings for the run manifest of one command."""

    def __init__(self, command: str, cfg: RunConfig, seed: int, out: Path):
        self.command, self.cfg, self.seed, self.out = command, cfg, seed, out
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self.extra: dict = {}
        self._t0 = time.perf_counter()

    def timed(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 6)

        return _Timer()

    def need(self, stem: str) -> Path:
        path = self.out / stem
        self.inputs.extend(_blob_files(path))
        return path

    def wrote(self, *paths: Path) -> None:
        self.outputs.extend(paths)

    def manifest(self) -> Path:
        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        doc = {
            "command": self.command,
            "tool_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": self.seed,
            "config": _jsonable(self.cfg.to_dict()),
            "inputs": {p.name: _digest(p) for p in self.inputs if p.exists()},
            "artifacts": {p.name: _digest(p) for p in self.outputs},
            "timings_seconds": self.timings,
        }
        doc.update(self.extra)
        path = self.out / f"{self.command}_manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_trace(path: Path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(values, start=1):
            w.writerow([i, repr(float(v))])


def _bank_dims(cfg: RunConfig) -> dict[str, int]:
    return {"R": len(cfg.data.source_domains), "S": cfg.bank.quantity, "K": len(TASKS), "M": cfg.model.M, "C": cfg.model.C}


def cmd_pretrain(run: Run) -> None:
    with run.timed("pretrain"):
        model, trace = pretrain_model(run.cfg, run.seed)
    stem = run.out / "model"
    model.save(stem, {"seed": run.seed})
    _write_trace(run.out / "pretrain_trace.csv", trace)
    run.wrote(*_blob_files(stem), run.out / "pretrain_trace.csv")
    run.extra["final_loss"] = trace[-1] if trace else None


def cmd_init_bank(run: Run) -> None:
    model = MPMModel.load(run.need("model"), expected=run.cfg.model)
    with run.timed("init_bank"):
        art = init_bank(run.cfg, model, run.seed)
    art.model.save(run.out / "tuned", {"seed": run.seed})
    save_bank(art.bank, run.out / "bank", {"seed": run.seed})
    art.pool.save(run.out / "pool")
    meta = {"count": len(art.domains), "tasks": ",".join(str(t) for t in art.tasks)}
    meta.update({f"domain.{i}": d for i, d in enumerate(art.domains)})
    write_blob(run.out / "source_features", {"features": art.features}, meta)
    _write_trace(run.out / "bank_trace.csv", art.trace)
    for stem in ("tuned", "bank", "pool", "source_features"):
        run.wrote(*_blob_files(run.out / stem))
    run.wrote(run.out / "bank_trace.csv")
    run.extra["bank_dims"] = art.bank.dims()


def _load_adaptation_inputs(run: Run):
    model = MPMModel.load(run.need("tuned"), expected=run.cfg.model)
    bank = load_bank(run.need("bank"), expected=_bank_dims(run.cfg))
    pool = PromptPool.load(run.need("pool"))
    with run.timed("schedule"):
        schedule = stream_schedule(run.cfg, model, pool, run.seed)
    return model, bank, schedule


def cmd_adapt(run: Run, frozen: bool) -> None:
    model, bank, schedule = _load_adaptation_inputs(run)
    tag = "frozen" if frozen else "adapt"
    with run.timed("adapt"):
        result, adapter = adapt(run.cfg, model, bank, schedule, run.seed, frozen=frozen)
    out = run.out
    result.report.to_csv(out / f"{tag}_report.csv")
    result.report.to_json(out / f"{tag}_report.json")
    result.write_trace(out / f"{tag}_trace.csv")
    series = {}
    for t in TASKS:
        idx = [i for i, row in enumerate(result.trace) if row["task"] == t.label]
        smooth = running_mean([result.cds[i] * 1e3 for i in idx])
        series[t.label] = list(zip(idx, smooth))
    (out / f"{tag}_chart.svg").write_text(line_chart(series, f"Chamfer distance along the stream ({tag})", "stream position", "CD x 1e3 (running mean)"))
    adapter.save_state(out / f"{tag}_state", {"seed": run.seed})
    run.wrote(*(out / f"{tag}_{s}" for s in ("report.csv", "report.json", "trace.csv", "chart.svg")), *_blob_files(out / f"{tag}_state"))
    run.command = tag if frozen else run.command
    run.extra["references"] = REFERENCE_NOTES
    run.extra["baseline_frozen"] = frozen
    print(result.report.table())


def cmd_ablate(run: Run) -> None:
    model, bank, schedule = _load_adaptation_inputs(run)
    with run.timed("ablate"):
        rows = ablate(run.cfg, model, bank, schedule, run.seed)
    path = run.out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    run.wrote(path)
    for row in rows:
        print(f"{row['kind']:9s} {row['setting']:9s} {row['task']:15s} {row['cd_mean'] * 1e3:8.3f}")


def cmd_export_features(run: Run) -> None:
    from .tasks import build_pretrain_set

    model = MPMModel.load(run.need("tuned"), expected=run.cfg.model)
    bank = load_bank(run.need("bank"), expected=_bank_dims(run.cfg))
    ex = run.cfg.export
    if ex.clouds:
        clouds = [geo.load_xyz(p) for p in ex.clouds]
        tasks = [ex.task] * len(clouds)
        names = [Path(p).stem for p in ex.clouds]
    else:
        samples = build_pretrain_set(run.cfg.data.source_domains, run.cfg.data.pretrain_per_domain, run.seed, run.cfg.data.n_points)
        clouds = [s.query_input for s in samples]
        tasks = [s.task for s in samples]
        names = [f"{s.query_domain}-{s.uid}" for s in samples]
    with run.timed("export"):
        records = export_features(model, bank, clouds, tasks, names, run.cfg.adapt)
    arrays, meta = {}, {"count": len(records)}
    for i, r in enumerate(records):
        arrays[f"pre.{i}"] = r.pre
        arrays[f"post.{i}"] = r.post
        meta[f"name.{i}"] = r.name
        meta[f"task.{i}"] = r.task.label
    write_blob(run.out / "features", arrays, meta)
    run.wrote(*_blob_files(run.out / "features"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcotta", description="Continual test-time adaptation for point-cloud tasks.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="path to a [section] key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--out", default=None, help="artifact directory (overrides [run] out)")
    p.add_argument("--baseline-frozen", action="store_true", help="adapt with lr=0 (no-adaptation baseline)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        seed = cfg.run.seed if args.seed is None else args.seed
        out = Path(args.out if args.out is not None else cfg.run.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, cfg, seed, out)
        if args.baseline_frozen and args.command != "adapt":
            raise ConfigError("--baseline-frozen only applies to adapt")
        if args.command == "pretrain":
            cmd_pretrain(run)
        elif args.command == "init-bank":
            cmd_init_bank(run)
        elif args.command == "adapt":
            cmd_adapt(run, args.baseline_frozen)
        elif args.command == "ablate":
            cmd_ablate(run)
        else:
            cmd_export_features(run)
        run.manifest()
    except (ConfigError, ParseError, ContractError, FileNotFoundError) as exc:
        print(f"pcotta: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, FloatingPointError, ArithmeticError) as exc:
        print(f"pcotta: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
