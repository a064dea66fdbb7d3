"""Batch command-line interface: sbm, condense, eval, spectral, baseline.

Every command writes its artifacts plus a ``manifest.json`` (versions, seed,
resolved config and SHA-256 of every input and output) under ``--out``.
Failures print one JSON line to stderr and exit with 2 (config/parse/input),
3 (numerical) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import config as cfgmod
from .condense import CondenseDiverged, condense
from .errors import InputError, NumericalError, ParseError, SgddError
from .evaluate import (
    BASELINES,
    append_metrics_csv,
    baseline_feature_similarity,
    baseline_herding,
    baseline_kcenter,
    baseline_random,
    metrics_rows,
    train_eval,
)
from .graph import CondensedGraph, Graph, GRAPH_SUFFIX, SbmSpec, load_graph, save_graph, sbm_generate
from .models import ARCHITECTURES
from .seeding import default_seed
from .spectral import MODES, shift

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

CONDENSED_FILE = "condensed" + GRAPH_SUFFIX
SBM_FILE = "graph" + GRAPH_SUFFIX


class CliUsageError(ParseError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


class _Writer:
    """Single point through which a command writes files; tracks outputs."""

    def __init__(self, out_dir: Path):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []

    def text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        self._track(path)
        return path

    def graph(self, name: str, g) -> Path:
        path = save_graph(g, self.out / name)
        self._track(path)
        return path

    def track(self, path: Path) -> None:
        self._track(Path(path))

    def _track(self, path: Path) -> None:
        if path not in self.outputs:
            self.outputs.append(path)

    def manifest(self, command: str, argv: Sequence[str], seed, resolved: dict, inputs: Sequence[Path]) -> Path:
        doc = {
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "versions": {
                "sgdd": _version(),
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "config": cfgmod._strip_none(resolved),
            "inputs": {str(p): sha256_file(p) for p in inputs},
            "outputs": {p.name: sha256_file(p) for p in self.outputs},
        }
        path = self.out / "manifest.json"
        path.write_text(_json_text(doc), encoding="utf-8")
        return path


def _root_seed(cfg: dict) -> int:
    return default_seed() if cfg.get("seed") is None else int(cfg["seed"])


def _read_graph(path) -> Graph | CondensedGraph:
    path = Path(path)
    if path.is_dir():
        path = path / CONDENSED_FILE
    return load_graph(path)


def _read_original(path) -> Graph:
    g = load_graph(path)
    if not isinstance(g, Graph):
        raise InputError(f"{path}: expected an original graph, found a condensed one")
    return g


def _condensed_paths(path) -> tuple[Path, Path | None]:
    path = Path(path)
    if path.is_dir():
        return path / CONDENSED_FILE, path
    return path, path.parent


# --- commands -------------------------------------------------------------------


def cmd_sbm(args, argv) -> int:
    cfg = cfgmod.resolve(
        args.config, args.override, {"n": args.n, "c": args.c, "p": args.p, "q": args.q, "seed": args.seed}, "sbm"
    )
    seed = _root_seed(cfg)
    s = cfg["sbm"]
    g = sbm_generate(SbmSpec(s["n"], s["c"], s["p"], s["q"], seed))
    w = _Writer(args.out)
    w.graph(SBM_FILE, g)
    w.manifest("sbm", argv, seed, cfg, [])
    return EXIT_OK


def _write_condensed(w: _Writer, s: CondensedGraph, report_doc: dict, wallclock: float, cfg: dict) -> None:
    w.graph(CONDENSED_FILE, s)
    w.text("report.json", _json_text(report_doc))
    w.text("timing.json", _json_text({"wallclock_s": wallclock}))
    w.text("config.toml", cfgmod.dumps_toml(cfg))


def cmd_condense(args, argv) -> int:
    cfg = cfgmod.resolve(args.config, args.override, {"seed": args.seed, "ratio": args.ratio}, "condense")
    seed = _root_seed(cfg)
    ccfg = cfgmod.condense_config(cfg, seed)
    g = _read_original(args.graph)
    w = _Writer(args.out)
    try:
        s, report = condense(g, ccfg)
    except CondenseDiverged as exc:
        w.text("report.json", _json_text({"method": "sgdd", **exc.report.to_dict()}))
        w.manifest("condense", argv, seed, cfg, [Path(args.graph)])
        raise
    _write_condensed(w, s, {"method": "sgdd", **report.to_dict()}, report.wallclock_s, cfg)
    w.manifest("condense", argv, seed, cfg, [Path(args.graph)])
    return EXIT_OK


def cmd_baseline(args, argv) -> int:
    cfg = cfgmod.resolve(
        args.config, args.override, {"seed": args.seed, "method": args.method, "ratio": args.ratio}, "baseline"
    )
    seed = _root_seed(cfg)
    method = cfg["baseline"]["method"]
    ratio = cfg["baseline"]["ratio"]
    if method not in BASELINES:
        raise InputError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    g = _read_original(args.graph)
    w = _Writer(args.out)
    start = time.perf_counter()
    if method == "feature-similarity":
        cfg["condense"]["ratio"] = ratio
        s, report = baseline_feature_similarity(g, cfgmod.condense_config(cfg, seed))
        doc = {"method": method, **report.to_dict()}
    else:
        if method == "random":
            s = baseline_random(g, ratio, seed)
        elif method == "herding":
            s = baseline_herding(g, ratio)
        else:
            s = baseline_kcenter(g, ratio, seed)
        doc = {"method": method, "seed": seed, "n_prime": s.n_prime, "config": {"ratio": ratio, "arch": "none"}}
    _write_condensed(w, s, doc, time.perf_counter() - start, cfg)
    w.manifest("baseline", argv, seed, cfg, [Path(args.graph)])
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    flags = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr, "seeds": args.seeds, "method": args.method}
    if args.archs is not None:
        flags["archs"] = [a.strip() for a in args.archs.split(",") if a.strip()]
    cfg = cfgmod.resolve(args.config, args.override, flags, "eval")
    seed = _root_seed(cfg)
    e = cfg["eval"]
    for arch in e["archs"]:
        if arch not in ARCHITECTURES:
            raise InputError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if e["seeds"] < 1 or e["epochs"] < 0 or not e["lr"] > 0:
        raise InputError("eval needs seeds >= 1, epochs >= 0 and lr > 0")
    if args.jobs < 1:
        raise InputError("--jobs must be >= 1")

    cond_path, cond_dir = _condensed_paths(args.condensed)
    s = load_graph(cond_path)
    if not isinstance(s, CondensedGraph):
        raise InputError(f"{cond_path}: expected a condensed graph")
    g = _read_original(args.original)
    inputs = [cond_path, Path(args.original)]

    method, condense_arch, wallclock = e["method"] or "sgdd", "gcn", None
    report_path = cond_dir / "report.json" if cond_dir else None
    if report_path is not None and report_path.exists():
        report = json.loads(report_path.read_text(encoding="utf-8"))
        method = e["method"] or report.get("method", method)
        condense_arch = report.get("config", {}).get("arch", condense_arch)
        inputs.append(report_path)
    timing_path = cond_dir / "timing.json" if cond_dir else None
    if timing_path is not None and timing_path.exists():
        wallclock = json.loads(timing_path.read_text(encoding="utf-8")).get("wallclock_s")
        inputs.append(timing_path)
    sc = shift(g, s, mode=cfg["spectral"]["mode"]).sc

    seeds = list(range(e["seeds"]))
    jobs = [(arch, sd) for arch in e["archs"] for sd in seeds]

    def run(job):
        arch, sd = job
        return train_eval(arch, s, g, e["epochs"], e["lr"], [sd], e["hidden"], root_seed=seed)

    if args.jobs == 1:
        results = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, jobs))
    rows = metrics_rows(method, condense_arch, s.ratio, sc, wallclock, results)
    w = _Writer(args.out)
    metrics = Path(args.metrics) if args.metrics else w.out / "metrics.csv"
    append_metrics_csv(metrics, rows)
    w.track(metrics)
    w.manifest("eval", argv, seed, cfg, inputs)
    return EXIT_OK


def cmd_spectral(args, argv) -> int:
    cfg = cfgmod.resolve(args.config, args.override, {"mode": args.mode, "seed": args.seed}, "spectral")
    a = _read_graph(args.a)
    b = _read_graph(args.b)
    res = shift(a, b, mode=cfg["spectral"]["mode"])
    w = _Writer(args.out)
    w.text("spectral.json", _json_text(res.to_dict()))
    inputs = [Path(args.a) if not Path(args.a).is_dir() else Path(args.a) / CONDENSED_FILE]
    inputs.append(Path(args.b) if not Path(args.b).is_dir() else Path(args.b) / CONDENSED_FILE)
    w.manifest("spectral", argv, _root_seed(cfg), cfg, inputs)
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--config", default=None, help="TOML config file (sections: sbm, condense, eval, spectral, baseline)")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable); bare keys refer to this command's section",
    )
    p.add_argument("--seed", type=int, default=None, help="root seed (default: $SGDD_SEED, else 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgdd", description="Structure-broadcasting graph condensation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("sbm", help="generate a stochastic block model graph", description="Generate an SBM graph.")
    _common(p, "output directory (receives graph.graph.json)")
    p.add_argument("--n", type=int, default=None, help="number of nodes (default 100)")
    p.add_argument("--c", type=int, default=None, help="number of blocks / classes (default 5)")
    p.add_argument("--p", type=float, default=None, help="intra-block edge probability (default 0.8)")
    p.add_argument("--q", type=float, default=None, help="inter-block edge probability (default 0.1)")
    p.set_defaults(func=cmd_sbm)

    p = sub.add_parser("condense", help="condense a graph", description="Condense a graph into a small synthetic one.")
    _common(p, "output directory (condensed graph, report, timing, config echo)")
    p.add_argument("--graph", required=True, help="original graph (.graph.json)")
    p.add_argument("--ratio", type=float, default=None, help="condensing ratio N'/N (default 0.1)")
    p.set_defaults(func=cmd_condense)

    p = sub.add_parser("eval", help="evaluate a condensed graph", description="Train on a condensed graph, test on the original.")
    _common(p, "output directory (metrics.csv unless --metrics is given)")
    p.add_argument("--condensed", required=True, help="condensed graph file or the directory holding it")
    p.add_argument("--original", required=True, help="original graph (.graph.json) providing the test mask")
    p.add_argument("--archs", default=None, help=f"comma-separated architectures (default {','.join(ARCHITECTURES)})")
    p.add_argument("--seeds", type=int, default=None, help="number of evaluation seeds (default 10)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs per run (default 1000)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 0.001)")
    p.add_argument("--method", default=None, help="method label for the CSV (default: from report.json, else sgdd)")
    p.add_argument("--metrics", default=None, help="metrics CSV to append to (default OUT/metrics.csv)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for (arch, seed) runs (default 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectral", help="LED profiles and shift coefficient", description="Compare two graphs spectrally.")
    _common(p, "output directory (receives spectral.json)")
    p.add_argument("--a", required=True, help="first graph file (or condensed output directory)")
    p.add_argument("--b", required=True, help="second graph file (or condensed output directory)")
    p.add_argument("--mode", choices=MODES, default=None, help="KDE input: scaled (default), led or eigenvalue")
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("baseline", help="build a baseline condensed graph", description="Coreset and feature-similarity baselines.")
    _common(p, "output directory (condensed graph, report, timing, config echo)")
    p.add_argument("--graph", required=True, help="original graph (.graph.json)")
    p.add_argument("--method", choices=BASELINES, default=None, help="baseline method (default random)")
    p.add_argument("--ratio", type=float, default=None, help="condensing ratio N'/N (default 0.1)")
    p.set_defaults(func=cmd_baseline)
    return parser


def _fail(category: str, code: int, message: str) -> int:
    line = json.dumps({"error": category, "exit": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except NumericalError as exc:
        return _fail(exc.category, EXIT_NUMERICAL, str(exc))
    except SgddError as exc:
        return _fail(exc.category, EXIT_CONFIG, str(exc))
    except OSError as exc:
        return _fail("io", EXIT_IO, f"{exc.strerror or exc}: {exc.filename or ''}")
    except FloatingPointError as exc:
        return _fail("numerical", EXIT_NUMERICAL, str(exc))


if __name__ == "__main__":
    sys.exit(main())
