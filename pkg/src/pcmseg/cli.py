"""``pcm-segment``: command-line entry point for the whole pipeline."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, potts
from .config import RunConfig
from .features import build_features, read_basis, read_features, write_basis, write_features
from .gridstats import grid_stats, make_grid, read_grid_stats, write_grid_stats
from .ingest import load_patterns, write_patterns
from .metrics import adjusted_rand_index
from .posterior import (relabel_chain, summarize_clusters, summarize_labels, write_clusters,
                        write_labels, write_occupancy)
from .sampler import Chain, McmcConfig, diagnostics, run_chains

log = logging.getLogger("pcmseg")

PROG = "pcm-segment"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--threads", type=int, help="worker processes for chains and studies")
    p.add_argument("--config", dest="config", help="JSON run configuration; flags override it")
    p.add_argument("--output-dir", dest="output_dir", help="directory for outputs and manifest")
    p.add_argument("--cache-dir", dest="cache_dir", help="surrogate cache directory")
    p.add_argument("--log-level", dest="log_level", default=argparse.SUPPRESS,
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def _mcmc_flags(p):
    p.add_argument("-M", "--clusters", dest="n_clusters", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--alpha-step", dest="alpha_step", type=float)
    p.add_argument("--psi-step", dest="psi_step", type=float)
    p.add_argument("--group-mode", dest="group_mode", action="store_true")
    p.add_argument("--fix-psi", dest="fix_psi", type=float)
    p.add_argument("--chains", type=int)
    p.add_argument("--normalizer", choices=["surrogate", "exact"])
    p.add_argument("--surrogate-sims", dest="surrogate_sims", type=int)
    p.add_argument("--surrogate-psi-nodes", dest="surrogate_psi_nodes", type=int)
    p.add_argument("--surrogate-seed", dest="surrogate_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = _Parser(prog=PROG, parents=[g], argument_default=argparse.SUPPRESS,
                     description="Potts clustering of gridded spatial point patterns.")
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    kw = dict(parents=[g], argument_default=argparse.SUPPRESS)

    p = sub.add_parser("grid-stats", help="grid, local intensities and processed PCFs", **kw)
    p.add_argument("--points")
    p.add_argument("--windows")
    p.add_argument("--types", dest="n_types", type=int)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--target-count", dest="target_mean_count", type=float)
    p.add_argument("--n-r", dest="n_r", type=int)

    p = sub.add_parser("features", help="PCA scores plus intensities, standardised", **kw)
    p.add_argument("--grid-stats", dest="grid_stats")
    p.add_argument("--variance-threshold", dest="variance_threshold", type=float)

    p = sub.add_parser("fit", help="run the MCMC sampler", **kw)
    p.add_argument("--features")
    p.add_argument("--basis")
    _mcmc_flags(p)

    p = sub.add_parser("select-m", help="increase M until a cluster empties", **kw)
    p.add_argument("--features")
    p.add_argument("--basis")
    p.add_argument("--m-min", dest="m_min", type=int)
    p.add_argument("--m-max", dest="m_max", type=int)
    _mcmc_flags(p)

    p = sub.add_parser("summarize", help="relabel a chain and write summaries", **kw)
    p.add_argument("--chain")
    p.add_argument("--basis")
    p.add_argument("--distances", type=float, nargs="+")

    p = sub.add_parser("simulate", help="generate a synthetic dataset with true labels", **kw)
    p.add_argument("-M", "--clusters", dest="n_clusters", type=int)
    p.add_argument("--psi", type=float)
    p.add_argument("--subjects", dest="n_subjects", type=int)
    p.add_argument("--regime", choices=["high", "low"])
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--types", dest="n_types", type=int)
    p.add_argument("--label-sweeps", dest="label_sweeps", type=int)

    p = sub.add_parser("baseline", help="run one comparison method", **kw)
    p.add_argument("--grid-stats", dest="grid_stats")
    p.add_argument("--method", choices=["FPCA-G", "FPCA-S", "Curve-G", "Curve-S",
                                        "nonspatial-PCM", "PCM"])
    p.add_argument("--variance-threshold", dest="variance_threshold", type=float)
    _mcmc_flags(p)

    p = sub.add_parser("ari", help="adjusted Rand index between two label files", **kw)
    p.add_argument("labels_a")
    p.add_argument("labels_b")
    p.add_argument("--per-subject", dest="per_subject", action="store_true")

    p = sub.add_parser("study", help="simulation study over scenarios and methods", **kw)
    p.add_argument("--study-clusters", dest="study_clusters", type=int, nargs="+")
    p.add_argument("--study-psi", dest="study_psi", type=float, nargs="+")
    p.add_argument("--study-regimes", dest="study_regimes", nargs="+", choices=["high", "low"])
    p.add_argument("--subjects", dest="n_subjects", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--methods", nargs="+")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    return parser


# --- helpers -------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"pcmseg": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def _require(cfg: RunConfig, *keys):
    for k in keys:
        if getattr(cfg, k) in (None, ""):
            raise UsageError(f"missing required option --{k.replace('_', '-')}")


def _mcmc(cfg: RunConfig, M: int | None = None) -> McmcConfig:
    return McmcConfig(n_clusters=M or cfg.n_clusters, iterations=cfg.iterations,
                      burn_in=cfg.burn_in, thin=cfg.thin, seed=cfg.seed,
                      alpha_step=cfg.alpha_step, psi_step=cfg.psi_step,
                      group_mode=cfg.group_mode, fix_psi=cfg.fix_psi)


def _design(cfg: RunConfig) -> potts.SurrogateDesign:
    return potts.SurrogateDesign(n_psi=cfg.surrogate_psi_nodes, n_sims=cfg.surrogate_sims,
                                 burn_in=cfg.surrogate_burn_in)


def _normalizer(cfg: RunConfig, grid, M: int):
    graph = potts.PottsGraph(grid.rows, grid.cols)
    if cfg.normalizer == "exact":
        if M ** graph.n_nodes <= potts.MAX_ENUMERATION:
            return potts.ExactNormalizer(graph, M)
        return potts.TransferNormalizer(graph, M)
    cache = cfg.cache_dir or str(Path(cfg.output_dir) / "surrogate-cache")
    return potts.cached_surrogate(graph, M, _design(cfg), cfg.surrogate_seed, cache)


def _load_features(cfg: RunConfig):
    _require(cfg, "features", "basis")
    basis, centers, scales = read_basis(cfg.basis)
    return read_features(cfg.features, centers=centers, scales=scales), basis


def write_region_labels(path, subject_ids, grid, labels) -> None:
    """Labels CSV with 1-based labels; empty where a region has none (negative input)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "region_row", "region_col", "label"])
        for n, sid in enumerate(subject_ids):
            for l in range(grid.n_regions):
                row, col = grid.region_rc(l)
                v = int(labels[n, l])
                w.writerow([sid, row, col, "" if v < 0 else v + 1])


def read_region_labels(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        col = "label" if "label" in (reader.fieldnames or []) else "map_label"
        if col not in (reader.fieldnames or []):
            raise ValueError(f"{path}: no label or map_label column")
        for rec in reader:
            key = (rec["subject_id"], int(rec["region_row"]), int(rec["region_col"]))
            out[key] = int(rec[col]) if rec[col] not in ("", None) else -1
    return out


# --- subcommands ----------------------------------------------------------------------


def cmd_grid_stats(cfg: RunConfig, out: Path):
    _require(cfg, "points", "windows", "n_types")
    patterns = load_patterns(cfg.points, cfg.n_types, windows_file=cfg.windows)
    grid = make_grid(patterns, cfg.target_mean_count, cfg.rows, cfg.cols)
    summaries = grid_stats(patterns, grid, cfg.n_types, cfg.n_r)
    path = out / "grid_stats.csv"
    write_grid_stats(path, summaries, grid, grid.r_grid(cfg.n_r))
    log.info("grid %dx%d, %d subjects", grid.rows, grid.cols, len(patterns))
    return [cfg.points, cfg.windows], [path]


def cmd_features(cfg: RunConfig, out: Path):
    _require(cfg, "grid_stats")
    summaries, grid, r_grid = read_grid_stats(cfg.grid_stats)
    fm, basis = build_features(summaries, grid, r_grid, cfg.variance_threshold)
    fpath, bpath = out / "features.csv", out / "basis.txt"
    write_features(fpath, fm)
    write_basis(bpath, basis, fm.centers, fm.scales)
    log.info("K = %d components explain %.3f of the variance", basis.n_components,
             basis.explained_fraction)
    return [cfg.grid_stats], [fpath, bpath]


def cmd_fit(cfg: RunConfig, out: Path):
    fm, _ = _load_features(cfg)
    normalizer = _normalizer(cfg, fm.grid, cfg.n_clusters)
    chains = run_chains(fm, _mcmc(cfg), normalizer, cfg.chains, cfg.threads)
    outputs, diag = [], {}
    for k, chain in enumerate(chains):
        path = out / ("chain.npz" if len(chains) == 1 else f"chain_{k + 1}.npz")
        chain.save(path)
        outputs.append(path)
        diag[path.name] = diagnostics(chain)
    if isinstance(normalizer, potts.SurrogateTable):
        diag["surrogate"] = {"cache_key": normalizer.cache_key()}
    dpath = out / "diagnostics.json"
    dpath.write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    return [cfg.features, cfg.basis], outputs + [dpath]


def cmd_select_m(cfg: RunConfig, out: Path):
    from .simbench import select_m

    fm, _ = _load_features(cfg)
    chosen, history = select_m(fm, _mcmc(cfg), cfg.m_min, cfg.m_max,
                               normalizer_for=lambda M: _normalizer(cfg, fm.grid, M))
    path = out / "select_m.json"
    path.write_text(json.dumps({"chosen": chosen, "history": history}, indent=2) + "\n")
    print(chosen)
    return [cfg.features, cfg.basis], [path]


def cmd_summarize(cfg: RunConfig, out: Path):
    _require(cfg, "chain", "basis")
    chain, _ = relabel_chain(Chain.load(cfg.chain))
    basis, centers, scales = read_basis(cfg.basis)
    labels = summarize_labels(chain)
    clusters = summarize_clusters(chain, basis, centers, scales, cfg.distances)
    lpath, opath = out / "labels.csv", out / "occupancy.csv"
    write_labels(lpath, chain, labels)
    write_occupancy(opath, labels)
    paths = [Path(p) for p in write_clusters(str(out) + "/", clusters)]
    return [cfg.chain, cfg.basis], [lpath, opath] + paths


def _scenario(cfg: RunConfig, **kw):
    from .simbench import ScenarioConfig

    base = dict(n_clusters=cfg.n_clusters, psi=cfg.psi, n_subjects=cfg.n_subjects,
                regime=cfg.regime, rows=cfg.rows or 10, cols=cfg.cols or 12,
                n_types=cfg.n_types or 2, seed=cfg.seed, label_sweeps=cfg.label_sweeps)
    base.update(kw)
    return ScenarioConfig(**base)


def cmd_simulate(cfg: RunConfig, out: Path):
    from .gridstats import explicit_grid
    from .simbench import generate_dataset

    scn = _scenario(cfg)
    patterns, truth = generate_dataset(scn)
    ppath, wpath, tpath = out / "points.csv", out / "windows.csv", out / "truth.csv"
    write_patterns(patterns, ppath, wpath)
    grid = explicit_grid(patterns[0].window, scn.rows, scn.cols)
    write_region_labels(tpath, [p.subject_id for p in patterns], grid, truth)
    return [], [ppath, wpath, tpath]


def cmd_baseline(cfg: RunConfig, out: Path):
    from .simbench import prepare_summaries, run_baseline

    _require(cfg, "grid_stats", "method")
    summaries, grid, r_grid = read_grid_stats(cfg.grid_stats)
    data = prepare_summaries(summaries, grid, r_grid, cfg.variance_threshold)
    normalizer = None
    if cfg.method.endswith("PCM"):
        normalizer = _normalizer(cfg, grid, cfg.n_clusters)
    labels = run_baseline(cfg.method, data, cfg.n_clusters, seed=cfg.seed, mcmc=_mcmc(cfg),
                          normalizer=normalizer)
    path = out / f"labels_{cfg.method}.csv"
    write_region_labels(path, data.features.subject_ids, grid, labels)
    return [cfg.grid_stats], [path]


def cmd_ari(cfg: RunConfig, out: Path, args):
    a, b = read_region_labels(args.labels_a), read_region_labels(args.labels_b)
    keys = sorted(set(a) & set(b))
    if len(keys) < 2:
        raise ValueError("label files share fewer than two regions")
    if getattr(args, "per_subject", False):
        subjects = sorted({k[0] for k in keys})
        vals = [adjusted_rand_index([a[k] for k in keys if k[0] == s],
                                    [b[k] for k in keys if k[0] == s]) for s in subjects]
        value = float(np.mean(vals))
    else:
        value = adjusted_rand_index([a[k] for k in keys], [b[k] for k in keys])
    print(repr(value))
    return [args.labels_a, args.labels_b], []


def cmd_study(cfg: RunConfig, out: Path):
    from .simbench import run_study, write_study

    scenarios = [_scenario(cfg, n_clusters=M, psi=psi, regime=reg)
                 for M in cfg.study_clusters for psi in cfg.study_psi
                 for reg in cfg.study_regimes]
    mcmc = McmcConfig(iterations=cfg.iterations, burn_in=cfg.burn_in, thin=cfg.thin,
                      alpha_step=cfg.alpha_step, psi_step=cfg.psi_step)
    cache = cfg.cache_dir or str(out / "surrogate-cache")
    rows = run_study(scenarios, cfg.methods, cfg.replications, mcmc, cfg.threads, cache)
    path = out / "study.csv"
    write_study(path, rows)
    return [], [path]


COMMANDS = {"grid-stats": cmd_grid_stats, "features": cmd_features, "fit": cmd_fit,
            "select-m": cmd_select_m, "summarize": cmd_summarize, "simulate": cmd_simulate,
            "baseline": cmd_baseline, "study": cmd_study}


# --- entry point ------------------------------------------------------------------------


def _effective_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    overrides = {k: v for k, v in vars(args).items() if k in RunConfig.keys() and k != "config"}
    if "rows" in overrides or "cols" in overrides:
        if "target_mean_count" in overrides:
            raise UsageError("conflicting grid options: give --rows/--cols or --target-count")
        if ("rows" in overrides) != ("cols" in overrides) and (cfg.rows is None or cfg.cols is None):
            raise UsageError("conflicting grid options: --rows and --cols go together")
    return cfg.merged(overrides)


def _write_manifest(out: Path, command: str, argv, cfg: RunConfig, inputs, outputs) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "versions": _versions(),
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "outputs": {str(Path(p).name): _sha256(p) for p in outputs},
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _fail(kind: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"{PROG}: error: {kind}: {text}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(args, "log_level", "WARNING"), stream=sys.stderr,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        cfg = _effective_config(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "ari":
            inputs, outputs = cmd_ari(cfg, out, args)
        else:
            inputs, outputs = COMMANDS[args.command](cfg, out)
        _write_manifest(out, args.command, argv, cfg, inputs, outputs)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except FileNotFoundError as exc:
        return _fail("missing-input", f"{exc.filename}: {exc.strerror}", 1)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
