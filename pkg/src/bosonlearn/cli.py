"""Command-line entry point: ``bosonlearn {simulate,learn,verify,plot}``.

Every run writes into its output directory a ``manifest.json`` with the
resolved configuration, its hash, the seed and library versions, plus the
command's JSON/CSV/SVG outputs.

Exit codes: 0 success, 1 a verification check failed, 2 invalid usage or
configuration, 3 a pipeline stage failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__

log = logging.getLogger("bosonlearn")

THREADS_ENV = "BOSONLEARN_THREADS"
CHECKS = ("moments", "lr", "trotter", "norms", "sobolev")
TOP_KEYS = {"model", "simulate", "learn", "verify", "seed", "out"}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# -- configuration ---------------------------------------------------------------------


def load_config(path) -> dict:
    """Read a YAML config; relative file references resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = doc.get("model")
    if isinstance(model, dict) and "file" in model:
        f = Path(model["file"])
        model["file"] = str(f if f.is_absolute() else path.parent / f)
    return doc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _complex(x) -> complex:
    if isinstance(x, (list, tuple)):
        if len(x) != 2:
            raise ConfigError(f"complex value must be [re, im], got {x}")
        return complex(float(x[0]), float(x[1]))
    return complex(x)


def _vertex(v):
    return tuple(v) if isinstance(v, list) else v


def build_graph(doc: dict):
    from .lattice import chain_graph, grid_graph

    if "chain" in doc:
        return chain_graph(int(doc["chain"]))
    if "grid" in doc:
        nx_, ny_ = doc["grid"]
        return grid_graph(int(nx_), int(ny_))
    raise ConfigError("graph needs 'chain: n' or 'grid: [nx, ny]'")


def build_model(doc: dict | None):
    """``(HamiltonianSpec, DissipatorSpec or None)`` from a model section.

    Either ``file`` (a JSON spec document) or ``graph`` + ``d`` +
    ``hamiltonian`` (+ optional ``dissipation``).
    """
    from .lattice import (
        DissipatorSpec,
        EdgeCoefficients,
        HamiltonianSpec,
        load_spec,
        random_hamiltonian,
        single_term_hamiltonian,
    )
    from .verify import pumping_hamiltonian, uniform_magnitude_hamiltonian

    if not isinstance(doc, dict):
        raise ConfigError("missing 'model' section")
    if "file" in doc:
        f = Path(doc["file"])
        if not f.is_file():
            raise ConfigError(f"model file not found: {f}")
        try:
            spec, dspec = load_spec(f.read_text())
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid model file {f}: {exc}") from exc
    else:
        for key in ("graph", "d", "hamiltonian"):
            if key not in doc:
                raise ConfigError(f"model section needs '{key}' (or 'file')")
        g = build_graph(doc["graph"])
        d = int(doc["d"])
        h = doc["hamiltonian"]
        kind = h.get("type")
        try:
            if kind == "random":
                spec = random_hamiltonian(g, d, float(h["L"]), int(h.get("seed", 0)))
            elif kind == "uniform":
                spec = uniform_magnitude_hamiltonian(g, d, float(h["L"]), int(h.get("seed", 0)))
            elif kind == "single":
                entries = {tuple(int(x) for x in r[:4]): _complex(r[4:6]) for r in h["entries"]}
                spec = single_term_hamiltonian(g, d, entries)
            elif kind == "pumping":
                spec = pumping_hamiltonian(g, d, float(h["strength"]))
            elif kind == "zero":
                spec = HamiltonianSpec(g, {e: EdgeCoefficients.zeros(d) for e in g.edges}, d, 0.0)
            else:
                raise ConfigError(f"unknown hamiltonian type {kind!r}")
        except KeyError as exc:
            raise ConfigError(f"hamiltonian of type {kind!r} needs {exc}") from exc
        dspec = None
        if doc.get("dissipation") is not None:
            ds = doc["dissipation"]
            if "alpha_all" in ds:
                alpha = {v: _complex(ds["alpha_all"]) for v in g.vertices}
            else:
                alpha = {_vertex(r[0]): _complex(r[1:3]) for r in ds.get("alpha", [])}
            dspec = DissipatorSpec(int(ds["p"]), alpha)
    return spec, dspec


# -- run directory ---------------------------------------------------------------------


def _versions() -> dict:
    import matplotlib
    import networkx
    import scipy

    return {
        "bosonlearn": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "networkx": networkx.__version__,
        "matplotlib": matplotlib.__version__,
        "pyyaml": yaml.__version__,
    }


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, seed: int, threads: int | None, extra=None):
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "threads": threads,
        "versions": _versions(),
    }
    doc.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _dump(path: Path, doc):
    from .learner import _json_default

    path.write_text(json.dumps(doc, indent=2, default=_json_default))


# -- commands --------------------------------------------------------------------------


def cmd_simulate(cfg: dict, seed: int, out: Path) -> dict:
    """Evolve one measurement setting, dump edge observables and shot samples.

    ``simulate`` keys: ``t``, ``shots``, ``cutoff``, ``alpha`` ([a_u, a_v] as
    [re, im] pairs), optional ``edges`` (default: first edge-disjoint group).
    """
    from .measurement import MeasurementPlan, Simulator, partition_edges, run_shots

    spec, dspec = build_model(cfg.get("model"))
    sc = cfg.get("simulate") or {}
    try:
        t = float(sc.get("t", 0.0))
        shots = int(sc.get("shots", 100))
        cutoff = int(sc["cutoff"])
    except KeyError as exc:
        raise ConfigError(f"simulate section needs {exc}") from exc
    p = dspec.p if dspec is not None else int(sc.get("p", 2 * spec.d + 2))
    edges = sc.get("edges")
    if edges is None:
        edges = partition_edges(spec.graph, "edge-disjoint")[0]
    edges = tuple(tuple(_vertex(v) for v in e) for e in edges)
    for e in edges:
        if e not in spec.graph.edges:
            raise ConfigError(f"edge {e} not in the graph")
    alpha = tuple(_complex(a) for a in sc.get("alpha", [0.0, 0.0]))
    plan = MeasurementPlan(edges=edges, alpha=alpha, t=t, shots=shots, seed=seed)
    sim = Simulator(spec, p, cutoff)
    init = MeasurementPlan(edges=edges, alpha=alpha, t=0.0, shots=1, seed=seed)
    rows = []
    for label, pl in (("input", init), ("final", plan)):
        states = sim.reduced_states(pl)
        for e, rho in states.items():
            rows.append({"state": label, "t": pl.t, "edge": list(e), **_edge_observables(rho, cutoff)})
    batch = run_shots(plan, sim)
    batch.to_csv(out / "samples.csv")
    _dump(out / "observables.json", {"observables": rows, "shots": shots, "edges": [list(e) for e in edges]})
    return {"rows": len(batch)}


def _edge_observables(rho, cutoff):
    from .fock import TruncationSpec, annihilation_op

    a = annihilation_op(TruncationSpec(cutoff))
    eye = np.eye(cutoff + 1)
    out = {}
    for name, op in (("i", np.kron(a, eye)), ("j", np.kron(eye, a))):
        m = complex(np.trace(rho @ op))
        out[f"mean_a_{name}"] = [m.real, m.imag]
        out[f"n_{name}"] = float(np.trace(rho @ op.conj().T @ op).real)
    return out


def cmd_learn(cfg: dict, seed: int, out: Path) -> dict:
    """Run the end-to-end learner; writes ``report.json`` and ``summary.csv``.

    ``learn`` keys: ``protocol``, ``eps``, ``delta``, optional ``shots``,
    ``noiseless``, ``sim_cutoff``, ``max_total_shots`` and ``plan`` (extra
    plan keywords).
    """
    from .learner import LearnReport, end_to_end

    spec, _ = build_model(cfg.get("model"))
    lc = cfg.get("learn")
    if not isinstance(lc, dict):
        raise ConfigError("missing 'learn' section")
    protocol = lc.get("protocol", "vanilla")
    if protocol not in ("vanilla", "refined"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    try:
        eps, delta = float(lc["eps"]), float(lc["delta"])
    except KeyError as exc:
        raise ConfigError(f"learn section needs {exc}") from exc
    rep = end_to_end(
        protocol,
        spec,
        eps,
        delta,
        seed=seed,
        sim_cutoff=lc.get("sim_cutoff"),
        shots=lc.get("shots"),
        max_total_shots=float(lc.get("max_total_shots", 1e9)),
        truth=spec,
        noiseless=bool(lc.get("noiseless", False)),
        **(lc.get("plan") or {}),
    )
    rep.to_json(out / "report.json", spec)
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LearnReport.CSV_FIELDS)
        w.writeheader()
        w.writerow(rep.csv_row())
    digest = hashlib.sha256(np.concatenate([c.lam.ravel() for c in rep.estimate.lam.values()]).tobytes()).hexdigest()
    return {"max_error": rep.max_error, "success": rep.success, "estimate_hash": digest}


def _section(vc: dict, name: str) -> dict:
    s = vc.get(name)
    return dict(s) if isinstance(s, dict) else {}


def run_check(name: str, vc: dict):
    """Run one named check from the ``verify`` section; returns ``(SweepResult, passed)``."""
    from . import verify as V
    from .lattice import DissipatorSpec, chain_graph, random_hamiltonian

    s = _section(vc, name)
    model = s.pop("model", None)
    if name == "moments":
        if model is not None:
            spec, dspec = build_model(model)
        else:
            spec = V.pumping_hamiltonian(chain_graph(2), 1, 1.0)
            dspec = DissipatorSpec(6, {0: 0.5, 1: 0.5})
        dissipation = bool(s.pop("dissipation", True))
        times = np.linspace(0.0, float(s.pop("t_max", 2.0)), int(s.pop("n_times", 9)))
        regions = [tuple(_vertex(v) for v in R) for R in s.pop("regions", [[0], [0, 1]])]
        k = int(s.pop("k", 2))
        cutoff = int(s.pop("cutoff", 6))
        cutoff_free = int(s.pop("cutoff_free", 60))
        alphas = dict(dspec.alpha) if dspec is not None else {}
        if dissipation:
            damped, free, ok = V.paired_moment_check(spec, dspec, k, times, regions, cutoff, cutoff_free, alphas, **s)
            damped.details["rates_without_dissipation"] = free.measured
            return damped, ok
        r = V.check_moment_stability(spec, None, k, times, regions, cutoff_free, alphas, **s)
        return r, r.passed
    if name == "lr":
        if model is not None:
            spec, dspec = build_model(model)
        else:
            g = chain_graph(6)
            spec = random_hamiltonian(g, 1, 0.3, 5)
            dspec = DissipatorSpec(4, {v: 0.4 for v in g.vertices})
        edge = tuple(_vertex(v) for v in s.pop("edge", [2, 3]))
        r = V.check_lr_decay(
            spec,
            dspec,
            edge,
            s.pop("radii", [0, 1, 2]),
            s.pop("levels", [1, 2, 3]),
            float(s.pop("t", 1.0)),
            int(s.pop("cutoff", 3)),
            **s,
        )
        return r, r.passed
    if name == "trotter":
        if model is not None:
            spec, dspec = build_model(model)
        else:
            spec = random_hamiltonian(chain_graph(2), 1, 0.5, 1)
            dspec = DissipatorSpec(4, {0: 0.4, 1: 0.2j})
        r = V.check_trotter_rate(spec, dspec, float(s.pop("t", 1.0)), s.pop("ns", [1, 2, 4, 8, 16]), int(s.pop("cutoff", 5)))
        return r, r.passed
    if name == "norms":
        Ms = s.get("M", list(range(2, 13)))
        parts = []
        for d in s.get("d", [1, 2]):
            spec = V.uniform_magnitude_hamiltonian(chain_graph(2), int(d), float(s.get("L", 0.7)), int(s.get("seed", 0)))
            for p in s.get("p", [1, 2, 3, 4]):
                alpha = {0: _complex(s.get("alpha", [0.8, 0.0])), 1: _complex(s.get("alpha2", [0.0, 0.3]))}
                parts.append((d, p, V.check_norm_bounds(spec, DissipatorSpec(int(p), alpha), Ms)))
        r = V.SweepResult(
            "norms",
            "M",
            [v for _, _, q in parts for v in q.values],
            np.concatenate([q.measured for _, _, q in parts]),
            np.concatenate([q.bound for _, _, q in parts]),
            all(q.passed for _, _, q in parts),
            labels=[f"d{d}_p{p}_{lab}" for d, p, q in parts for lab in q.labels],
            details={"max_ratio": max(q.details["max_ratio"] for _, _, q in parts)},
        )
        return r, r.passed
    if name == "sobolev":
        r = V.check_coherent_sobolev(
            s.get("alphas", [0.0, 0.1, 0.5, 1.0, 1.5, 2.0]),
            s.get("ks", [1, 2, 3, 4, 6, 8]),
            s.get("cutoff"),
            s.get("form", "valid"),
        )
        return r, r.passed
    raise ConfigError(f"unknown check {name!r}")


def cmd_verify(which: str, cfg: dict, out: Path) -> bool:
    """Run checks, write ``<check>.csv`` plus ``verify.json``; returns overall pass."""
    vc = cfg.get("verify") or {}
    if not isinstance(vc, dict):
        raise ConfigError("'verify' section must be a mapping")
    names = CHECKS if which == "all" else (which,)
    summary, ok_all = {}, True
    for name in names:
        res, ok = run_check(name, vc)
        res.to_csv(out / f"{name}.csv")
        summary[name] = {**res.to_dict(), "passed": bool(ok)}
        ok_all &= ok
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    _dump(out / "verify.json", {"passed": ok_all, "checks": summary})
    return ok_all


def lr_figure(rows):
    """Localized-versus-full error against radius on a log axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots()
    # exact zeros (whole-system rectangle) cannot sit on a log axis
    rad = [(float(r["radius"]), float(r["error"])) for r in rows if r["sweep"] == "radius" and float(r["error"]) > 0]
    if rad:
        ax.plot(*zip(*rad), "o-", label="error vs radius")
    ax.set_yscale("log")
    ax.set_xlabel("rectangle radius")
    ax.set_ylabel("trace-norm error")
    ax.legend()
    return fig


def cmd_plot(run_dir) -> list:
    """Render SVG plots for every recognized output in ``run_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    if not any(run_dir.iterdir()):
        raise ConfigError(f"run directory is empty: {run_dir}")
    made = []

    def save(fig, name):
        path = run_dir / name
        fig.savefig(path, format="svg")
        plt.close(fig)
        made.append(path)

    reports = sorted(run_dir.glob("**/report.json"))
    pts = []
    for f in reports:
        doc = json.loads(f.read_text())
        if doc.get("max_error") is not None:
            pts.append((max(doc["total_shots"], 1), doc["max_error"], doc["eps"]))
    if pts:
        fig, ax = plt.subplots()
        x, y, eps = zip(*pts)
        ax.loglog(x, y, "o")
        ax.axhline(min(eps), ls="--", color="gray", label="eps")
        ax.set_xlabel("total shots")
        ax.set_ylabel("max coefficient error")
        ax.legend()
        save(fig, "error_vs_samples.svg")
    lr = run_dir / "lr_trace.csv"
    if lr.exists():
        save(lr_figure(list(csv.DictReader(lr.open()))), "lr.svg")
    tro = run_dir / "trotter.csv"
    if tro.exists():
        rows = list(csv.DictReader(tro.open()))
        fig, ax = plt.subplots()
        ax.loglog([float(r["n"]) for r in rows], [float(r["measured"]) for r in rows], "o-")
        ax.set_xlabel("Trotter steps n")
        ax.set_ylabel("trace-norm error")
        save(fig, "trotter.svg")
    mom = run_dir / "moments_trace.csv"
    if mom.exists():
        rows = list(csv.DictReader(mom.open()))
        fig, ax = plt.subplots()
        for reg in dict.fromkeys(r["region"] for r in rows):
            sel = [r for r in rows if r["region"] == reg]
            ax.plot([float(r["t"]) for r in sel], [float(r["moment"]) for r in sel], "o-", label=f"R={reg}")
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel("moment")
        ax.legend()
        save(fig, "moments.svg")
    if not made:
        raise ConfigError(f"nothing to plot in {run_dir}")
    return made


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bosonlearn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", type=Path, required=config_required, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--threads", type=int, help=f"BLAS threads (default: ${THREADS_ENV})")

    common(sub.add_parser("simulate", help="evolve and sample one setting"), True)
    common(sub.add_parser("learn", help="run a learning protocol end to end"), True)
    pv = sub.add_parser("verify", help="run numerical checks")
    common(pv, False)
    pv.add_argument("--check", choices=(*CHECKS, "all"), default="all")
    pp = sub.add_parser("plot", help="render SVG plots for a run directory")
    pp.add_argument("run_dir", type=Path)
    pp.add_argument("--threads", type=int)
    return ap


def _threads(arg) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .learner import StageError

    try:
        threads = _threads(args.threads)
        with threadpool_limits(limits=threads):
            if args.command == "plot":
                for path in cmd_plot(args.run_dir):
                    print(path)
                return 0
            cfg = load_config(args.config) if args.config else {}
            seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
            out = _prepare_out(args.out or cfg.get("out") or f"runs/{args.command}")
            cfg_used = {**cfg, "seed": seed}
            if args.command == "simulate":
                extra = cmd_simulate(cfg_used, seed, out)
                write_manifest(out, "simulate", cfg_used, seed, threads, {"result": extra})
                return 0
            if args.command == "learn":
                extra = cmd_learn(cfg_used, seed, out)
                write_manifest(out, "learn", cfg_used, seed, threads, {"result": extra})
                print(f"max_error={extra['max_error']} success={extra['success']}")
                return 0
            ok = cmd_verify(args.check, cfg_used, out)
            write_manifest(out, "verify", cfg_used, seed, threads, {"check": args.check, "passed": ok})
            return 0 if ok else 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
