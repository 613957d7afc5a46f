"""Command line front end: ``kamreduce COMMAND --config run.yaml``.

The config is YAML.  Matrices are inline row-major nested lists, ``omega`` is a
list of decimals or the name ``golden`` for ``(1, (sqrt 5 - 1)/2)``.  Any key
left out takes the default in :data:`DEFAULTS`; the resolved config is written
into every report, so a report alone is enough to rerun it.

Example::

    omega: golden
    system:
      A: [[0, -1.3], [1.3, 0]]
      F:
        - {m: [1, 0], cos: [[0.3, 1.0], [0.5, -0.3]]}
      F_norm: 1.0e-5          # rescale F so that |F|_{r} equals this
    schedule: {j_max: 8, target: 1.0e-12}

Schrodinger runs replace ``system`` by ``schrodinger``::

    schrodinger:
      lambda: 4.0
      V: [{m: [1, 0], cos: 2.0e-3}, {m: [0, 1], cos: 2.0e-3}]
      grid: {start: 0.0, stop: 3.0, num: 200}

Exit status is 0 on success whatever the verdict, 2 for a bad config and 1
for any other error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import torus_fourier as tf
from .cocycle import CocycleSystem, lyapunov_exponent, rotation_number
from .diophantine import GOLDEN, DiophantineParams, classify_rotation_number
from .driver import DriverOptions, _json_default, almost_reduce, find_k1, lemma_num_check
from .kam_step import StepParams, kam_step
from .schrodinger import SchrodingerSystem, potential, reduce_schrodinger, sweep, worker_count
from .smoothing import SmoothingKernel, decay_class_corpus, suite_report
from .torus_fourier import TorusMap

log = logging.getLogger("kamreduce")

COMMANDS = ("reduce", "rotnum", "sweep", "smooth-test", "lemma-check", "step-probe")
EMITS = ("json", "csv", "both")

DEFAULTS = {
    "command": None,
    "mode": "adaptive",
    "seed": 0,
    "emit": "both",
    "omega": "golden",
    "dioph": {"kappa": 0.5, "tau": 1.0},
    "schedule": {"C": 0.5, "D": 10, "k": 10, "j_max": 8, "target": 1e-12, "gate": None,
                 "gate_factor": 1e-3, "c_band": 2.0, "residual_grid": 64},
    "system": None,
    "schrodinger": None,
    "rotnum": {"T": 2000.0},
    "sweep": {"T": 2000.0, "reduce": True, "plateau_tol": 1e-4, "le_floor": 5e-3,
              "label_tol": 1e-4, "N_label": 20},
    "smooth": {"k": 10, "J": 40, "functions": 5},
    "lemma": {"C": 0.5, "D": 10, "k": 4, "j_max": 10000, "search": True, "k_max": 5000},
    "step_probe": {"eps": [1e-4, 1e-5, 1e-6], "r": 0.5, "r2": 0.25, "modes": 3, "beta": 1.3},
}


class ConfigError(ValueError):
    pass


# -- config ---------------------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if isinstance(out.get(key), dict) and isinstance(val, dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return raw


def resolve_config(raw, command=None, mode=None, jmax=None, seed=None, emit=None):
    """Defaults, then the file, then command-line overrides."""
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    if command is not None:
        cfg["command"] = command
    if mode is not None:
        cfg["mode"] = mode
    if jmax is not None:
        cfg["schedule"]["j_max"] = jmax
    if seed is not None:
        cfg["seed"] = seed
    if emit is not None:
        cfg["emit"] = emit
    if cfg["command"] not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}")
    if cfg["mode"] not in ("paper", "adaptive"):
        raise ConfigError("mode must be paper or adaptive")
    if cfg["emit"] not in EMITS:
        raise ConfigError(f"emit must be one of {EMITS}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    cfg["omega"] = list(parse_omega(cfg["omega"]))
    return cfg


def parse_omega(spec):
    if isinstance(spec, str):
        if spec.lower() in ("golden", "golden_mean"):
            return (1.0, float(GOLDEN))
        raise ConfigError(f"unknown frequency shortcut {spec!r}")
    try:
        om = tuple(float(x) for x in spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError("omega must be a list of numbers or 'golden'") from exc
    if not om:
        raise ConfigError("omega is empty")
    return om


def _matrix(x, n=None):
    try:
        M = np.array(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad matrix {x!r}") from exc
    if M.ndim == 0 and n == 1:
        M = M.reshape(1, 1)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or (n is not None and M.shape[0] != n):
        raise ConfigError(f"expected a square{'' if n is None else f' {n}x{n}'} matrix, got {x!r}")
    return M


def _terms(spec, d, n):
    terms = []
    for t in spec or []:
        if not isinstance(t, dict) or "m" not in t:
            raise ConfigError("each Fourier term needs 'm' and 'cos' and/or 'sin'")
        m = tuple(int(v) for v in t["m"])
        if len(m) != d:
            raise ConfigError(f"mode {m} does not match dimension {d}")
        c = None if t.get("cos") is None else _matrix(t["cos"], n)
        s = None if t.get("sin") is None else _matrix(t["sin"], n)
        terms.append((m, c, s))
    return terms


def build_system(cfg):
    """``(A, F)`` from the ``system`` block."""
    spec = cfg["system"]
    if not spec or "A" not in spec:
        raise ConfigError("this command needs a 'system' block with A")
    A = _matrix(spec["A"])
    d, n = len(cfg["omega"]), A.shape[0]
    terms = _terms(spec.get("F"), d, n)
    F = TorusMap.trig(terms, d, n) if terms else TorusMap.zeros(d, n, target="sl(2,R)")
    if spec.get("F_norm") is not None and np.any(F.coeffs):
        F = F * (float(spec["F_norm"]) / tf.analytic_norm(F, float(spec.get("F_norm_r", 0.5))))
    return A, F


def build_potential(cfg):
    spec = cfg["schrodinger"]
    if not spec:
        raise ConfigError("this command needs a 'schrodinger' block")
    d = len(cfg["omega"])
    terms = []
    for t in spec.get("V") or []:
        if not isinstance(t, dict) or "m" not in t:
            raise ConfigError("each potential term needs 'm' and 'cos' and/or 'sin'")
        m = tuple(int(v) for v in t["m"])
        if len(m) != d:
            raise ConfigError(f"mode {m} does not match dimension {d}")
        terms.append((m, t.get("cos"), t.get("sin")))
    if not terms:
        return TorusMap.zeros(d, 1, target="gl(n,R)")
    return potential(terms, d)


def energies(cfg):
    spec = cfg["schrodinger"]
    if spec.get("grid") is not None:
        g = spec["grid"]
        return [float(x) for x in np.linspace(float(g["start"]), float(g["stop"]), int(g["num"]))]
    if spec.get("lambdas") is not None:
        return [float(x) for x in spec["lambdas"]]
    if spec.get("lambda") is not None:
        return [float(spec["lambda"])]
    raise ConfigError("schrodinger block needs lambda, lambdas or grid")


def driver_options(cfg):
    s = cfg["schedule"]
    dio = DiophantineParams(float(cfg["dioph"]["kappa"]), float(cfg["dioph"]["tau"]))
    return DriverOptions(mode=cfg["mode"], j_max=int(s["j_max"]), target=float(s["target"]),
                         dioph=dio, C=float(s["C"]), D=int(s["D"]), k=int(s["k"]),
                         kernel=SmoothingKernel(float(s["c_band"])), gate=s["gate"],
                         residual_grid=int(s["residual_grid"]), gate_factor=float(s["gate_factor"]))


# -- commands -------------------------------------------------------------------------
# each returns (json record, {csv name: (header, rows)})

def _reduce(cfg):
    opts = driver_options(cfg)
    om = tuple(cfg["omega"])
    if cfg["schrodinger"]:
        lams = energies(cfg)
        if len(lams) != 1:
            raise ConfigError("reduce takes a single lambda")
        out = reduce_schrodinger(build_potential(cfg), lams[0], om, opts,
                                 rho_T=float(cfg["rotnum"]["T"]))
        rep, rec = out.report, out.to_record()
    else:
        A, F = build_system(cfg)
        rep = almost_reduce(A, F, om, opts)
        rec = {"reduction": rep.to_record()}
    rows = [[s.j, s.fbar_norm, s.cauchy_gauge, " ".join(repr(float(x)) for x in s.M), s.kappa_j]
            for s in rep.steps]
    return rec, {"steps": (["j", "fbar_norm", "cauchy_gauge", "M", "kappa_j"], rows)}


def _rotnum(cfg):
    T = float(cfg["rotnum"]["T"])
    om = tuple(cfg["omega"])
    dio = cfg["dioph"]
    rows, recs = [], []

    def add(lam, coc):
        rho = rotation_number(coc, T=T)
        le = lyapunov_exponent(coc, T=T)
        cls = classify_rotation_number(rho.value, om, float(dio["tau"]))
        recs.append({"lambda": lam, "rotation": rho.to_record(), "lyapunov": le,
                     "classification": cls.to_record()})
        rows.append(["" if lam is None else lam, rho.value, rho.error_bound, le, cls.verdict])

    if cfg["schrodinger"]:
        V = build_potential(cfg)
        for lam in energies(cfg):
            add(lam, SchrodingerSystem(V, lam, om).plain())
    else:
        A, F = build_system(cfg)
        add(None, CocycleSystem(A, F, om))
    return {"rows": recs}, {"rotnum": (["lambda", "rho", "rho_err", "lyapunov", "class"], rows)}


def _sweep(cfg):
    s = cfg["sweep"]
    tab = sweep(build_potential(cfg), energies(cfg), tuple(cfg["omega"]), T=float(s["T"]),
                reduce=bool(s["reduce"]), opts=driver_options(cfg),
                plateau_tol=float(s["plateau_tol"]), le_floor=float(s["le_floor"]),
                label_tol=float(s["label_tol"]), N_label=int(s["N_label"]))
    rec = tab.to_records()
    rec["monotone"] = tab.monotone()
    rows = [[r.lam, r.rho, r.rho_err, r.lyapunov, r.verdict,
             "" if r.gap_label is None else " ".join(map(str, r.gap_label))] for r in tab.rows]
    return rec, {"sweep": (["lambda", "rho", "rho_err", "lyapunov", "verdict", "gap_label"], rows)}


def _smooth_test(cfg):
    s = cfg["smooth"]
    k, J = int(s["k"]), int(s["J"])
    kernel = SmoothingKernel(float(cfg["schedule"]["c_band"]))
    corpus = decay_class_corpus(seed=cfg["seed"], k=k)[: int(s["functions"])]
    recs, rows = [], []
    for i, F in enumerate(corpus):
        rep = suite_report(F, k, J, kernel)
        recs.append({"function": i, "norm_k": rep.norm_k, "constant": rep.constant,
                     "drift": rep.drift, "rows": rep.to_records()})
        for r in rep.to_records():
            rows.append([i] + [r[key] for key in ("j", "approx_err", "strip_norm", "step_norm",
                                                  "c_strip", "c_step", "c_running")])
    header = ["function", "j", "approx_err", "strip_norm", "step_norm", "c_strip", "c_step",
              "c_running"]
    return {"functions": recs}, {"smooth": (header, rows)}


def _lemma_check(cfg):
    s = cfg["lemma"]
    C, D, jm = float(s["C"]), int(s["D"]), int(s["j_max"])
    chk = lemma_num_check(C, D, int(s["k"]), jm)
    rec = {"check": chk.to_record()}
    rows = [[chk.k, chk.j_max, chk.holds, "" if chk.first_violation is None else chk.first_violation,
             chk.worst_margin]]
    if s["search"]:
        res = find_k1(C, D, jm, k_max=int(s["k_max"]))
        rec["search"] = res
        if res["k1"] is not None:
            top = lemma_num_check(C, D, res["k1"], jm)
            rows.append([top.k, top.j_max, top.holds, "", top.worst_margin])
    return rec, {"lemma": (["k", "j_max", "holds", "first_violation", "worst_margin"], rows)}


def _probe_perturbation(rng, d, modes):
    terms = []
    for m in _half_space_modes(d, modes):
        C = rng.normal(size=(2, 2))
        C[1, 1] = -C[0, 0]
        terms.append((m, C, None))
    return TorusMap.trig(terms, d, 2)


def _half_space_modes(d, count):
    """The first ``count`` nonzero modes of the half space in |m|_1 order."""
    out, N = [], 1
    while len(out) < count:
        for m in np.ndindex(*(2 * N + 1,) * d):
            m = tuple(int(x) - N for x in m)
            if sum(map(abs, m)) == N and next((x for x in m if x), 0) > 0:
                out.append(m)
        N += 1
    return out[:count]


def _step_probe(cfg):
    s = cfg["step_probe"]
    om = tuple(cfg["omega"])
    d = len(om)
    sched = cfg["schedule"]
    dio = DiophantineParams(float(cfg["dioph"]["kappa"]), float(cfg["dioph"]["tau"]))
    params = StepParams(float(s["r"]), float(s["r2"]), dio, C=float(sched["C"]), D=int(sched["D"]),
                        gate=sched["gate"] or ("paper" if cfg["mode"] == "paper" else "practical"),
                        kappa_mode="paper" if cfg["mode"] == "paper" else "adaptive",
                        gate_factor=float(sched["gate_factor"]))
    if cfg["system"]:
        A, F0 = build_system(cfg)
    else:
        beta = float(s["beta"])
        A = np.array([[0.0, -beta], [beta, 0.0]])
        F0 = _probe_perturbation(np.random.default_rng(cfg["seed"]), d, int(s["modes"]))
    base = tf.analytic_norm(F0, params.r)
    if base == 0:
        raise ConfigError("step-probe needs a nonzero perturbation")
    recs, rows = [], []
    for eps in s["eps"]:
        F = F0 * (float(eps) / base)
        Abar = TorusMap.constant(A, d, 1, F.target)
        Psi = TorusMap.identity(d, A.shape[0], target=F.target)
        res = kam_step(Abar, F, Psi, A, params, om, int(sched["residual_grid"]))
        recs.append(res.to_record())
        rows.append([res.eps_in, res.eps_out, res.residual,
                     "" if res.resonance is None else " ".join(map(str, res.resonance.m))])
    eps_in = np.array([r[0] for r in rows])
    eps_out = np.array([r[1] for r in rows])
    fit = None
    if len(rows) >= 2 and np.all(eps_out > 0):
        fit = float(np.polyfit(np.log(eps_in), np.log(eps_out), 1)[0])
    return ({"steps": recs, "decay_exponent": fit},
            {"step_probe": (["eps_in", "eps_out", "residual", "resonance"], rows)})


RUNNERS = {"reduce": _reduce, "rotnum": _rotnum, "sweep": _sweep, "smooth-test": _smooth_test,
           "lemma-check": _lemma_check, "step-probe": _step_probe}


# -- output ---------------------------------------------------------------------------

def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_outputs(cfg, record, tables, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = cfg["command"].replace("-", "_")
    written = []
    if cfg["emit"] in ("json", "both"):
        doc = {"command": cfg["command"], "config": cfg, "result": record}
        path = out_dir / f"{name}.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n")
        written.append(path)
    if cfg["emit"] in ("csv", "both"):
        for tname, (header, rows) in tables.items():
            path = out_dir / f"{tname}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows([[_cell(x) for x in row] for row in rows])
            written.append(path)
    return written


def run_config(cfg, out_dir):
    """Run a resolved config and write its reports; returns ``(record, paths)``."""
    record, tables = RUNNERS[cfg["command"]](cfg)
    return record, write_outputs(cfg, record, tables, out_dir)


def build_parser():
    p = argparse.ArgumentParser(prog="kamreduce", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS, nargs="?",
                   help="command to run (overrides 'command' in the config)")
    p.add_argument("--config", type=str, help="YAML run configuration")
    p.add_argument("--out", type=str, default="kamreduce-out", help="output directory")
    p.add_argument("--mode", choices=("paper", "adaptive"),
                   help="literal step constants and gate, or desk-scale adaptive ones")
    p.add_argument("--jmax", type=int, help="maximum number of iteration steps")
    p.add_argument("--seed", type=int, help="seed for randomized corpora")
    p.add_argument("--emit", choices=EMITS, help="report formats to write")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        raw = load_config(args.config) if args.config else {}
        cfg = resolve_config(raw, args.command, args.mode, args.jmax, args.seed, args.emit)
        log.info("running %s with %d worker(s)", cfg["command"], worker_count())
        record, paths = run_config(cfg, args.out)
    except ConfigError as exc:
        print(f"kamreduce: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, nonzero exit
        print(f"kamreduce: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    verdict = record.get("reduction", {}).get("verdict", {}).get("verdict")
    for path in paths:
        print(path)
    if verdict:
        print(f"verdict: {verdict}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
