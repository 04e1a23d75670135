"""Config-driven experiment runner.

Configs are INI files whose sections group keys by module; see
``opdefect list --schema``. Every run writes ``report.json`` and
``<experiment>_trace.csv`` (plus experiment-specific CSVs) to ``--out``.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import compress, dropout, gkpca, interpolate, telescope, treesplit
from .errors import ConfigError, ExperimentError, OpDefectError
from .hilbert import Projection, orthonormal_basis
from .rkhs import Kernel, RkhsFunction, gram, load_points_csv

EXPERIMENTS = ("telescope", "interpolate", "dropout", "treesplit", "compress", "gkpca")
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


@dataclass(frozen=True)
class Key:
    kind: str                 # int | float | str | matrix | floats
    default: object = None
    required: bool = False
    choices: tuple = ()
    help: str = ""


_COMMON = {
    "experiment": {
        "name": Key("str", required=True, choices=EXPERIMENTS, help="which experiment to run"),
        "field": Key("str", "real", choices=("real", "complex"), help="scalar field"),
    },
}
_RUN = {"seed": Key("int", help="master seed; required when anything is random"),
        "horizon": Key("int", help="number of steps (defaults to the number of samples)"),
        "trials": Key("int", 200, help="Monte Carlo trials")}
_KERNEL = {"kind": Key("str", "gaussian", choices=("gaussian", "linear", "polynomial")),
           "gamma": Key("float", 1.0), "degree": Key("int", 2), "c": Key("float", 1.0)}
_SCHEDULE = {"kind": Key("str", "one_over_n", choices=("constant", "one_over_n", "one_over_n_sq",
                                                       "custom_list")),
             "value": Key("float", 1.0, help="constant value or scale"),
             "values": Key("floats", help="explicit list for custom_list")}
_NOISE = {"sigma": Key("float", 0.0), "law": Key("str", "GaussianReal", choices=interpolate.NOISE_LAWS)}
_DATA = {"path": Key("str", help="CSV of points, one per row"),
         "n_points": Key("int", 50), "dim": Key("int", 2)}
_TREE = {"family": Key("str", "random", choices=("random", "isometric", "scaled", "explicit")),
         "channels": Key("matrix", help="explicit channel matrices (family = explicit)"),
         "angles": Key("floats", help="rotation angles for the scaled family"),
         "d": Key("int", 2), "dim": Key("int", 4), "c": Key("float", 0.8),
         "norm_cap": Key("float", 0.95), "depth": Key("int", 3)}

SCHEMA = {
    "telescope": {
        "telescope": {"dim": Key("int", 4), "steps": Key("int", 10), "rank": Key("int", 1),
                      "projections": Key("matrix", help="explicit list of projection matrices"),
                      "probes": Key("int", 3, help="number of random probe vectors"),
                      "probe": Key("matrix", help="explicit probe vector(s)")},
        "schedule": _SCHEDULE, "run": {"seed": _RUN["seed"]},
    },
    "interpolate": {
        "kernel": _KERNEL, "data": _DATA, "truth": {"n_anchors": Key("int", 5)},
        "schedule": _SCHEDULE, "noise": _NOISE, "run": _RUN,
    },
    "dropout": {
        "dropout": {"p": Key("float", required=True), "source": Key("str", "coordinate",
                                                                    choices=("coordinate", "rkhs")),
                    "lambda": Key("float", 1.0), "dim": Key("int", 2),
                    "support": Key("int", 6, help="support size for the rkhs source"),
                    "beta": Key("float", help="coercivity constant; estimated when omitted"),
                    "horizon": Key("int", 60), "trials": Key("int", 2000)},
        "kernel": _KERNEL, "run": {"seed": _RUN["seed"]},
    },
    "treesplit": {
        "tree": {**_TREE, "depth": Key("int", 6), "keep_depth": Key("int", 2)},
        "sample": {"n_points": Key("int", 10)}, "run": {"seed": _RUN["seed"]},
    },
    "compress": {
        "tree": _TREE, "sample": {"n_points": Key("int", 8)},
        "compress": {"budget": Key("int"), "tolerance": Key("float"),
                     "eps": Key("float", 0.1, help="stopping rule target")},
        "ridge": {"lambda": Key("float", 1.0)}, "run": {"seed": _RUN["seed"]},
    },
    "gkpca": {
        "kernel": _KERNEL, "data": _DATA,
        "gkpca": {"eps_admit": Key("float", required=True), "p": Key("int"), "theta": Key("float")},
        "truth": {"n_anchors": Key("int", 5)}, "schedule": _SCHEDULE, "noise": _NOISE, "run": _RUN,
    },
}


def schema_text(name: str | None = None) -> str:
    lines = []
    for exp in EXPERIMENTS if name is None else (name,):
        lines.append(f"{exp}:")
        for sec, keys in {**_COMMON, **SCHEMA[exp]}.items():
            for k, spec in keys.items():
                extra = " required" if spec.required else f" default={spec.default!r}"
                if spec.choices:
                    extra += f" choices={'|'.join(spec.choices)}"
                note = f"  # {spec.help}" if spec.help else ""
                lines.append(f"  {sec}.{k} ({spec.kind}){extra}{note}")
    return "\n".join(lines)


# ---------------------------------------------------------------- parsing


def _key_lines(text: str) -> dict:
    where, sec = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            sec = s[1:-1].strip()
            where.setdefault((sec, None), i)
        elif sec is not None and ("=" in s or ":" in s):
            key = s.split("=", 1)[0] if "=" in s else s.split(":", 1)[0]
            where.setdefault((sec, key.strip().lower()), i)
    return where


def _convert(raw: str, spec: Key, key: str, line):
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "floats":
            return [float(t) for t in raw.replace(",", " ").split()]
        if spec.kind == "matrix":
            return np.array(ast.literal_eval(raw))
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"cannot parse {raw!r} as {spec.kind}", key=key, line=line) from exc
    if spec.choices and raw not in spec.choices:
        raise ConfigError(f"{raw!r} not one of {', '.join(spec.choices)}", key=key, line=line)
    return raw


def parse_config(text: str) -> dict:
    """Strictly parse config text into ``{section: {key: value}}`` with defaults filled in."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", key=f"{exc.section}.{exc.option}", line=exc.lineno) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", key=exc.section, line=exc.lineno) from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}",
                          line=getattr(exc, "lineno", None)) from exc
    where = _key_lines(text)
    if not cp.has_option("experiment", "name"):
        raise ConfigError("missing required key", key="experiment.name")
    name = cp.get("experiment", "name").strip()
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}", key="experiment.name",
                          line=where.get(("experiment", "name")))
    schema = {**_COMMON, **SCHEMA[name]}
    out = {}
    for sec in cp.sections():
        if sec not in schema:
            raise ConfigError(f"unknown section for experiment {name!r}", key=sec,
                              line=where.get((sec, None)))
        for k in cp.options(sec):
            if k not in schema[sec]:
                raise ConfigError(f"unknown key for experiment {name!r}", key=f"{sec}.{k}",
                                  line=where.get((sec, k)))
    for sec, keys in schema.items():
        vals = {}
        for k, spec in keys.items():
            if cp.has_option(sec, k):
                vals[k] = _convert(cp.get(sec, k).strip(), spec, f"{sec}.{k}", where.get((sec, k)))
            elif spec.required:
                raise ConfigError("missing required key", key=f"{sec}.{k}")
            else:
                vals[k] = spec.default
        out[sec] = vals
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


# ---------------------------------------------------------------- helpers


class Checks:
    """Named identity checks with measured residuals."""

    def __init__(self):
        self.items = []

    def add(self, name: str, residual: float, tol: float):
        residual = float(residual)
        self.items.append({"name": name, "residual": residual, "tolerance": float(tol),
                           "passed": bool(residual <= tol)})

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.items)


def _seed(cfg, required=True):
    seed = cfg["run"]["seed"]
    if seed is None and required:
        raise ConfigError("missing required key for a stochastic experiment", key="run.seed")
    return seed


def _complex(cfg) -> bool:
    return cfg["experiment"]["field"] == "complex"


def _normal(rng, shape, cplx):
    z = rng.standard_normal(shape)
    return z + 1j * rng.standard_normal(shape) if cplx else z


def _kernel(cfg) -> Kernel:
    k = cfg["kernel"]
    return Kernel(k["kind"], gamma=k["gamma"], degree=k["degree"], c=k["c"])


def _schedule(cfg, n: int) -> telescope.Schedule:
    s = cfg["schedule"]
    try:
        return telescope.Schedule.make(s["kind"], n, value=s["value"], values=s["values"])
    except (ValueError, OpDefectError) as exc:
        raise ConfigError(str(exc), key="schedule.kind") from exc


def _points(cfg, rng) -> np.ndarray:
    d = cfg["data"]
    if d["path"]:
        return load_points_csv(d["path"])
    return rng.standard_normal((d["n_points"], d["dim"]))


def _truth(cfg, kernel, X, rng) -> RkhsFunction:
    n = cfg["truth"]["n_anchors"]
    anchors = X.mean(axis=0) + X.std(axis=0) * rng.standard_normal((n, X.shape[1]))
    return RkhsFunction(anchors, _normal(rng, n, _complex(cfg)), kernel)


def _horizon(cfg, n: int) -> int:
    h = cfg["run"]["horizon"]
    h = n if h is None else h
    if not 1 <= h <= n:
        raise ConfigError(f"horizon must lie in 1..{n}", key="run.horizon")
    return h


def _family(cfg, rng_seed: int) -> treesplit.ChannelFamily:
    t = cfg["tree"]
    if t["family"] == "explicit":
        if t["channels"] is None:
            raise ConfigError("family = explicit needs channels", key="tree.channels")
        try:
            return treesplit.make_family(np.asarray(t["channels"]))
        except (ValueError, OpDefectError) as exc:
            raise ConfigError(str(exc), key="tree.channels") from exc
    if t["family"] == "scaled":
        return treesplit.scaled_rotations(t["c"], t["d"], angles=t["angles"], dim=t["dim"])
    if t["family"] == "isometric":
        return treesplit.random_isometric(rng_seed, t["d"], t["dim"])
    return treesplit.random_contraction(rng_seed, t["d"], t["dim"], norm_cap=t["norm_cap"],
                                        complex_field=_complex(cfg))


def _fmt(x) -> str:
    return format(x, ".17g")


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in r) + "\n")


# ---------------------------------------------------------------- experiments


def _random_projection(rng, dim, rank, cplx):
    Q = orthonormal_basis(list(_normal(rng, (rank, dim), cplx)), dim)
    return Projection(Q @ np.conj(Q).T)


def run_telescope(cfg, out: Path, checks: Checks) -> dict:
    t = cfg["telescope"]
    explicit = t["projections"] is not None and t["probe"] is not None
    seed = _seed(cfg, required=not explicit)
    rng = np.random.default_rng(seed if seed is not None else 0)
    cplx = _complex(cfg)
    if t["projections"] is not None:
        mats = np.asarray(t["projections"])
        mats = mats[None] if mats.ndim == 2 else mats
        try:
            projs = [Projection(m) for m in mats]
        except OpDefectError as exc:
            raise ConfigError(str(exc), key="telescope.projections") from exc
    else:
        projs = [_random_projection(rng, t["dim"], t["rank"], cplx) for _ in range(t["steps"])]
    sched = _schedule(cfg, len(projs))
    try:
        steps = [telescope.relaxed_step(P, lam) for P, lam in zip(projs, sched)]
    except OpDefectError as exc:
        raise ConfigError(str(exc), key="schedule.value") from exc
    dim = steps[0].dim
    if t["probe"] is not None:
        probes = np.atleast_2d(np.asarray(t["probe"]))
    else:
        probes = _normal(rng, (t["probes"], dim), cplx)
    checks.add("telescoping_operator_identity", telescope.telescoping_residual(steps), 1e-8)
    ledgers = [telescope.run_product(steps, x)[1] for x in probes]
    checks.add("energy_balance", max(l.balance_residual() for l in ledgers), 1e-9)
    with open(out / "telescope_trace.csv", "w", newline="") as fh:
        ledgers[0].to_csv(fh)
    return {"steps": len(steps), "dim": dim, "probes": len(probes)}


def run_interpolate(cfg, out: Path, checks: Checks) -> dict:
    rng = np.random.default_rng(_seed(cfg))
    kernel = _kernel(cfg)
    X = _points(cfg, rng)
    truth = _truth(cfg, kernel, X, rng)
    N = _horizon(cfg, X.shape[0])
    prob = interpolate.InterpolationProblem.from_truth(kernel, X[:N], truth, _schedule(cfg, N))
    tr = interpolate.kaczmarz_run(prob)
    checks.add("energy_balance", tr.energy_balance_residual(), 1e-8)
    excess = max(float(np.sum(tr.dissipated)) - tr.truth_norm_sq, 0.0) / max(tr.truth_norm_sq, 1e-14)
    checks.add("residual_series_bound", excess, 1e-8)
    with open(out / "interpolate_trace.csv", "w", newline="") as fh:
        tr.to_csv(fh)
    n = cfg["noise"]
    trials = cfg["run"]["trials"]
    quiet = interpolate.noisy_kaczmarz_run(prob, interpolate.NoiseModel(0.0, n["law"], _seed(cfg)), N, 1)
    checks.add("zero_noise_matches_noiseless", float(np.max(np.abs(quiet.coeffs[0] - tr.coeffs))), 0.0)
    info = {"horizon": N, "truth_norm_sq": tr.truth_norm_sq}
    if n["sigma"] > 0:
        noise = interpolate.NoiseModel(n["sigma"], n["law"], _seed(cfg))
        rep = interpolate.noisy_kaczmarz_run(prob, noise, N, trials)
        kappa = float(prob.diagonals().min())
        curve = interpolate.noise_floor_curve(prob, noise, kappa, N)
        over = rep.mean_error_sq - curve - 3 * rep.stderr_error_sq
        checks.add("noise_floor_bound", max(float(over.max()), 0.0) / curve[0], 1e-12)
        checks.add("noisy_pathwise_expansion", rep.pathwise_residual, 1e-8)
        _write_rows(out / "interpolate_noise.csv", ["n", "mean_error_sq", "mc_stderr", "bound"],
                    [(i, rep.mean_error_sq[i], rep.stderr_error_sq[i], curve[i]) for i in range(N + 1)])
        info.update(trials=trials, kappa=kappa)
    return info


def run_dropout(cfg, out: Path, checks: Checks) -> dict:
    if _complex(cfg):
        raise ConfigError("dropout experiments run over the reals", key="experiment.field")
    d = cfg["dropout"]
    seed = _seed(cfg)
    rng = np.random.default_rng(seed)
    H, T = d["horizon"], d["trials"]
    try:
        if d["source"] == "coordinate":
            src = dropout.IidCoordinate(d["dim"])
            dcfg = dropout.DropoutConfig(p=d["p"], schedule=d["lambda"], source=src, seed=seed)
            x0 = rng.standard_normal(d["dim"])
            beta = d["beta"] if d["beta"] is not None else d["p"] * src.analytic_alpha()
            rep = dropout.geometric_rate_check(dcfg, x0, H, T, beta=beta)
            emp, bound, se, pathwise = rep.empirical, rep.bound, rep.stderr, rep.pathwise_residual
        else:
            kernel = _kernel(cfg)
            S = rng.standard_normal((d["support"], d["dim"]))
            truth = RkhsFunction(S[:2] + 0.1, rng.standard_normal(2), kernel)
            rr = dropout.rkhs_dropout_run(kernel, truth, S, d["p"], d["lambda"], H, T, seed=seed)
            emp, bound, se, pathwise = rr.mean_error_sq, rr.bound, rr.stderr, rr.pathwise_residual
            beta = d["p"] * rr.alpha
    except (ValueError, OpDefectError) as exc:
        raise ConfigError(str(exc), key="dropout.p") from exc
    over = emp - bound - 3 * se
    checks.add("geometric_rate_bound", max(float(over.max()), 0.0) / max(bound[0], 1e-14), 1e-12)
    checks.add("pathwise_energy_identity", pathwise, 1e-9)
    _write_rows(out / "dropout_trace.csv", ["n", "empirical_mean_err_sq", "theory_bound", "mc_stderr"],
                [(i, emp[i], bound[i], se[i]) for i in range(H + 1)])
    return {"beta": float(beta), "horizon": H, "trials": T}


def run_treesplit(cfg, out: Path, checks: Checks) -> dict:
    t = cfg["tree"]
    seed = _seed(cfg)
    rng = np.random.default_rng(seed)
    fam = _family(cfg, seed)
    N, M = t["depth"], t["keep_depth"]
    if not 0 <= M <= N:
        raise ConfigError("keep_depth must lie in 0..depth", key="tree.keep_depth")
    X = _normal(rng, (cfg["sample"]["n_points"], fam.dim), _complex(cfg))
    ens = [treesplit.tree_energies(fam, x, N) for x in X]
    scale = lambda e: max(e.norm_sq, 1e-300)  # noqa: E731
    checks.add("refinement_identity", max(e.refinement_residuals().max() / scale(e) for e in ens), 1e-9)
    checks.add("splitting_identity", max(e.splitting_residual() / scale(e) for e in ens), 1e-9)
    rises = max(float(np.max(np.diff(e.levels))) / scale(e) for e in ens)
    checks.add("level_energy_monotone", max(rises, 0.0), 1e-12)
    if t["family"] == "isometric":
        dev = max(float(np.max(np.abs(e.levels - e.norm_sq))) / scale(e) for e in ens)
        checks.add("isometric_levels_constant", dev, 1e-10)
    if t["family"] == "scaled":
        geo = t["c"] ** np.arange(N + 1)
        dev = max(float(np.max(np.abs(e.levels - geo * e.norm_sq))) / scale(e) for e in ens)
        checks.add("scaled_levels_geometric", dev, 1e-9)
    checks.add("tree_isometry", 0.0 if treesplit.isometry_check(fam, N, X[:4]) else 1.0, 0.0)
    phi0 = treesplit.FeatureMap.linear(np.eye(fam.dim))
    tk = treesplit.TruncatedKernel(fam, phi0, treesplit.PrefixSet.depth_truncation(fam.d, N, M))
    rep = treesplit.truncated_gram(tk, X)
    K0, KS = rep.K0.entries, rep.KS.entries
    diag_gap = np.real(np.diag(K0 - KS)) - rep.residuals
    checks.add("diagonal_residual_identity",
               float(np.max(np.abs(diag_gap) / np.maximum(np.real(np.diag(K0)), 1e-300))), 1e-9)
    checks.add("gram_gap_psd", max(-rep.min_eig_gap, 0.0) / max(rep.trace_gap, 1e-300), 1e-9)
    checks.add("trace_identity", rep.trace_identity_residual, 1e-8)
    total = float(np.sum(rep.residuals))
    checks.add("operator_bound", max(rep.max_eig_gap - total, 0.0) / max(total, 1.0), 1e-9)
    with open(out / "treesplit_trace.csv", "w", newline="") as fh:
        ens[0].to_csv(fh)
    return {"levels_first_point": [float(v) for v in ens[0].levels]}


def run_compress(cfg, out: Path, checks: Checks) -> dict:
    seed = _seed(cfg)
    rng = np.random.default_rng(seed)
    fam = _family(cfg, seed)
    c = cfg["compress"]
    N = cfg["tree"]["depth"]
    X = _normal(rng, (cfg["sample"]["n_points"], fam.dim), _complex(cfg))
    y = rng.standard_normal(X.shape[0])
    prob = compress.RidgeProblem(y, cfg["ridge"]["lambda"])
    phi0 = treesplit.FeatureMap.linear(np.eye(fam.dim))
    try:
        st = compress.run_greedy(fam, phi0, X, N, budget=c["budget"], tolerance=c["tolerance"])
    except ValueError as exc:
        raise ConfigError(str(exc), key="compress.budget") from exc
    K0 = st.gram0()
    trace_res, chain_res, stop_res, fired = 0.0, 0.0, 0.0, 0
    ny = float(np.linalg.norm(y))
    gaps = [st.trace_gap + sum(r.energy for r in st.history)] + [r.trace_gap_after for r in st.history]
    for S, gap in zip(st.snapshot_sets(), gaps):
        KS = st.gram(S)
        tr0 = float(np.real(np.trace(K0)))
        trace_res = max(trace_res, abs(float(np.real(np.trace(K0 - KS))) - gap) / tr0)
        s = compress.ridge_stability_check(K0, KS, prob)
        chain_res = max(chain_res, (s.lhs - s.operator_bound) / max(s.trace_bound, 1e-300),
                        (s.operator_bound - s.trace_bound) / max(s.trace_bound, 1e-300))
        if gap <= c["eps"] * prob.reg:
            fired += 1
            stop_res = max(stop_res, (s.lhs - c["eps"] * ny) / max(ny, 1e-300))
    checks.add("exact_trace_decrease", trace_res, 1e-9)
    checks.add("ridge_deviation_chain", max(chain_res, 0.0), 1e-8)
    checks.add("stopping_rule_guarantee", max(stop_res, 0.0), 1e-10)
    with open(out / "compress_trace.csv", "w", newline="") as fh:
        compress.history_csv(st, prob, fh)
    return {"steps": len(st.history), "final_trace_gap": st.trace_gap, "stopping_rule_fired": fired}


def run_gkpca(cfg, out: Path, checks: Checks) -> dict:
    rng = np.random.default_rng(_seed(cfg))
    kernel = _kernel(cfg)
    X = _points(cfg, rng)
    g = cfg["gkpca"]
    dic, log = gkpca.greedy_select_log(kernel, X, g["eps_admit"])
    try:
        model = gkpca.fit_kpca(dic, p=g["p"], theta=g["theta"])
    except (ValueError, OpDefectError) as exc:
        raise ConfigError(str(exc), key="gkpca.p") from exc
    G = dic.gram
    checks.add("cholesky_factor", float(np.abs(dic.chol @ np.conj(dic.chol).T - G).max())
               / max(float(np.abs(G).max()), 1e-300), 1e-8)
    lam1 = max(float(model.eigvals[0]), 1e-300)
    checks.add("eigen_residual", float(np.abs(G @ model.eigvecs - model.eigvecs * model.eigvals).max())
               / lam1, 1e-8)
    late = [gkpca.residual_delta(dic, X[r.index]) - r.delta for r in log if not r.admitted]
    checks.add("admission_soundness", max(late + [0.0]), 1e-9)
    # brute force: least squares against the dictionary on the joint Gram
    Kdx = kernel.matrix(dic.points, X)
    a = np.linalg.lstsq(G, Kdx, rcond=None)[0]
    diag = np.real(kernel.diag(X))
    brute = diag - 2 * np.real(np.sum(np.conj(a) * Kdx, axis=0)) + np.real(
        np.sum(np.conj(a) * (G @ a), axis=0))
    fact = np.array([gkpca.residual_delta(dic, x) for x in X])
    checks.add("delta_vs_least_squares", float(np.max(np.abs(fact - brute) / diag)), 1e-8)
    Fd = gkpca.embed(model, dic.points)
    ref = (model.eigvecs.T @ G).T / np.sqrt(np.real(np.diag(G)))[:, None]
    checks.add("embedding_consistency", float(np.abs(Fd - ref).max()), 1e-9)

    truth = _truth(cfg, kernel, X, rng)
    N = _horizon(cfg, X.shape[0])
    n = cfg["noise"]
    noise = interpolate.NoiseModel(n["sigma"], n["law"], _seed(cfg))
    rep = gkpca.convergence_and_noise_report(kernel, truth, X, _schedule(cfg, N), noise, N,
                                             cfg["run"]["trials"])
    run = rep.deflation
    checks.add("greedy_energy_decomposition", float(run.decomposition_residuals().max()), 1e-8)
    checks.add("energy_forms_agree", run.form_gap() / max(run.norm_sq[0], 1e-14), 1e-10)
    checks.add("step_difference_bound", max(-float(run.step_bound_slack().min()), 0.0), 1e-10)
    checks.add("norm_monotone", 0.0 if rep.monotone else 1.0, 0.0)
    if rep.mean_error_sq is not None:
        over = rep.mean_error_sq - rep.bound_ledger - 3 * rep.stderr_error_sq
        checks.add("noise_stability_bound", max(float(over.max()), 0.0) / rep.bound_norm[0], 1e-12)

    with open(out / "gkpca_trace.csv", "w", newline="") as fh:
        run.to_csv(fh)
    with open(out / "gkpca_embeddings.csv", "w", newline="") as fh:
        gkpca.embeddings_csv(model, X, fh)
    _write_rows(out / "gkpca_dictionary.csv", ["position", "index", "delta_at_admission"],
                [(str(i), str(r.index), r.delta) for i, r in enumerate(r for r in log if r.admitted)])
    return {"dictionary_indices": [int(i) for i in dic.indices],
            "eigvals": [float(v) for v in model.eigvals],
            "num_components": model.num_components,
            "cauchy_tail": rep.cauchy_tail, "summability_partial_sum": rep.summability.partial_sum,
            "summability_verdict": rep.summability.verdict.value}


RUNNERS = {"telescope": run_telescope, "interpolate": run_interpolate, "dropout": run_dropout,
           "treesplit": run_treesplit, "compress": run_compress, "gkpca": run_gkpca}


# ---------------------------------------------------------------- driver


def _jsonable(cfg: dict) -> dict:
    def conv(v):
        if isinstance(v, np.ndarray):
            return np.asarray(v).tolist() if not np.iscomplexobj(v) else str(v.tolist())
        return v
    return {s: {k: conv(v) for k, v in keys.items()} for s, keys in cfg.items()}


def run(config_path, out_dir, seed: int | None = None, trials: int | None = None,
        data: str | None = None, expect: str | None = None) -> dict:
    """Run one experiment and write its artifacts; returns the report dictionary."""
    cfg = load_config(config_path)
    name = cfg["experiment"]["name"]
    if expect is not None and name != expect:
        raise ConfigError(f"config describes {name!r}, not {expect!r}", key="experiment.name")
    path = cfg.get("data", {}).get("path")
    if path and not Path(path).is_absolute():
        # relative data paths are read from the config's own directory
        cfg["data"]["path"] = str(Path(config_path).resolve().parent / path)
    if seed is not None:
        cfg["run"]["seed"] = seed
    if trials is not None:
        if "trials" in cfg.get("dropout", {}):
            cfg["dropout"]["trials"] = trials
        elif "trials" in cfg["run"]:
            cfg["run"]["trials"] = trials
    if data is not None:
        if "data" not in cfg:
            raise ConfigError(f"experiment {name!r} takes no data file", key="data.path")
        cfg["data"]["path"] = data
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checks = Checks()
    t0 = time.perf_counter()
    try:
        info = RUNNERS[name](cfg, out, checks)
    except ConfigError:
        raise
    except (OpDefectError, ValueError, np.linalg.LinAlgError) as exc:
        raise ExperimentError(f"{name} experiment failed: {exc}") from exc
    wall = time.perf_counter() - t0
    manifest = []
    for p in sorted(out.glob(f"{name}_*.csv")):
        manifest.append({"file": p.name, "bytes": p.stat().st_size,
                         "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
    report = {"experiment": name, "config_echo": _jsonable(cfg), "wall_time": wall,
              "checks": checks.items, "passed": checks.passed, "info": info, "manifest": manifest}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def _add_run_flags(p):
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--trials", type=int, help="override the trial count")
    p.add_argument("--data", help="override data.path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opdefect", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    _add_run_flags(sub.add_parser("run", help="run the experiment named in a config"))
    lp = sub.add_parser("list", help="list experiments")
    lp.add_argument("--schema", action="store_true", help="also print every config key")
    cp = sub.add_parser("compress", help="alias: compress run --config FILE")
    _add_run_flags(cp.add_subparsers(dest="action", required=True).add_parser("run"))
    gp = sub.add_parser("gkpca", help="alias: gkpca fit --config FILE --data CSV")
    _add_run_flags(gp.add_subparsers(dest="action", required=True).add_parser("fit"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "list":
        print("\n".join(EXPERIMENTS))
        if args.schema:
            print()
            print(schema_text())
        return EXIT_PASS
    expect = args.cmd if args.cmd in ("compress", "gkpca") else None
    try:
        report = run(args.config, args.out, seed=args.seed, trials=args.trials, data=args.data,
                     expect=expect)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for c in report["checks"]:
        flag = "pass" if c["passed"] else "FAIL"
        print(f"{flag}  {c['name']}: residual {c['residual']:.3e} (tol {c['tolerance']:.1e})")
    return EXIT_PASS if report["passed"] else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
