"""Command-line pipeline: analyze, lp, reduce, simulate, compare.

Exit codes: 0 success, 1 other pipeline error, 2 irreducible resonance,
3 invalid configuration, 4 reducibility violation, 5 linear resonance.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .augmentation import ParametricTerm, QPLinearSystem, augment, modal
from .errors import (BasisError, ConfigError, IrreducibleResonance, LinearResonance,
                     ReducibilityViolation)
from .lp_transform import ZNNConfig, assemble_Q, invert_direct, invert_znn
from .normal_form import normal_form_iterate
from .qpalgebra import FrequencyBasis, QPSeries, QPStatePoly
from .reduction import (ForcedSystem, default_masters, partition, recover_states, reduce_linear,
                        reduce_manifold, solve_manifold, transform_system)
from .simkit import PSDConfig, Trajectory, compare, integrate, poly_rhs, psd_csv, resample, welch_psd

log = logging.getLogger("qpreduce")

EXIT_OK, EXIT_ERROR, EXIT_IRREDUCIBLE, EXIT_CONFIG, EXIT_REDUCIBILITY, EXIT_LINEAR = 0, 1, 2, 3, 4, 5

DEFAULT_SOLVER = {
    "normal_form_order": 4,
    "trunc_order": 5,
    "nf_tolerance": None,
    "manifold_tolerance": None,
    "manifold_order": 2,
    "fit_window": [0.0, 200.0],
    "fit_dt": 0.02,
    "inverse": "direct",
    "znn_gamma": 100.0,
    "znn_activation": "linear",
    "probe_span": [0.0, 50.0],
    "probe_samples": 1000,
    "step": 1e-3,
    "reduced_step": 5e-3,
    "t_span": [0.0, 100.0],
    "initial_state": None,
    "include_homogeneous": True,
    "manifold_initial": "state",
    "prune": 1e-7,
    "psd": {"sample_rate": 100.0, "segment_len": 4096, "overlap_frac": 0.5, "threshold_db": -20.0},
}

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_SPAN = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "qpreduce system configuration",
    "type": "object",
    "required": ["schema_version", "dimension", "frequencies", "B0"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "name": {"type": "string"},
        "dimension": {"type": "integer", "minimum": 1},
        "state_names": {"type": "array", "items": {"type": "string"}},
        "frequencies": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["label", "value"],
                "additionalProperties": False,
                "properties": {
                    "label": {"type": "string", "minLength": 1},
                    "value": {"type": "number", "exclusiveMinimum": 0},
                    "role": {"enum": ["parametric", "forcing"]},
                },
            },
        },
        "B0": {"type": "array", "items": {"type": "array", "items": _NUM}},
        "parametric_terms": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["row", "col", "amplitude", "frequency"],
                "additionalProperties": False,
                "properties": {
                    "row": {"type": "integer", "minimum": 0},
                    "col": {"type": "integer", "minimum": 0},
                    "amplitude": _NUM,
                    "frequency": {"type": "string"},
                    "kind": {"enum": ["cos", "sin"]},
                },
            },
        },
        "nonlinear_terms": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["state", "exponents", "coefficient"],
                "additionalProperties": False,
                "properties": {
                    "state": {"type": "integer", "minimum": 0},
                    "exponents": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "coefficient": _NUM,
                },
            },
        },
        "forcing_terms": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["state", "amplitude", "frequency"],
                "additionalProperties": False,
                "properties": {
                    "state": {"type": "integer", "minimum": 0},
                    "amplitude": _NUM,
                    "frequency": {"type": "string"},
                    "kind": {"enum": ["cos", "sin"]},
                },
            },
        },
        "master_indices": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "normal_form_order": {"type": "integer", "minimum": 2},
                "trunc_order": {"type": "integer", "minimum": 1},
                "nf_tolerance": _NUM_OR_NULL,
                "manifold_tolerance": _NUM_OR_NULL,
                "manifold_order": {"type": "integer", "minimum": 0, "maximum": 2},
                "fit_window": _SPAN,
                "fit_dt": {"type": "number", "exclusiveMinimum": 0},
                "inverse": {"enum": ["direct", "znn"]},
                "znn_gamma": {"type": "number", "exclusiveMinimum": 0},
                "znn_activation": {"enum": ["linear", "power-sigmoid"]},
                "probe_span": _SPAN,
                "probe_samples": {"type": "integer", "minimum": 2},
                "step": {"type": "number", "exclusiveMinimum": 0},
                "reduced_step": {"type": "number", "exclusiveMinimum": 0},
                "t_span": _SPAN,
                "initial_state": {"type": ["array", "null"], "items": _NUM},
                "include_homogeneous": {"type": "boolean"},
                "manifold_initial": {"enum": ["state", "zero"]},
                "prune": {"type": "number", "minimum": 0},
                "psd": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "sample_rate": {"type": "number", "exclusiveMinimum": 0},
                        "segment_len": {"type": "integer", "minimum": 8},
                        "overlap_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "threshold_db": _NUM,
                    },
                },
            },
        },
    },
}


# ----------------------------------------------------------------------------
# configuration


def bundled_config_path() -> Path:
    return Path(str(resources.files("qpreduce") / "data" / "mathieu_hill.json"))


def _schema_error(cfg) -> ConfigError | None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if not errors:
        return None
    e = errors[0]
    path = "/" + "/".join(str(p) for p in e.absolute_path)
    return ConfigError(e.message, path)


def parse_config(text_or_obj) -> dict:
    """Validate a configuration and fill solver defaults."""
    if isinstance(text_or_obj, (str, bytes)):
        try:
            cfg = json.loads(text_or_obj)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} at line {exc.lineno}") from exc
    else:
        cfg = copy.deepcopy(text_or_obj)
    err = _schema_error(cfg)
    if err is not None:
        raise err
    n = cfg["dimension"]
    cfg.setdefault("name", "system")
    cfg.setdefault("state_names", [f"x{i + 1}" for i in range(n)])
    for key in ("parametric_terms", "nonlinear_terms", "forcing_terms"):
        cfg.setdefault(key, [])
    cfg.setdefault("master_indices", None)
    solver = copy.deepcopy(DEFAULT_SOLVER)
    user = cfg.get("solver", {})
    psd = dict(solver["psd"])
    psd.update(user.get("psd", {}))
    solver.update(user)
    solver["psd"] = psd
    if solver["initial_state"] is None:
        solver["initial_state"] = [0.0] * n
    cfg["solver"] = solver
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg: dict):
    n = cfg["dimension"]
    labels = [f["label"] for f in cfg["frequencies"]]
    dup = sorted({l for l in labels if labels.count(l) > 1})
    if dup:
        raise ConfigError(f"duplicate frequency label(s): {', '.join(dup)}", "/frequencies")
    roles = {f["label"]: f.get("role", "parametric") for f in cfg["frequencies"]}
    B0 = cfg["B0"]
    if len(B0) != n or any(len(r) != n for r in B0):
        raise ConfigError(f"B0 must be {n}x{n}", "/B0")
    if len(cfg["state_names"]) != n:
        raise ConfigError(f"need {n} state names", "/state_names")
    for i, t in enumerate(cfg["parametric_terms"]):
        path = f"/parametric_terms/{i}"
        if t["frequency"] not in roles:
            raise ConfigError(f"undefined frequency label {t['frequency']!r}", path + "/frequency")
        if roles[t["frequency"]] != "parametric":
            raise ConfigError(f"frequency {t['frequency']!r} is not parametric", path + "/frequency")
        if t["row"] >= n or t["col"] >= n:
            raise ConfigError("matrix entry out of range", path)
    for i, t in enumerate(cfg["nonlinear_terms"]):
        path = f"/nonlinear_terms/{i}"
        if t["state"] >= n:
            raise ConfigError("state index out of range", path + "/state")
        if len(t["exponents"]) != n:
            raise ConfigError(f"exponents need {n} entries", path + "/exponents")
        if sum(t["exponents"]) < 2:
            raise ConfigError("nonlinear terms must have degree >= 2", path + "/exponents")
    for i, t in enumerate(cfg["forcing_terms"]):
        path = f"/forcing_terms/{i}"
        if t["frequency"] not in roles:
            raise ConfigError(f"undefined frequency label {t['frequency']!r}", path + "/frequency")
        if t["state"] >= n:
            raise ConfigError("state index out of range", path + "/state")
    s = cfg["solver"]
    if len(s["initial_state"]) != n:
        raise ConfigError(f"initial state needs {n} entries", "/solver/initial_state")
    m = cfg["master_indices"]
    if m is not None and (not m or any(i >= n for i in m)):
        raise ConfigError("master indices out of range", "/master_indices")


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_system(cfg: dict) -> ForcedSystem:
    n = cfg["dimension"]
    freqs = cfg["frequencies"]
    param = [f for f in freqs if f.get("role", "parametric") == "parametric"]
    forcing = [f for f in freqs if f.get("role", "parametric") == "forcing"]
    try:
        basis = FrequencyBasis(tuple(float(f["value"]) for f in param), tuple(f["label"] for f in param))
    except BasisError as exc:
        raise ConfigError(str(exc), "/frequencies") from exc
    full = basis.extend([f["label"] for f in forcing], [float(f["value"]) for f in forcing])
    terms = [ParametricTerm(t["row"], t["col"], float(t["amplitude"]), basis.index_of(t["frequency"]),
                            t.get("kind", "cos")) for t in cfg["parametric_terms"]]
    linear = QPLinearSystem(np.array(cfg["B0"], float), terms, basis)
    deg = max([sum(t["exponents"]) for t in cfg["nonlinear_terms"]] + [2])
    per_state = [dict() for _ in range(n)]
    zero_p = (0,) * basis.k
    for t in cfg["nonlinear_terms"]:
        key = (tuple(t["exponents"]), zero_p)
        per_state[t["state"]][key] = per_state[t["state"]].get(key, 0.0) + float(t["coefficient"])
    nonlinear = [QPStatePoly(basis, n, d, max_degree=deg, trunc_order=0, real_flag=True) for d in per_state]
    fser = [QPSeries.zero(full) for _ in range(n)]
    for t in cfg["forcing_terms"]:
        make = QPSeries.cos if t.get("kind", "cos") == "cos" else QPSeries.sin
        fser[t["state"]] = fser[t["state"]] + make(full, full.index_of(t["frequency"]), float(t["amplitude"]))
    return ForcedSystem(linear, nonlinear, fser)


def forcing_frequency(cfg: dict) -> float | None:
    forcing = [f for f in cfg["frequencies"] if f.get("role", "parametric") == "forcing"]
    return float(forcing[0]["value"]) if forcing else None


# ----------------------------------------------------------------------------
# pipeline


def _c(z) -> list:
    z = complex(z)
    return [z.real, z.imag]


def _clist(a) -> list:
    return [_c(z) for z in np.asarray(a).reshape(-1)]


def _poly_rows(polys, names=None) -> list:
    rows = []
    for j, p in enumerate(polys):
        for (mono, freq), c in sorted(p.terms.items()):
            rows.append({"component": j, "monomial": list(mono), "p": list(freq), "c": _c(c)})
    return rows


class Pipeline:
    """Lazily evaluated stages sharing one configuration."""

    def __init__(self, cfg: dict, masters=None, tolerances: dict | None = None):
        self.cfg = cfg
        self.solver = cfg["solver"]
        self.tol = tolerances or {}
        self.masters_override = masters
        self.stages: dict[str, dict] = {}
        self._cache: dict = {}

    def _stage(self, name, fn):
        if name in self._cache:
            return self._cache[name]
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            self.stages[name] = {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
            raise
        self.stages[name] = {"status": "ok", "seconds": round(time.perf_counter() - t0, 3)}
        log.info("stage %s done in %.2fs", name, time.perf_counter() - t0)
        self._cache[name] = out
        return out

    @property
    def system(self) -> ForcedSystem:
        return self._stage("build", lambda: build_system(self.cfg))

    def analyze(self):
        def run():
            lin = self.system.linear
            aug = augment(lin, max_degree=self.solver["normal_form_order"])
            spec = modal(aug.Bbar0, aug.n_physical, aug.fictitious_pairs)
            nit, jbar, report = normal_form_iterate(aug, spec, self.solver["normal_form_order"],
                                                    self.tol.get("nf", self.solver["nf_tolerance"]))
            return aug, spec, nit, jbar, report
        return self._stage("normal_form", run)

    def lp(self):
        def run():
            aug, spec, nit, jbar, _ = self.analyze()
            return assemble_Q(nit, aug, spec, jbar, self.solver["trunc_order"], self.probe,
                              self.system.linear)
        return self._stage("lp_transform", run)

    @property
    def probe(self) -> np.ndarray:
        a, b = self.solver["probe_span"]
        return np.linspace(a, b, self.solver["probe_samples"])

    def inverse(self, method: str | None = None):
        method = method or self.solver["inverse"]

        def run():
            lp = self.lp()
            if method == "direct":
                return invert_direct(lp, self.probe)
            cfg = ZNNConfig(gamma=self.solver["znn_gamma"], activation=self.solver["znn_activation"],
                            grid=tuple(self.probe))
            return invert_znn(lp, cfg)
        return self._stage(f"inverse_{method}", run)

    def transformed(self):
        def run():
            lp = self.lp()
            inv = None
            if self.solver["inverse"] == "znn":
                a, b = self.solver["fit_window"]
                grid = np.arange(a, b + 0.5 * self.solver["fit_dt"], self.solver["fit_dt"])
                inv = invert_znn(lp, ZNNConfig(gamma=self.solver["znn_gamma"],
                                               activation=self.solver["znn_activation"], grid=tuple(grid)))
            return transform_system(self.system, lp, inv, tuple(self.solver["fit_window"]),
                                    self.solver["fit_dt"], self.solver["trunc_order"])
        return self._stage("transform", run)

    @property
    def masters(self) -> list[int]:
        if self.masters_override is not None:
            return list(self.masters_override)
        if self.cfg["master_indices"] is not None:
            return list(self.cfg["master_indices"])
        jbar = self.analyze()[3].diagonal
        wf = forcing_frequency(self.cfg)
        return default_masters(jbar, wf if wf is not None else 0.0)

    def partitioned(self):
        return self._stage("partition", lambda: partition(self.transformed(), self.masters))

    @property
    def z0(self) -> np.ndarray:
        return self.lp().P0inv @ np.asarray(self.solver["initial_state"], float)

    def manifold(self):
        def run():
            part = self.partitioned()
            init = None
            if self.solver["manifold_initial"] == "state":
                init = self.z0[part.slave_indices]
            return solve_manifold(part, self.tol.get("manifold", self.solver["manifold_tolerance"]),
                                  self.solver["manifold_order"], self.solver["include_homogeneous"],
                                  init, self.solver["trunc_order"])
        return self._stage("manifold", run)

    def model(self, method: str):
        def run():
            part = self.partitioned()
            if method == "linear":
                return reduce_linear(part)
            man, _ = self.manifold()
            return reduce_manifold(part, man, trunc_order=self.solver["trunc_order"])
        return self._stage(f"reduce_{method}", run)

    def simulate(self, method: str) -> Trajectory:
        def run():
            s = self.solver
            if method == "full":
                return integrate(self.system.rhs, np.asarray(s["initial_state"], float), s["t_span"],
                                 s["step"], {"system": "full"})
            mod = self.model(method)
            rhs = poly_rhs(mod.Jr, mod.wbar, mod.Fr, prune=s["prune"])
            zr0 = self.z0[mod.master_indices].astype(complex)
            tr = integrate(rhs, zr0, s["t_span"], s["reduced_step"], {"system": method})
            x = recover_states(self.lp(), mod, tr.times, tr.states)
            return Trajectory(tr.times, x, tr.metadata)
        return self._stage(f"simulate_{method}", run)

    def psd_config(self) -> PSDConfig:
        p = self.solver["psd"]
        return PSDConfig(p["sample_rate"], p["segment_len"], p["overlap_frac"], p["threshold_db"])

    def artifact(self, extra: dict | None = None) -> dict:
        out = {"config_hash": config_hash(self.cfg), "tool_version": __version__,
               "stages": self.stages}
        if "normal_form" in self._cache:
            out["jbar"] = _clist(self._cache["normal_form"][3].diagonal)
        out.update(extra or {})
        return out


# ----------------------------------------------------------------------------
# documents


def analysis_doc(pipe: Pipeline) -> dict:
    aug, spec, nit, jbar, report = pipe.analyze()
    rep = report.to_dict()
    rep["entries"] = [e for e in rep["entries"] if e["classification"] != "clear"]
    return {
        "eigenvalues": _clist(spec.eigenvalues),
        "jbar": _clist(jbar.diagonal),
        "jbar_corrections": _clist(jbar.corrections()),
        "fictitious_constants": {k: _c(v) for k, v in jbar.fictitious_constants.items()},
        "normal_form_orders": nit.orders,
        "resonance": rep,
    }


def lp_doc(pipe: Pipeline) -> dict:
    lp = pipe.lp()
    Q = lp.Q
    return {
        "basis": {"labels": list(Q.basis.labels), "omegas": list(Q.basis.omegas)},
        "P0": [_clist(r) for r in lp.P0],
        "Jhat": np.real(lp.Jhat).tolist(),
        "jbar": _clist(lp.jbar.diagonal),
        "verification": lp.verification,
        "Q": {"indices": Q.idx.tolist(), "coefficients": [[_clist(r) for r in C] for C in Q.coef]},
    }


def reduction_doc(pipe: Pipeline, method: str) -> dict:
    mod = pipe.model(method)
    doc = {"method": method, "masters": mod.master_indices, "slaves": mod.slave_indices,
           "Jr": _clist(mod.Jr), "basis": {"labels": list(mod.basis.labels), "omegas": list(mod.basis.omegas)},
           "transform_fit": pipe.transformed().fit_residuals,
           "reduced_terms": [len(p) for p in mod.wbar]}
    if method == "manifold":
        man, rep = pipe.manifold()
        doc["reducibility"] = rep.to_dict()
        doc["nonzero_families"] = man.nonzero_families()
    return doc


def model_doc(pipe: Pipeline, method: str) -> dict:
    mod = pipe.model(method)
    return {"method": method, "Jr": _clist(mod.Jr), "wbar": _poly_rows(mod.wbar),
            "Fr": [[{"p": list(p), "c": _c(c)} for p, c in sorted(f.coeffs.items())] for f in mod.Fr]}


# ----------------------------------------------------------------------------
# output


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(source) -> tuple[list[str], np.ndarray]:
    """Parse a CSV emitted by this tool (path or text) into (header, values)."""
    import csv
    import io

    text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) else str(source)
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ConfigError("empty CSV")
    data = np.array([[float(v) for v in r] for r in rows[1:]], float).reshape(-1, len(rows[0]))
    return rows[0], data


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _emit(out: Path | None, files: dict[str, str]):
    if out is None:
        return
    for name in sorted(files):
        write_atomic(out / name, files[name])


def _traces_csv(names, runs: dict[str, Trajectory], rate: float) -> tuple[str, str]:
    import csv
    import io

    grids = {k: resample(v, rate) for k, v in runs.items()}
    t = min((g[0] for g in grids.values()), key=len)
    cols = {k: g[1][: len(t)] for k, g in grids.items()}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"{k}_{n}" for k in runs for n in names])
    for i, ti in enumerate(t):
        w.writerow([f"{ti:.15g}"] + [f"{cols[k][i, j]:.15g}" for k in runs for j in range(len(names))])
    pbuf = io.StringIO()
    pw = csv.writer(pbuf, lineterminator="\n")
    pairs = [(j, j + 1) for j in range(0, len(names) - 1, 2)]
    pw.writerow(["t"] + [f"{k}_{names[a]}_{names[b]}_{ax}" for k in runs for a, b in pairs for ax in ("q", "v")])
    for i, ti in enumerate(t):
        row = [f"{ti:.15g}"]
        for k in runs:
            for a, b in pairs:
                row += [f"{cols[k][i, a]:.15g}", f"{cols[k][i, b]:.15g}"]
        pw.writerow(row)
    return buf.getvalue(), pbuf.getvalue()


# ----------------------------------------------------------------------------
# commands


def _pipeline(args) -> Pipeline:
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
    else:
        text = bundled_config_path().read_text(encoding="utf-8")
    cfg = parse_config(text)
    masters = None
    if args.masters:
        try:
            masters = [int(x) for x in args.masters.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --masters value {args.masters!r}") from exc
    tols = {}
    if args.seed_tolerances:
        for item in args.seed_tolerances.split(","):
            key, _, val = item.partition("=")
            if key.strip() not in ("nf", "manifold") or not val:
                raise ConfigError(f"bad --seed-tolerances entry {item!r} (use nf=..., manifold=...)")
            tols[key.strip()] = float(val)
    return Pipeline(cfg, masters, tols)


def cmd_analyze(pipe: Pipeline, args) -> dict:
    doc = analysis_doc(pipe)
    for i, (re, im) in enumerate(doc["jbar"]):
        print(f"jbar[{i}] = {re:+.6f} {im:+.6f}i")
    print(f"retained resonant terms: {doc['resonance']['retained']}")
    return {"analysis.json": _json(doc)}


def cmd_lp(pipe: Pipeline, args) -> dict:
    method = args.method or pipe.solver["inverse"]
    if method not in ("direct", "znn"):
        raise ConfigError(f"lp supports --method direct|znn, not {method!r}")
    doc = lp_doc(pipe)
    inv = pipe.inverse(method)
    doc["inverse"] = {"method": method, "max_residual": float(inv.residuals.max())}
    v = doc["verification"]
    print(f"|Q(0) - I| = {v['q0_error']:.3e}; inverse residual ({method}) = {inv.residuals.max():.3e}")
    return {"lp.json": _json(doc), f"inverse_{method}.csv": inv.to_csv()}


def cmd_reduce(pipe: Pipeline, args) -> dict:
    method = args.method or "manifold"
    if method not in ("linear", "manifold"):
        raise ConfigError(f"reduce supports --method linear|manifold, not {method!r}")
    doc = reduction_doc(pipe, method)
    print(f"{method} reduction on masters {doc['masters']}: "
          + (f"min divisor {doc['reducibility']['min_divisor']:.3e}" if method == "manifold" else "ok"))
    return {"lp.json": _json(lp_doc(pipe)), "reduction.json": _json(doc),
            f"model_{method}.json": _json(model_doc(pipe, method))}


def cmd_simulate(pipe: Pipeline, args) -> dict:
    method = args.method or "full"
    if method not in ("full", "linear", "manifold"):
        raise ConfigError(f"simulate supports --method full|linear|manifold, not {method!r}")
    tr = pipe.simulate(method)
    print(f"{method}: {len(tr.times)} samples, max |x| = {np.abs(tr.states).max():.4g}")
    return {f"trajectory_{method}.csv": tr.to_csv(pipe.cfg["state_names"])}


def cmd_compare(pipe: Pipeline, args) -> dict:
    names = pipe.cfg["state_names"]
    full = pipe.simulate("full")
    runs = {"full": full, "linear": pipe.simulate("linear"), "manifold": pipe.simulate("manifold")}
    cfg = pipe.psd_config()
    reports = {k: compare(full, runs[k], cfg) for k in ("linear", "manifold")}
    summary = {"masters": pipe.masters, "states": names,
               "methods": {k: r.to_dict() for k, r in reports.items()}}
    for k, r in reports.items():
        print(f"{k:9s} rms={np.round(r.rms_error, 5).tolist()} psd_match={r.psd_match}")
    traces, phase = _traces_csv(names, runs, 1.0 / pipe.solver["reduced_step"])
    cols = {}
    freqs = None
    for k, tr in runs.items():
        _, xs = resample(tr, cfg.sample_rate)
        for j, n in enumerate(names):
            freqs, d = welch_psd(xs[:, j], cfg.sample_rate, cfg.segment_len, cfg.overlap_frac, cfg.window)
            cols[f"{k}_{n}"] = d
    return {"summary.json": _json(summary), "time_traces.csv": traces, "phase_plane.csv": phase,
            "psd.csv": psd_csv(freqs, cols)}


COMMANDS = {"analyze": cmd_analyze, "lp": cmd_lp, "reduce": cmd_reduce, "simulate": cmd_simulate,
            "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpreduce", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="system configuration (JSON); defaults to the bundled example")
        p.add_argument("--method", help="inverse (lp), reduction (reduce) or model (simulate) method")
        p.add_argument("--out", help="output directory")
        p.add_argument("--masters", help="comma-separated master mode indices")
        p.add_argument("--seed-tolerances", dest="seed_tolerances",
                       help="override tolerances, e.g. nf=1e-6,manifold=1e-4")
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, BasisError, jsonschema.ValidationError)):
        return EXIT_CONFIG
    if isinstance(exc, IrreducibleResonance):
        return EXIT_IRREDUCIBLE
    if isinstance(exc, LinearResonance):
        return EXIT_LINEAR
    if isinstance(exc, ReducibilityViolation):
        return EXIT_REDUCIBILITY
    return EXIT_ERROR


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("QPREDUCE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    pipe = None
    try:
        pipe = _pipeline(args)
        files = COMMANDS[args.command](pipe, args)
        files["artifact.json"] = _json(pipe.artifact({"command": args.command}))
        _emit(out, files)
        return EXIT_OK
    except Exception as exc:  # every failure becomes an exit code plus an error report
        code = exit_code_for(exc)
        log.debug("stage failure", exc_info=True)
        label = getattr(exc, "condition", None)
        msg = f"error: {exc}" if label is None or str(exc).startswith(label) else f"error: {label}: {exc}"
        print(msg, file=sys.stderr)
        if out is not None:
            extra = {"command": args.command, "error": str(exc), "exit_code": code}
            doc = pipe.artifact(extra) if pipe is not None else {"tool_version": __version__, **extra}
            if isinstance(exc, ConfigError) and exc.path:
                doc["error_path"] = exc.path
            _emit(out, {"artifact.json": _json(doc)})
        return code


if __name__ == "__main__":
    sys.exit(main())
