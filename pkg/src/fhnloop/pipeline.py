"""Stage orchestration with content-hash checkpoints.

Each stage writes its artifacts into ``<out>/<stage>/`` and records in
``<out>/manifest.json`` the hash of its inputs (the relevant config sections
plus the output hashes of its upstream stages), the sha256 of every output
file, its wall time and the pass/fail state of its gates.  A stage whose
input hash is unchanged is not recomputed; its files are verified against
the recorded checksums first.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import bloch, evans, melnikov, orbits, pde
from .collocation import ConvergenceError
from .config import DEPENDENCIES, STAGES, RunConfig, dependency_closure, serialize
from .wave import wave_from_orbit

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# config sections that feed each stage's input hash
STAGE_SECTIONS = {
    "loop": ("model", "loop"),
    "periodic": ("periodic",),
    "melnikov": ("melnikov",),
    "reduce": ("reduce",),
    "sweep": ("sweep",),
    "evolve": ("evolve",),
    "report": (),
}

# failures that count as numerical (exit code 3) rather than programming errors
NUMERICAL_ERRORS = (ConvergenceError, ArithmeticError, np.linalg.LinAlgError, ValueError, RuntimeError)


class ChecksumError(RuntimeError):
    """A checkpoint file does not match the checksum recorded in the manifest."""


class MissingCheckpointError(RuntimeError):
    """A stage needs an upstream checkpoint that is neither present nor scheduled."""


@dataclass
class StageResult:
    name: str
    status: str  # ok | failed | error | skipped
    gates: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)  # relative path -> sha256
    input_hash: str = ""
    wall_time: float = 0.0
    message: str = ""
    summary: dict = field(default_factory=dict)
    cached: bool = False

    @property
    def output_hash(self) -> str:
        h = hashlib.sha256()
        for path in sorted(self.outputs):
            h.update(path.encode())
            h.update(self.outputs[path].encode())
        return h.hexdigest()

    def as_dict(self) -> dict:
        return {"status": self.status, "gates": self.gates, "outputs": self.outputs,
                "input_hash": self.input_hash, "output_hash": self.output_hash,
                "wall_time": self.wall_time, "message": self.message, "summary": self.summary}

    @classmethod
    def from_dict(cls, name, d) -> "StageResult":
        return cls(name=name, status=d["status"], gates=d.get("gates", {}), outputs=d.get("outputs", {}),
                   input_hash=d.get("input_hash", ""), wall_time=d.get("wall_time", 0.0),
                   message=d.get("message", ""), summary=d.get("summary", {}), cached=True)


@dataclass
class PipelineResult:
    results: dict
    exit_code: int
    out: Path

    @property
    def recomputed(self) -> list:
        return [n for n, r in self.results.items() if not r.cached and r.status != "skipped"]


# ------------------------------------------------------------------ helpers
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, complex):
        return {"re": _clean(obj.real), "im": _clean(obj.imag)}
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _tag(T: float) -> str:
    return f"{T:g}".replace(".", "p")


def log_slope(x, y) -> float:
    return float(np.polyfit(np.asarray(x, float), np.log(np.asarray(y, float)), 1)[0])


# ------------------------------------------------------------------ loaders
def load_loop(out: Path) -> orbits.LoopLocus:
    d = Path(out) / "loop"
    return orbits.LoopLocus.from_profiles(orbits.OrbitProfile.load(d / "h1.txt"),
                                          orbits.OrbitProfile.load(d / "h2.txt"))


def load_family(out: Path, loop: orbits.LoopLocus) -> list:
    d = Path(out) / "periodic"
    info = read_json(d / "family.json")
    return [orbits.PeriodicMember.from_orbit(orbits.OrbitProfile.load(d / m["file"]), loop)
            for m in info["members"]]


def load_adjoints(out: Path):
    d = Path(out) / "melnikov"
    info = read_json(d / "melnikov.json")
    res = []
    for i in (1, 2):
        prof = orbits.OrbitProfile.load(d / f"psi{i}.txt")
        a = info[f"psi{i}"]
        res.append(melnikov.AdjointProfile(profile=prof, parent=i, kernel_sigmas=np.array(a["kernel_sigmas"]),
                                           residual=a["residual"], orthogonality=a["orthogonality"],
                                           mesh_residual=a.get("mesh_residual", 0.0)))
    return res, info


# ------------------------------------------------------------------ stages
def stage_loop(cfg: RunConfig, out: Path, threads: int):
    c = cfg.loop
    loop = orbits.locate_loop(cfg.model.epsilon, cfg.model.a, half_length=c.half_length or None,
                              gamma_guess=cfg.gamma_value(), tol=c.tol, mesh_tol=c.mesh_tol)
    d = out / "loop"
    loop.h1.save(d / "h1.txt")
    loop.h2.save(d / "h2.txt")
    cert = orbits.variational_kernel_certificate(loop.h1)
    summary = {
        "epsilon": loop.epsilon, "a": cfg.model.a, "gamma0": loop.gamma0, "c_star": loop.c_star,
        "alpha": loop.alpha,
        "rates": {"a1s": loop.e1.alpha_s, "a1u": loop.e1.alpha_u, "a2s": loop.e2.alpha_s, "a2u": loop.e2.alpha_u},
        "a1_holds": bool(loop.e1.a1_holds and loop.e2.a1_holds),
        "splitting_residuals": loop.splitting_residuals,
        "bvp_residual": max(loop.h1.bvp_residual, loop.h2.bvp_residual),
        "mesh_residual": max(loop.h1.mesh_residual, loop.h2.mesh_residual),
        "half_length": float(loop.h1.mesh[-1]),
        "variational_kernel_sigmas": cert,
    }
    write_json(d / "loop.json", summary)
    gates = {
        "bvp_residual": summary["bvp_residual"] <= c.residual_gate,
        "splitting_residual": float(np.max(np.abs(loop.splitting_residuals))) <= c.residual_gate,
        "leading_eigenvalues_real": summary["a1_holds"],
    }
    return ["loop/h1.txt", "loop/h2.txt", "loop/loop.json"], gates, summary


def stage_periodic(cfg: RunConfig, out: Path, threads: int):
    c = cfg.periodic
    loop = load_loop(out)
    fam = orbits.continue_periodic(loop, c.t_targets, split=c.split, tol=c.tol, mesh_tol=c.mesh_tol,
                                   threads=threads, tube_level=c.tube_level)
    d = out / "periodic"
    files, members = [], []
    for m in fam.members:
        name = f"member_T{_tag(m.T)}.txt"
        m.orbit.save(d / name)
        files.append(f"periodic/{name}")
        members.append({
            "file": name, "T": m.T, "L1": m.L1, "L2": m.L2, "mu_T": m.mu_T,
            "closure": m.orbit.meta["closure"], "bvp_residual": m.orbit.bvp_residual,
            "mesh_residual": m.orbit.mesh_residual,
            "sup_distance": orbits.sup_distance_to_loop(m, loop),
            "tube_fraction": orbits.tube_fraction(m, loop, c.tube_level),
        })
    Ls = [min(m["L1"], m["L2"]) for m in members]
    slope = log_slope(Ls, [m["sup_distance"] for m in members]) if len(members) >= 2 else float("nan")
    summary = {"members": members, "failures": {str(k): str(v) for k, v in fam.failures.items()},
               "alpha": loop.alpha, "sup_distance_slope": slope,
               "slope_bound": -c.slope_fraction * loop.alpha}
    write_json(d / "family.json", summary)
    files.append("periodic/family.json")
    gates = {
        "all_converged": not fam.failures and len(members) == len(c.t_targets),
        "bvp_residual": all(m["bvp_residual"] <= c.residual_gate for m in members),
        "closure": all(m["closure"] <= c.closure_gate for m in members),
        "sup_distance_slope": bool(slope <= summary["slope_bound"]),
    }
    return files, gates, summary


def stage_melnikov(cfg: RunConfig, out: Path, threads: int):
    c = cfg.melnikov
    loop = load_loop(out)
    psi1 = melnikov.compute_adjoint(loop.h1, loop.h2, kernel_ratio=c.kernel_ratio, seed=cfg.pipeline.seed)
    psi2 = melnikov.compute_adjoint(loop.h2, loop.h1, kernel_ratio=c.kernel_ratio, seed=cfg.pipeline.seed)
    md = melnikov.melnikov_data(psi1, psi2, loop.h1, loop.h2)
    d = out / "melnikov"
    psi1.profile.save(d / "psi1.txt")
    psi2.profile.save(d / "psi2.txt")
    errs = md.quadrature_error_estimates
    summary = {
        "M1": md.M1, "M2": md.M2, "N1": md.N1, "N2": md.N2, "det_N": md.det_N, "errors": errs,
        "psi1": {"kernel_sigmas": psi1.kernel_sigmas, "residual": psi1.residual,
                 "orthogonality": psi1.orthogonality, "mesh_residual": psi1.mesh_residual},
        "psi2": {"kernel_sigmas": psi2.kernel_sigmas, "residual": psi2.residual,
                 "orthogonality": psi2.orthogonality, "mesh_residual": psi2.mesh_residual},
    }
    write_json(d / "melnikov.json", summary)
    e1, e2 = errs["M1"], errs["M2"]
    # first-order error of the 2x2 determinant from the component errors
    n1, n2, en1, en2 = (np.abs(np.asarray(v, float)) for v in (md.N1, md.N2, errs["N1"], errs["N2"]))
    det_err = float(en1[0] * n2[1] + n1[0] * en2[1] + en1[1] * n2[0] + n1[1] * en2[0])
    gates = {
        "M1_negative": md.M1 < 0 and abs(md.M1) >= c.margin * e1,
        "M2_negative": md.M2 < 0 and abs(md.M2) >= c.margin * e2,
        "N_independent": abs(md.det_N) > 0 and abs(md.det_N) >= c.margin * det_err,
        "adjoint_residual": max(psi1.residual, psi2.residual) <= cfg.loop.residual_gate,
    }
    return ["melnikov/psi1.txt", "melnikov/psi2.txt", "melnikov/melnikov.json"], gates, summary


def stage_reduce(cfg: RunConfig, out: Path, threads: int):
    c = cfg.reduce
    loop = load_loop(out)
    fam = load_family(out, loop)
    (psi1, psi2), info = load_adjoints(out)
    md = melnikov.MelnikovData(M1=info["M1"], M2=info["M2"], N1=np.array(info["N1"]), N2=np.array(info["N2"]))
    d = out / "reduce"
    files, rows = [], []
    for m in fam:
        prod = melnikov.boundary_products(psi1, psi2, loop.h1, loop.h2, m.L1, m.L2)
        data = evans.ReducedEvansData.from_components(prod, md, equal_tol=c.equal_tol, gray=c.gray)
        curve = evans.critical_curve(data, c.xi_count)
        name = f"critical_T{_tag(m.T)}.csv"
        curve.to_csv(d / name)
        files.append(f"reduce/{name}")
        quarter = np.pi / (2.0 * m.T)
        rows.append({
            "T": m.T, "L1": m.L1, "L2": m.L2,
            "p21": data.p21, "p12m": data.p12m, "p1m": data.p1m, "p2m": data.p2m,
            "S1": data.S1, "S2": data.S2, "U1": data.U1, "U2": data.U2,
            "case_tag": data.case_tag, "gray_zone": data.gray_zone,
            "denominator_margin": data.denominator_margin(), "b": curve.b, "d": curve.d,
            "pairings": prod.pairings, "measured_rates": prod.measured_rates,
            "closed_form_quarter": [complex(evans.closed_form(s * quarter, data)) for s in (-1, 1)],
            "interaction_quarter": [evans.interaction_critical(s * quarter, data) for s in (-1, 1)],
        })
    summary = {"rates": prod.rates, "members": rows}
    write_json(d / "reduce.json", summary)
    files.append("reduce/reduce.json")
    gates = {"denominator_margin": all(r["denominator_margin"] >= c.min_margin for r in rows)}
    return files, gates, summary


def _hill_quarter(wave, K):
    """Critical Hill eigenvalues at xi = -pi/(2T), +pi/(2T) (nearest to the small cluster)."""
    out = []
    for s in (-1, 1):
        xi = s * np.pi / (2.0 * wave.T)
        vals = bloch._eig(bloch.assemble_bloch(xi, wave, K), vectors=False)[0]
        out.append(vals)
    return out


def stage_sweep(cfg: RunConfig, out: Path, threads: int):
    c = cfg.sweep
    loop = load_loop(out)
    fam = load_family(out, loop)
    d = out / "sweep"
    files, rows, sweeps = [], [], []
    for m in fam:
        wave = wave_from_orbit(m.orbit)
        K = c.modes or None
        sw = bloch.sweep(wave, c.xi_count, K, threads=threads, fit_fraction=c.fit_fraction)
        res, norm = bloch.translation_residual(wave, sw.K)
        # Hill critical eigenvalue at xi = +-pi/(2T), by continuity from the sweep's critical curve
        quarter = []
        for s, vals in zip((-1, 1), _hill_quarter(wave, sw.K)):
            xi = s * np.pi / (2.0 * wave.T)
            j = int(np.argmin(np.abs(sw.xi_grid - xi)))
            quarter.append(complex(vals[int(np.argmin(np.abs(vals - sw.lambda_c[j])))]))
        name = f"spectrum_T{_tag(m.T)}.csv"
        sw.to_csv(d / name)
        files.append(f"sweep/{name}")
        rep = {k: v for k, v in sw.report.items() if k != "gaps"}
        rep.update({"T": m.T, "L1": m.L1, "L2": m.L2, "wave_points": wave.n, "wave_residual": wave.residual,
                    "wave_speed": wave.params.c, "translation_residual": res, "translation_norm": norm,
                    "hill_quarter": quarter})
        rows.append(rep)
        sweeps.append(sw)
    alpha1s = loop.e1.alpha_s
    fit = bloch.exponential_scaling_study([r["L1"] + r["L2"] for r in rows], sweeps)
    summary = {"members": rows, "scaling_slope": fit.slope, "alpha1s": alpha1s,
               "scaling_relative_error": abs(fit.slope + alpha1s) / alpha1s,
               "scaling_residuals": fit.residuals}
    write_json(d / "sweep.json", summary)
    files.append("sweep/sweep.json")
    gates = {
        "certified": all(r["certified"] for r in rows),
        "d_positive": all(r["d"] > 0 for r in rows),
        "theta_positive": all(r["theta"] > 0 for r in rows),
        "translation_mode": all(r["translation_residual"] <= 1e-6 * r["translation_norm"] for r in rows),
        "exponential_scaling": summary["scaling_relative_error"] <= c.scaling_tol,
    }
    return files, gates, summary


def stage_evolve(cfg: RunConfig, out: Path, threads: int):
    c = cfg.evolve
    loop = load_loop(out)
    member = orbits.compute_periodic(loop, c.period)
    wave = wave_from_orbit(member.orbit)
    sw = bloch.sweep(wave, 33, threads=threads)
    length = c.cells * wave.T
    spec = pde.PerturbationSpec(shape=c.shape, amplitude=c.amplitude, center=c.center + c.offset / length,
                                width=c.width, weights=(c.weight_u, c.weight_w))
    run = pde.run_experiment(wave, spec, c.t_end, c.sampling, cells=c.cells, dt=c.dt, eps0=c.eps0, b=sw.b,
                             snapshot_times=c.snapshot_times)
    d = out / "evolve"
    files = ["evolve/timeseries.csv", "evolve/evolve.json"]
    run.to_csv(d / "timeseries.csv")
    for ts, state in sorted(run.snapshots.items()):
        name = f"snapshot_t{_tag(ts)}.txt"
        pde.save_snapshot(state, d / name)
        files.append(f"evolve/{name}")
    fits = pde.modulated_decay_report(run, t_min=c.t_min, tail_fraction=c.tail_fraction)
    damp = pde.damping_check(run)
    guard = run.meta.get("wrap_guard_time", np.inf)
    summary = {
        "meta": run.meta, "initial_norms": run.initial_norms, "fits": fits,
        "damping": {k: v for k, v in damp.items() if k != "C_running"},
        "wave": {"T": wave.T, "c": wave.params.c, "b": sw.b, "d": sw.d, "certified": sw.report["certified"]},
        "blowup": run.blowup, "message": run.message,
        "support_fraction": spec.support_fraction(length),
    }
    write_json(d / "evolve.json", summary)
    lo, hi = c.vt_exponent_range
    vt, v = fits["vt_l2"]["exponent"], fits["v_l2"]["exponent"]
    gates = {
        "no_blowup": not run.blowup,
        "wave_stable": bool(sw.report["certified"]),
        "before_wrap_around": run.meta["t_end"] <= guard,
        "vt_exponent": lo <= vt <= hi,
        "v_exponent": v <= c.v_exponent_max,
        "separation": vt - v >= c.min_separation,
        "damping_uniform": bool(damp["uniform"]),
    }
    return files, gates, summary


RUNNERS = {
    "loop": stage_loop,
    "periodic": stage_periodic,
    "melnikov": stage_melnikov,
    "reduce": stage_reduce,
    "sweep": stage_sweep,
    "evolve": stage_evolve,
}


# ------------------------------------------------------------------ report
def _load_schema() -> dict:
    return json.loads(resources.files("fhnloop").joinpath("data/report.schema.json").read_text())


def _cross_method(reduce_info, sweep_info, tol):
    """Relative gap between Hill and the reduced-determinant eigenvalues at xi = +-pi/(2T)."""
    by_T = {r["T"]: r for r in reduce_info["members"]}
    rows = []
    for s in sweep_info["members"]:
        r = by_T.get(s["T"])
        if r is None:
            continue
        hill = [complex(z["re"], z["im"]) for z in s["hill_quarter"]]
        cf = [complex(z["re"], z["im"]) for z in r["closed_form_quarter"]]
        inter = [complex(z["re"], z["im"]) for z in r["interaction_quarter"]]
        rows.append({
            "T": s["T"],
            "closed_form_rel_error": max(abs(h - q) / abs(h) for h, q in zip(hill, cf)),
            "interaction_rel_error": max(abs(h - q) / abs(h) for h, q in zip(hill, inter)),
        })
    if len(rows) < 2:
        return {"members": rows}
    rows.sort(key=lambda r: r["T"])
    first, last = rows[0], rows[-1]
    return {
        "members": rows,
        "closed_form_pass": bool(last["closed_form_rel_error"] <= tol
                                 and last["closed_form_rel_error"] <= 0.5 * first["closed_form_rel_error"]),
        "interaction_pass": bool(last["interaction_rel_error"] <= tol
                                 and last["interaction_rel_error"] <= 0.5 * first["interaction_rel_error"]),
    }


def emit_report(out, *, tol=0.2) -> dict:
    """Consolidated report.json and summary.csv from whatever stage artifacts exist."""
    import jsonschema

    out = Path(out)
    present = {s: out / s for s in STAGES if s != "report" and (out / s).is_dir() and any((out / s).iterdir())}
    if not present:
        raise FileNotFoundError(f"no stage artifacts under {out}")
    rep = {"stages": sorted(present), "certification": {}, "constants": {}, "files": {}}
    cert, const = rep["certification"], rep["constants"]
    if "loop" in present:
        info = read_json(out / "loop" / "loop.json")
        const.update({"epsilon": info["epsilon"], "a": info["a"], "gamma0": info["gamma0"],
                      "c_star": info["c_star"], "alpha": info["alpha"], **info["rates"]})
    if "melnikov" in present:
        info = read_json(out / "melnikov" / "melnikov.json")
        const.update({"M1": info["M1"], "M2": info["M2"], "det_N": info["det_N"]})
        cert["melnikov_signs"] = bool(info["M1"] < 0 and info["M2"] < 0)
    if "sweep" in present:
        info = read_json(out / "sweep" / "sweep.json")
        cert["diffusive_spectral_stability"] = all(m["certified"] for m in info["members"])
        const["b"] = {str(m["T"]): m["b"] for m in info["members"]}
        const["d"] = {str(m["T"]): m["d"] for m in info["members"]}
        const["theta"] = {str(m["T"]): m["theta"] for m in info["members"]}
        const["scaling_slope"] = info["scaling_slope"]
        if "reduce" in present:
            cm = _cross_method(read_json(out / "reduce" / "reduce.json"), info, tol)
            rep["cross_method"] = cm
            if "closed_form_pass" in cm:
                cert["closed_form_agreement"] = cm["closed_form_pass"]
                cert["interaction_determinant_agreement"] = cm["interaction_pass"]
    if "evolve" in present:
        info = read_json(out / "evolve" / "evolve.json")
        const["decay_exponents"] = {k: v["exponent"] for k, v in info["fits"].items() if isinstance(v, dict)
                                    and "exponent" in v}
        const["damping_C"] = info["damping"]["C"]
        cert["damping_uniform"] = bool(info["damping"]["uniform"])
    manifest = out / MANIFEST
    if manifest.exists():
        stages = read_json(manifest).get("stages", {})
        rep["gates"] = {name: st.get("gates", {}) for name, st in stages.items() if name != "report"}
    for stage, d in present.items():
        for path in sorted(d.iterdir()):
            if path.is_file():
                rep["files"][f"{stage}/{path.name}"] = sha256_file(path)
    rep = _clean(rep)
    jsonschema.validate(rep, _load_schema())
    (out / "report").mkdir(exist_ok=True)
    write_json(out / "report" / "report.json", rep)
    with open(out / "report" / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        for key, val in _flatten(rep["constants"]):
            writer.writerow([key, repr(val) if isinstance(val, float) else val])
        for key, val in sorted(rep["certification"].items()):
            writer.writerow([f"certified.{key}", val])
    return rep


def _flatten(d, prefix=""):
    for k in sorted(d):
        v = d[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def stage_report(cfg: RunConfig, out: Path, threads: int):
    rep = emit_report(out, tol=cfg.sweep.agreement_tol)
    gates = {"schema_valid": True}
    return ["report/report.json", "report/summary.csv"], gates, {"certification": rep["certification"]}


RUNNERS["report"] = stage_report


# ------------------------------------------------------------------ driver
class _Manifest:
    def __init__(self, out: Path):
        self.path = out / MANIFEST
        self.lock = threading.Lock()
        self.data = read_json(self.path) if self.path.exists() else {"stages": {}}

    def get(self, name):
        d = self.data["stages"].get(name)
        return StageResult.from_dict(name, d) if d else None

    def put(self, res: StageResult, cfg: RunConfig):
        with self.lock:
            self.data["stages"][res.name] = res.as_dict()
            self.data["config"] = serialize(cfg)
            tmp = self.path.with_suffix(".tmp")
            with open(tmp, "w") as fh:
                json.dump(_clean(self.data), fh, indent=2, sort_keys=True)
            tmp.replace(self.path)


def input_hash(cfg: RunConfig, stage: str, upstream: dict) -> str:
    payload = {"stage": stage, "config": cfg.subset(*STAGE_SECTIONS[stage]),
               "upstream": {d: upstream[d] for d in sorted(upstream)}}
    if stage == "melnikov":
        payload["seed"] = cfg.pipeline.seed
    return hashlib.sha256(json.dumps(_clean(payload), sort_keys=True).encode()).hexdigest()


def verify_outputs(out: Path, res: StageResult) -> None:
    for rel, digest in sorted(res.outputs.items()):
        path = out / rel
        if not path.is_file():
            raise ChecksumError(f"checkpoint file missing: {path}")
        if sha256_file(path) != digest:
            raise ChecksumError(f"checksum mismatch: {path}")


def run_pipeline(cfg: RunConfig, *, out=None, stages=None, force=False, threads=None) -> PipelineResult:
    """Run the requested stages (and the ones they need) in dependency order.

    Exit code: 0 when every gate passes, 1 on a gate failure, 3 when a stage
    fails numerically.  A failed stage skips its dependents; independent
    stages still run.
    """
    out = Path(out or cfg.pipeline.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = threads or cfg.pipeline.threads
    requested = list(stages or cfg.pipeline.stages)
    if "report" in requested:
        requested = [s for s in requested if s != "report"] + ["report"]
    manifest = _Manifest(out)
    # upstream stages that are not requested must already have a checkpoint
    order = []
    for s in dependency_closure(requested):
        if s in requested:
            order.append(s)
        elif manifest.get(s) is None or manifest.get(s).status not in ("ok", "failed"):
            raise MissingCheckpointError(f"stage {s!r} is required by {requested} but has no checkpoint in {out}")
    results = {}
    done = {}
    upstream_only = [s for s in dependency_closure(requested) if s not in requested]
    if "report" in requested:
        # existing checkpoints feed the report even when not requested
        upstream_only += [s for s in STAGES[:-1] if s not in requested and s not in upstream_only
                          and manifest.get(s) is not None and manifest.get(s).status in ("ok", "failed")]
    for s in upstream_only:
        prev = manifest.get(s)
        verify_outputs(out, prev)
        done[s] = prev

    def run_one(name):
        deps = DEPENDENCIES[name]
        if any(done[d].status == "error" or done[d].status == "skipped" for d in deps):
            return StageResult(name, "skipped", message="upstream stage failed")
        # the report reads every stage that has run
        upstream = {d: done[d].output_hash for d in (done if name == "report" else deps)}
        h = input_hash(cfg, name, upstream)
        prev = manifest.get(name)
        if not force and prev is not None and prev.input_hash == h \
                and prev.status in ("ok", "failed"):
            verify_outputs(out, prev)
            logger.info("stage %s: cache hit", name)
            return prev
        (out / name).mkdir(exist_ok=True)
        t0 = time.perf_counter()
        try:
            files, gates, summary = RUNNERS[name](cfg, out, threads)
        except NUMERICAL_ERRORS as exc:
            logger.error("stage %s failed: %s", name, exc)
            return StageResult(name, "error", input_hash=h, wall_time=time.perf_counter() - t0,
                               message=f"{type(exc).__name__}: {exc}")
        outputs = {rel: sha256_file(out / rel) for rel in files}
        gates = {k: bool(v) for k, v in gates.items()}
        status = "ok" if all(gates.values()) else "failed"
        return StageResult(name, status, gates=gates, outputs=outputs, input_hash=h,
                           wall_time=time.perf_counter() - t0, summary=_clean(summary))

    pending = list(order)
    while pending:
        ready = [s for s in pending if all(d in done for d in DEPENDENCIES[s])
                 and (s != "report" or len(pending) == 1)]
        if threads > 1 and len(ready) > 1:
            with ThreadPoolExecutor(max_workers=min(threads, len(ready))) as pool:
                batch = list(pool.map(run_one, ready))
        else:
            batch = [run_one(ready[0])]
            ready = ready[:1]
        for name, res in zip(ready, batch):
            done[name] = res
            results[name] = res
            if not res.cached and res.status != "skipped":
                manifest.put(res, cfg)
            pending.remove(name)
    statuses = [r.status for r in results.values()]
    if "error" in statuses:
        code = 3
    elif "failed" in statuses or "skipped" in statuses:
        code = 1
    else:
        code = 0
    return PipelineResult(results=results, exit_code=code, out=out)
