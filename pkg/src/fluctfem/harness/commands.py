"""Implementation of the ``run``, ``verify``, ``sweep`` and ``analyze`` commands."""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import decorrelate, integrator, noise, oracle, spectra
from ..assembly import SystemMatrices, assemble
from ..fourth_order import MixedSystem, assemble_mixed, run_mixed
from ..mesh import build_mesh
from .config import ConfigError, RunConfig, SweepConfig, load_run_config

VERIFY_MAX_DOF = 64
ORACLE_MAX_DOF = 1024


# model construction ----------------------------------------------------------


@dataclass
class Model:
    config: RunConfig
    mats: SystemMatrices
    system: SystemMatrices | MixedSystem
    dmap: decorrelate.DecorrelationMap

    @property
    def dx(self) -> float:
        return self.mats.mesh.node_spacing

    @property
    def k0(self):
        return self.system.k0 if isinstance(self.system, MixedSystem) else None

    def raw_weights(self):
        return self.mats.periodic_volumes()

    def reference(self, k, mapped: bool):
        """Reference spectrum: Lorentzian (fourth order), the p1 FE spectrum (raw p1) or flat ``u0``."""
        c = self.config
        if c.model == "fourth_order":
            return spectra.theory_lorentzian(c.u0, k, self.k0)
        if not mapped and c.p == 1:
            return spectra.theory_fe_p1(c.u0, np.asarray(k) * self.dx)
        return spectra.theory_continuum(c.u0, k)

    def relaxation_rate(self, k: float) -> float:
        g = 1.0 if self.k0 is None else 1.0 + (k / self.k0) ** 2
        return self.config.D_coeff * k**2 * g

    def forcing_covariance(self):
        return 2.0 * self.config.u0 * self.mats.diffusion


def build_model(config: RunConfig) -> Model:
    mesh = build_mesh(config.L, config.N_e, config.p)
    if config.model == "fourth_order":
        system = assemble_mixed(mesh, config.D_coeff, config.ell0)
        mats = system.base
    else:
        mats = assemble(mesh, config.D_coeff, periodic_mode=config.periodic_mode)
        system = mats
    return Model(config, mats, system, decorrelate.build_map(mats, config.epsilon))


def integrator_config(config: RunConfig) -> integrator.IntegratorConfig:
    return integrator.IntegratorConfig(
        config.alpha, config.dt, config.N_t, config.N_burn, config.thinning, config.seed
    )


# run ---------------------------------------------------------------------------


@dataclass
class RunResult:
    directory: Path
    raw: spectra.SpectrumResult
    mapped: spectra.SpectrumResult
    diagnostics: dict
    trajectory: integrator.Trajectory
    dynamic: spectra.DynamicSpectrumResult | None = None


class _Observer:
    def __init__(self, model: Model, track=()):
        m = model
        self.mats = m.mats
        self.Q = m.dmap.Q
        self.raw = spectra.SpectrumAccumulator(m.raw_weights(), m.config.L, m.dx, track=track)
        self.mapped = spectra.SpectrumAccumulator(m.dmap.volumes_tilde, m.config.L, m.dx, track=track)

    def __call__(self, u):
        v = self.mats.periodic_values(u)
        self.raw.update(v)
        self.mapped.update(self.Q @ v)

    def update_many(self, states):
        v = self.mats.periodic_values(np.asarray(states, dtype=float))
        self.raw.update_many(v)
        self.mapped.update_many((self.Q @ v.T).T)


def _spectrum_errors(model: Model, raw, mapped) -> tuple[float, float]:
    if len(raw.k) < 2:
        return math.nan, math.nan
    e_raw = spectra.error_metric(raw.values[1:], model.reference(raw.k[1:], False))
    e_map = spectra.error_metric(mapped.values[1:], model.reference(mapped.k[1:], True))
    return e_raw, e_map


def _write_spectra(model: Model, out: Path, obs: _Observer) -> dict:
    c = model.config
    raw = obs.raw.static()
    mapped = obs.mapped.static()
    spectra.write_spectrum_csv(out / "spectrum_raw.csv", raw, model.reference(raw.k, False))
    spectra.write_spectrum_csv(out / "spectrum_mapped.csv", mapped, model.reference(mapped.k, True))
    res = {"raw": raw, "mapped": mapped, "dynamic": None}
    if c.dyn_mode is not None:
        lag = c.dt * c.thinning
        for name, acc, mapped_flag in (("spectrum_dyn.csv", obs.raw, False), ("spectrum_dyn_mapped.csv", obs.mapped, True)):
            dyn = acc.dynamic(c.dyn_mode, c.dyn_max_lag, lag)
            s0 = model.reference(np.array([dyn.k]), mapped_flag)[0]
            ref = s0 * np.exp(-model.relaxation_rate(dyn.k) * dyn.tau)
            spectra.write_dynamic_csv(out / name, dyn, ref)
            if not mapped_flag:
                res["dynamic"] = dyn
    return res


def _write_diagnostics(path: Path, diag: dict) -> None:
    with open(path, "w") as fh:
        for key, v in diag.items():
            fh.write(f"{key} = {v!r}\n" if isinstance(v, float) else f"{key} = {v}\n")


def cmd_run(config: RunConfig, directory=None) -> RunResult:
    """Simulate, stream the raw and decorrelated spectra and write the run directory."""
    out = Path(directory) if directory is not None else config.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(config.echo())

    model = build_model(config)
    nm = noise.make_noise_model(model.mats, config.noise, config.u0)
    track = () if config.dyn_mode is None else (config.dyn_mode,)
    if config.dyn_mode is not None and config.dyn_mode > model.mats.periodic_volumes().size // 2:
        raise ConfigError("mode index exceeds the retained range", "dyn_mode")
    obs = _Observer(model, track)
    icfg = integrator_config(config)
    kwargs = dict(observers=(obs,), store_states=config.export_states)
    if isinstance(model.system, MixedSystem):
        traj = run_mixed(model.system, nm, icfg, config.u0, **kwargs)
    else:
        traj = integrator.run(model.mats, nm, icfg, config.u0, **kwargs)

    traj.write_csv(out / "mass.csv", include_states=False)
    if config.export_states:
        traj.write_csv(out / "trajectory.csv", include_states=True)
    res = _write_spectra(model, out, obs)
    raw, mapped = res["raw"], res["mapped"]
    if not (np.all(np.isfinite(raw.values)) and np.all(np.isfinite(mapped.values))):
        raise FloatingPointError("structure factor overflowed; check u0 and the noise amplitude")
    e_raw, e_map = _spectrum_errors(model, raw, mapped)

    mass0 = config.u0 * config.L
    diag = {
        "n_dof": model.mats.periodic_volumes().size,
        "n_burn": traj.diagnostics["n_burn"],
        "n_steps": traj.diagnostics["n_steps"],
        "n_samples": len(traj),
        "beta": config.D_coeff * config.dt / model.dx**2,
        "mass_mean": float(np.mean(traj.mass)) if len(traj) else math.nan,
        "mass_std": traj.diagnostics["mass_std"],
        "mass_std_relative": traj.diagnostics["mass_std"] / mass0,
        "clamp_count": traj.diagnostics["clamp_count"],
        "correlation_time_samples": obs.raw.correlation_time(),
        "batch_length": raw.metadata["batch_length"],
        "n_batches": raw.n_batches,
        "reliable": raw.reliable,
        "e_FE_raw": e_raw,
        "e_FE_mapped": e_map,
        "nnz_Q": model.dmap.nnz,
        "epsilon": config.epsilon,
        "wall_time": traj.diagnostics["wall_time"],
    }
    if "max_constraint_residual" in traj.diagnostics:
        diag["max_constraint_residual"] = traj.diagnostics["max_constraint_residual"]
    _write_diagnostics(out / "diagnostics.txt", diag)
    return RunResult(out, raw, mapped, diag, traj, res["dynamic"])


# analyze -------------------------------------------------------------------------


def cmd_analyze(run_dir, out_dir=None) -> dict:
    """Recompute the spectra of a run from its stored ``trajectory.csv``."""
    run_dir = Path(run_dir)
    config = load_run_config(run_dir / "config.echo")
    traj_path = run_dir / "trajectory.csv"
    if not traj_path.exists():
        raise ConfigError(f"{traj_path} not found; rerun with export_states = true")
    traj = integrator.Trajectory.read_csv(traj_path, dt=config.dt, thinning=config.thinning)
    if traj.states is None:
        raise ConfigError(f"{traj_path} holds no state columns")
    model = build_model(config)
    track = () if config.dyn_mode is None else (config.dyn_mode,)
    obs = _Observer(model, track)
    obs.update_many(traj.states)
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    res = _write_spectra(model, out, obs)
    res["e_FE_raw"], res["e_FE_mapped"] = _spectrum_errors(model, res["raw"], res["mapped"])
    return res


# verify ----------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        s = f"{tag} {self.name}: {self.value:.3e} (limit {self.threshold:.1e})"
        return f"{s} {self.detail}" if self.detail else s


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def text(self) -> str:
        return "\n".join(c.line() for c in self.checks) + "\n"


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def fdt_covariance(model: Model) -> np.ndarray:
    """``u0 M^-1`` (second order) or ``u0 (M + c K)^-1`` (fourth order)."""
    M = model.mats.mass.toarray()
    if isinstance(model.system, MixedSystem):
        M = M + model.system.coupling * model.system.stiffness.toarray()
    return model.config.u0 * np.linalg.inv(M)


def cmd_verify(config: RunConfig) -> VerifyReport:
    """Oracle checks on a small mesh; raises nothing for failed checks (see ``report.passed``)."""
    if config.periodic_mode != "wrapped":
        raise ConfigError("verify needs periodic_mode = wrapped", "periodic_mode")
    model = build_model(config)
    sysm, mats, c = model.system, model.mats, config
    if mats.n_dof > VERIFY_MAX_DOF:
        raise ConfigError(f"verify is limited to {VERIFY_MAX_DOF} degrees of freedom, got {mats.n_dof}", "N_e")
    if c.alpha > 0.5:
        integrator.check_stability(sysm.operator, mats.mass, c.alpha, c.dt, model.dx, c.D_coeff)
    cff = model.forcing_covariance()
    mv = c.u0 * c.L
    target = fdt_covariance(model)
    rep = VerifyReport()

    half = oracle.steady_covariance(sysm, 0.5, c.dt, cff, mass_variance=mv)
    rep.checks.append(Check("fdt_exact", _rel(half.C, target) <= 1e-8, _rel(half.C, target), 1e-8))

    others = [oracle.steady_covariance(sysm, 0.5, c.dt * f, cff, mass_variance=mv).C for f in (0.1, 10.0)]
    d = max(_rel(C, half.C) for C in others)
    rep.checks.append(Check("dt_independence", d <= 1e-10, d, 1e-10, "dt x {0.1, 10}"))

    pred = oracle.steady_covariance(sysm, c.alpha, c.dt, cff, mass_variance=mv)
    r = oracle.balance_residual(sysm, pred.C, c.alpha, c.dt, cff)
    rep.checks.append(Check("balance_residual", r <= 1e-9, r, 1e-9, f"alpha={c.alpha}"))

    dt_max = integrator.stability_limit(sysm.operator, mats.mass, 1.0)
    dt_ord = min(c.dt, 0.5 * dt_max)
    w = mats.periodic_volumes()
    S = [
        oracle.spectrum_from_covariance(
            oracle.steady_covariance(sysm, a, dt_ord, cff, mass_variance=mv).C, w, c.L
        ).values[-3:]
        for a in (0.0, 0.5, 1.0)
    ]
    gap = float(min(np.min((S[1] - S[0]) / S[1]), np.min((S[2] - S[1]) / S[1])))
    rep.checks.append(
        Check("alpha_ordering", gap > 0, gap, 0.0, f"beta={c.D_coeff * dt_ord / model.dx**2:.4g}")
    )

    if not isinstance(sysm, MixedSystem):
        Cm = oracle.mapped_covariance(half.C, model.dmap.Q_dense)
        dg = np.sqrt(np.outer(np.diag(Cm), np.diag(Cm)))
        off = np.abs(Cm) / dg
        np.fill_diagonal(off, 0.0)
        leak = float(off.max())
        rep.checks.append(Check("mapped_diagonality", leak <= 1e-9, leak, 1e-9))

    dense = decorrelate.build_map(mats, 0.0)
    if c.epsilon > 0:
        S0 = oracle.spectrum_from_covariance(oracle.mapped_covariance(half.C, dense.Q_dense), dense.volumes_tilde, c.L)
        Se = oracle.spectrum_from_covariance(
            oracle.mapped_covariance(half.C, model.dmap.Q), model.dmap.volumes_tilde, c.L
        )
        change = float(np.max(np.abs(Se.values - S0.values) / np.abs(S0.values)))
        rep.checks.append(Check("sparsification_spectrum", change <= 1e-3, change, 1e-3, f"epsilon={c.epsilon:g}"))
        leak = decorrelate.decorrelation_residual(model.dmap, mats)
        if not isinstance(sysm, MixedSystem):
            rep.checks.append(Check("sparsification_leakage", leak <= 1e-3, leak, 1e-3, f"epsilon={c.epsilon:g}"))
    return rep


# sweep --------------------------------------------------------------------------------

SWEEP_COLUMNS = [
    "cell", "model", "p", "N_e", "alpha", "dt", "dx_over_ell0", "replicate", "seed",
    "n_dof", "beta", "e_FE", "e_FE_mapped", "expected_e_FE", "nnz_Q", "nnz_Q_per_dof",
    "slope_eFE_vs_Ne", "slope_expected_eFE_vs_Ne", "slope_nnzQ_vs_Ndof", "nnz_ratio", "status",
]


def sweep_cells(sweep: SweepConfig) -> list[tuple[int, RunConfig, dict]]:
    base = sweep.base
    names = list(sweep.axes)
    cells = []
    combos = itertools.product(*(sweep.axes[n] for n in names)) if names else [()]
    idx = 0
    for combo in combos:
        params = dict(zip(names, combo))
        for rep in range(sweep.replications):
            changes = {k: v for k, v in params.items() if k != "dx_over_ell0"}
            changes["seed"] = base.seed + idx
            if "dx_over_ell0" in params:
                n_e = changes.get("N_e", base.N_e)
                dx = base.L / (n_e * base.p)
                changes["ell0"] = dx / params["dx_over_ell0"]
            if base.output:
                changes["output"] = None
            cfg = base.replace(**changes)
            cells.append((idx, cfg, {"replicate": rep, "dx_over_ell0": params.get("dx_over_ell0")}))
            idx += 1
    return cells


def _oracle_cell(config: RunConfig) -> dict:
    model = build_model(config)
    sysm, mats = model.system, model.mats
    if mats.n_dof > ORACLE_MAX_DOF:
        raise ConfigError(f"oracle cells are limited to {ORACLE_MAX_DOF} degrees of freedom")
    if config.alpha > 0.5:
        integrator.check_stability(sysm.operator, mats.mass, config.alpha, config.dt, model.dx, config.D_coeff)
    C = oracle.steady_covariance(sysm, config.alpha, config.dt, model.forcing_covariance()).C
    w = mats.periodic_volumes()
    raw = oracle.spectrum_from_covariance(C, w, config.L, model.dx)
    mapped = oracle.spectrum_from_covariance(
        oracle.mapped_covariance(C, model.dmap.Q), model.dmap.volumes_tilde, config.L, model.dx
    )
    e_raw, e_map = _spectrum_errors(model, raw, mapped)
    std = oracle.estimator_std(sysm, config.alpha, config.dt, C, w, config.L, config.N_t // config.thinning, config.thinning)
    expected = oracle.expected_error_metric(std, model.reference(raw.k, False))
    return {"e_FE": e_raw, "e_FE_mapped": e_map, "expected_e_FE": expected}


def _run_cell(args) -> dict:
    idx, config, extra, mode, root = args
    row = {
        "cell": idx, "model": config.model, "p": config.p, "N_e": config.N_e, "alpha": config.alpha,
        "dt": config.dt, "dx_over_ell0": extra["dx_over_ell0"], "replicate": extra["replicate"],
        "seed": config.seed, "status": "ok",
    }
    try:
        n_dof = config.N_e * config.p
        dx = config.L / n_dof
        row["n_dof"] = n_dof
        row["beta"] = config.D_coeff * config.dt / dx**2
        if mode == "oracle":
            model = build_model(config)
            row.update(_oracle_cell(config))
        else:
            res = cmd_run(config, Path(root) / f"cell_{idx:03d}")
            row.update(e_FE=res.diagnostics["e_FE_raw"], e_FE_mapped=res.diagnostics["e_FE_mapped"])
            model = build_model(config)
        row["nnz_Q"] = model.dmap.nnz
        row["nnz_Q_per_dof"] = model.dmap.nnz / n_dof
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def loglog_slope(x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if len(np.unique(x[ok])) < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _aggregate(rows: list[dict]) -> list[dict]:
    groups: dict = {}
    for r in rows:
        key = (r["model"], r["p"], r["alpha"], r["dt"], r["dx_over_ell0"])
        groups.setdefault(key, []).append(r)
    out = []
    for key, members in groups.items():
        ok = [r for r in members if r["status"] == "ok"]

        def col(name):
            return [r.get(name, math.nan) for r in ok]

        ratio = col("nnz_Q_per_dof")
        agg = {
            "slope_eFE_vs_Ne": loglog_slope(col("N_e"), col("e_FE")),
            "slope_expected_eFE_vs_Ne": loglog_slope(col("N_e"), col("expected_e_FE")),
            "slope_nnzQ_vs_Ndof": loglog_slope(col("n_dof"), col("nnz_Q")),
            "nnz_ratio": max(ratio) / min(ratio) if ratio else math.nan,
        }
        for r in members:
            r.update(agg)
        summary = dict(zip(("model", "p", "alpha", "dt", "dx_over_ell0"), key))
        summary.update(agg, cell="aggregate", status=f"{len(ok)}/{len(members)} ok")
        out.append(summary)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_sweep(sweep: SweepConfig, directory=None) -> Path:
    """Run every cell (oracle or simulation) and write ``sweep.csv``; returns its path."""
    root = Path(directory) if directory is not None else sweep.base.run_dir()
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(i, cfg, extra, sweep.sweep_mode, str(root)) for i, cfg, extra in sweep_cells(sweep)]
    if sweep.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=sweep.workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    summaries = _aggregate(rows)
    path = root / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows + summaries:
            w.writerow([_fmt(r.get(c)) for c in SWEEP_COLUMNS])
    return path


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SWEEP_COLUMNS:
            raise ValueError(f"{path}: unexpected header")
        return [dict(zip(header, row)) for row in reader]
