"""Experiment orchestration: config -> solves -> indicator/verification
artifacts on disk.

Stages mirror the CLI subcommands.  Reruns with the same config and seed
write byte-identical CSVs; every artifact directory carries a manifest with
the config hash and library versions, and partial failures leave a FAILED
marker naming the stage.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import configio, persist
from .conductivity import build_conductivity
from .geometry import curve_profile, validate_inclusion
from .indicator import (ProbeContext, classify_curve, detect_mismatch,
                        indicator_sweep, log_slope, ProbePlan)
from .mesh import SpaceTimeMesh
from .pde import assemble_damped_dn, neumann_trace, solve_heat
from .runge import RungeError
from .special import estimate_kappa, mu_floor


@dataclass
class Lab:
    """All standing objects of one experiment, built once from the config."""

    cfg: configio.ExperimentConfig
    dom: object
    stm: SpaceTimeMesh
    incl: object
    background: object
    b_ext: np.ndarray
    b_omega: np.ndarray
    pair: object
    curve: object
    v0: np.ndarray | None
    theta: float
    mu: float
    kappa: object  # KernelConstants
    seed: int

    @property
    def horizon(self) -> float:
        return float(self.cfg.get("experiment", "horizon", default=1.0))

    def window_times(self):
        return self.stm.times[self.stm.idx_t0:self.stm.idx_T + 1]

    def probe_context(self, curve=None, pair=None, incl=None) -> ProbeContext:
        rg = self.cfg.get("runge", default={}) or {}
        return ProbeContext(
            stm=self.stm, pair=pair or self.pair, b_ext=self.b_ext,
            incl=incl if incl is not None else self.incl,
            curve=curve or self.curve, theta=self.theta, mu=self.mu, v0=self.v0,
            kappa_hat=self.kappa.kappa_hat,
            n_space=int(rg.get("n_space", 24)), n_time=int(rg.get("n_time", 16)),
            lambda_reg=float(rg.get("lambda_reg", 1e-8)),
            residual_gate=float(rg.get("residual_gate", 0.10)),
            enforce_mu_floor=bool(self.cfg.get("probe", "enforce_mu_floor", default=True)))


def build_lab(cfg: configio.ExperimentConfig, seed: int = 0) -> Lab:
    dom = configio.build_domain(cfg)
    horizon = float(cfg.get("experiment", "horizon", default=1.0))
    theta = float(cfg.get("experiment", "theta", default=horizon / 2))
    stm = SpaceTimeMesh(dom.box, int(cfg.get("mesh", "cells", default=64)),
                        horizon=horizon,
                        nsteps_horizon=int(cfg.get("mesh", "time_steps", default=128)),
                        margin=float(cfg.get("mesh", "margin", default=0.5)))
    incl = configio.build_inclusion(cfg)
    background = configio.build_background(cfg)
    b_ext = background.on_grid(stm.grid_ext)
    b_omega = background.on_grid(stm.grid)
    fill = configio.build_fill(cfg)
    pair = build_conductivity(background, incl, fill, theta, stm.grid,
                              jump_band=cfg.get("fill", "jump_band", default=None))
    v0 = configio.build_initial(cfg, stm.grid)
    kappa = calibrate_kappa(cfg, stm, b_ext)
    mu_cfg = cfg.get("probe", "mu", default="auto")
    if mu_cfg == "auto":
        mu = 1.02 * mu_floor(kappa.kappa_hat, dom.d_omega, horizon, theta)
    else:
        mu = float(mu_cfg)
    curve = None
    if cfg.get("probe", default=None) is not None:
        curve = configio.build_curve(cfg, incl, dom)
        curve.mu = mu
    return Lab(cfg=cfg, dom=dom, stm=stm, incl=incl, background=background,
               b_ext=b_ext, b_omega=b_omega, pair=pair, curve=curve, v0=v0,
               theta=theta, mu=mu, kappa=kappa, seed=seed)


def calibrate_kappa(cfg, stm: SpaceTimeMesh, b_ext):
    """Aronson-envelope calibration on the enlarged grid (config-tunable)."""
    k = cfg.get("kernel", default={}) or {}
    dom_mid = 0.5 * (np.asarray(stm.omega.lo) + np.asarray(stm.omega.hi))
    y = np.asarray(k.get("source", dom_mid), dtype=float)
    t_samples = k.get("sample_times", [0.02, 0.04, 0.08])
    r_samples = k.get("sample_radii", [0.0, 0.1, 0.2, 0.35])
    nsteps = int(k.get("nsteps", 192))
    return estimate_kappa(b_ext, stm.grid_ext, y, t_samples, r_samples,
                          nsteps=nsteps, provenance=f"h={stm.grid_ext.h:.5g}")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_forward(lab: Lab, out: str) -> None:
    grid = lab.stm.grid
    tms = lab.window_times()
    bkind = lab.cfg.get("forward", "boundary", default="constant")
    if bkind == "constant":
        bdata = np.ones((tms.size, grid.boundary_nodes.size))
    elif bkind == "ramp":
        bdata = np.linspace(0, 1, tms.size)[:, None] * np.ones(grid.boundary_nodes.size)
    else:
        raise configio.ConfigError([f"unknown forward.boundary {bkind}"])
    v0 = lab.v0 if lab.v0 is not None else np.zeros(grid.nnodes)
    hist = solve_heat(lab.pair.a_cells, grid, tms, boundary=bdata, v0=v0)
    persist.write_mesh_csv(os.path.join(out, "mesh"), grid)
    stride = int(lab.cfg.get("output", "field_stride", default=max(1, tms.size // 9)))
    persist.write_field_csv(os.path.join(out, "forward_field.csv"), tms, hist, stride=stride)
    flux = neumann_trace(hist, lab.pair.a_cells, 0.0, grid, tms)
    persist.write_boundary_csv(os.path.join(out, "forward_flux.csv"), tms, flux,
                               grid.boundary_nodes)


def stage_dnmap(lab: Lab, out: str) -> None:
    grid = lab.stm.grid
    tms = lab.window_times()
    taus = lab.cfg.get("sweep", "taus", default=[8.0])
    v0 = lab.v0 if lab.v0 is not None else np.zeros(grid.nnodes)
    # documented probe datum: first nontrivial trace mode times a mid-window tent
    from .runge import boundary_basis
    nt = _compatible_nt(tms.size - 1, 8)
    basis = boundary_basis(grid, 2, nt, tms)
    coeff = np.zeros((2, nt))
    coeff[1, nt // 2] = 1.0
    f = basis.boundary_data(coeff.ravel())
    rows = []
    for tau in taus:
        dn = assemble_damped_dn(lab.pair.a_cells, v0, float(tau), grid, tms,
                                horizon=lab.horizon)
        flux = dn.apply(f)
        offset = dn.apply(None)
        for n in range(flux.shape[0]):
            for j, node in enumerate(grid.boundary_nodes):
                rows.append([tau, n + 1, int(node), flux[n, j], offset[n, j]])
    persist.write_csv(os.path.join(out, "dnmap_flux.csv"),
                      ["tau", "time_index", "node", "flux", "offset_flux"], rows)


def stage_probe(lab: Lab, out: str) -> None:
    if lab.curve is None:
        raise configio.ConfigError(["probe stage needs a [probe] section"])
    rep = validate_inclusion(lab.incl, lab.dom, seed=lab.seed) if lab.incl else None
    prof = curve_profile(lab.curve, lab.incl) if lab.incl else None
    persist.write_csv(os.path.join(out, "curve.csv"),
                      ["t"] + [f"y{d}" for d in range(lab.dom.dim)],
                      [[t] + list(p) for t, p in zip(lab.curve.times, lab.curve.points)])
    if prof is not None:
        persist.write_csv(os.path.join(out, "profile.csv"), ["t", "d"],
                          [[t, d] for t, d in zip(prof.times, prof.d_of_t)])
    if rep is not None:
        persist.write_csv(os.path.join(out, "geometry_report.csv"),
                          ["k_d", "rho", "l_d", "h1", "h2", "h3a", "h3b"],
                          [[rep.k_d, rep.rho, rep.l_d, int(rep.h1_ok), int(rep.h2_ok),
                            int(rep.h3a_ok), int(rep.h3b_ok)]])


def _compatible_nt(nsteps: int, want: int) -> int:
    nt = min(want, nsteps)
    while nsteps % nt != 0:
        nt -= 1
    return max(nt, 1)


def _sweep_one(args):
    text, seed, taus, mode = args
    cfg = configio.ExperimentConfig(raw=_loads(text), text=text)
    lab = build_lab(cfg, seed=seed)
    ctx = lab.probe_context()
    sw = indicator_sweep(ctx, taus, mode=mode)
    return [(s.tau, s.value, s.abs_reference, s.residual_bound, s.usable, s.note)
            for s in sw.samples]


def _loads(text: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text)


def stage_indicator(lab: Lab, out: str, jobs: int = 1):
    from .indicator import IndicatorSample, IndicatorSamples
    taus = [float(t) for t in lab.cfg.get("sweep", "taus", default=[8.0, 10.0, 12.0])]
    mode = lab.cfg.get("sweep", "mode", default="volume")
    if jobs > 1 and len(taus) > 1:
        chunks = [taus[i::jobs] for i in range(jobs)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(chunks)) as ex:
            parts = list(ex.map(_sweep_one, [(lab.cfg.text, lab.seed, c, mode)
                                             for c in chunks]))
        flat = sorted((row for part in parts for row in part), key=lambda r: r[0])
        samples = [IndicatorSample(tau=r[0], value=r[1], abs_reference=r[2],
                                   residual_bound=r[3], usable=r[4], note=r[5])
                   for r in flat]
        sw = IndicatorSamples(samples=samples, mode=mode, curve_id=lab.curve.label)
    else:
        sw = indicator_sweep(lab.probe_context(), taus, mode=mode)
    persist.write_indicator_csv(os.path.join(out, "indicator.csv"), [sw])

    slopes = log_slope(sw, window_frac=float(lab.cfg.get("slopes", "window_frac", default=0.4)),
                       k_min=int(lab.cfg.get("slopes", "k_min", default=5)))
    prof = curve_profile(lab.curve, lab.incl) if lab.incl is not None else None
    cls = classify_curve(slopes, lab.kappa, prof, lab.curve.alpha, lab.curve.epsilon,
                         lab.mu, tol=float(lab.cfg.get("slopes", "tol", default=0.25)))
    persist.write_slope_csv(os.path.join(out, "slopes.csv"),
                            [[sw.curve_id, sw.mode, slopes.slope_lo, slopes.slope_hi,
                              slopes.slope_lsq, slopes.window[0], slopes.window[1],
                              slopes.n_used, cls.label, cls.far_threshold,
                              cls.touch_threshold]])
    return sw, slopes, cls


def stage_verify(lab: Lab, out: str):
    from .lemma_suite import run_lemma_suite
    reports = run_lemma_suite(lab)
    persist.write_constants_csv(os.path.join(out, "constants.csv"), reports)
    return reports


def stage_detect(lab: Lab, out: str):
    """Mismatch detection between the primary inclusion and [inclusion_b]."""
    from .geometry import build_curve_family
    cfg = lab.cfg
    incl_b = configio.build_inclusion(cfg, section="inclusion_b")
    if incl_b is None:
        raise configio.ConfigError(["detect stage needs an [inclusion_b] section"])
    fill_b = configio.build_fill(cfg, section="fill_b") if cfg.get("fill_b") else \
        configio.build_fill(cfg)
    pair_b = build_conductivity(lab.background, incl_b, fill_b, lab.theta, lab.stm.grid)
    v0_b = lab.v0
    if cfg.get("initial_b") is not None:
        import copy
        cfg_b = copy.copy(cfg)
        v0_b = configio.build_initial(
            configio.ExperimentConfig(raw={"initial": cfg.get("initial_b")},
                                      text=cfg.text), lab.stm.grid)
    probes = []
    for spec in cfg.get("detect", "probes", default=[]) or []:
        curve = build_curve_family(np.asarray(spec["z"], dtype=float), lab.theta,
                                   float(spec["alpha"]), float(spec["epsilon"]),
                                   lab.incl, lab.dom, other=incl_b,
                                   boundary_tol=float(spec.get("boundary_tol", 1e-6)))
        curve.mu = lab.mu
        probes.append(ProbePlan(curve=curve, alpha=float(spec["alpha"]),
                                epsilon=float(spec["epsilon"]),
                                label=spec.get("label", f"probe{len(probes)}")))
    ctx_a = lab.probe_context()
    ctx_b = lab.probe_context(pair=pair_b, incl=incl_b)
    ctx_b.v0 = v0_b
    taus = [float(t) for t in cfg.get("sweep", "taus", default=[16.0, 18.0, 20.0])]
    verdict = detect_mismatch(ctx_a, ctx_b, probes, taus, lab.kappa,
                              tol=float(cfg.get("slopes", "tol", default=0.25)))
    persist.write_verdict(os.path.join(out, "verdict.txt"), verdict)
    return verdict


STAGES = ("forward", "dnmap", "probe", "indicator", "verify", "detect")


def run_experiment(cfg: configio.ExperimentConfig, out_dir: str, seed: int = 0,
                   jobs: int = 1, stage: str | None = None) -> str:
    """Run the configured stages, persist artifacts, return the artifact dir."""
    os.makedirs(out_dir, exist_ok=True)
    stages = [stage] if stage else list(cfg.get("experiment", "stages",
                                                default=["indicator"]))
    persist.write_manifest(out_dir, cfg, seed, extra={"stages": stages})
    lab = build_lab(cfg, seed=seed)
    for st in stages:
        if st not in STAGES:
            raise configio.ConfigError([f"unknown stage {st}"])
        try:
            if st == "forward":
                stage_forward(lab, out_dir)
            elif st == "dnmap":
                stage_dnmap(lab, out_dir)
            elif st == "probe":
                stage_probe(lab, out_dir)
            elif st == "indicator":
                stage_indicator(lab, out_dir, jobs=jobs)
            elif st == "verify":
                stage_verify(lab, out_dir)
            elif st == "detect":
                stage_detect(lab, out_dir)
        except Exception as exc:
            persist.mark_failed(out_dir, st, f"{type(exc).__name__}: {exc}")
            raise
    return out_dir


def emit_report(artifact_dir: str) -> list:
    """SVG plot + summary table from a finished artifact directory."""
    from .indicator import IndicatorSample, IndicatorSamples
    missing = []
    outputs = []
    ind_path = os.path.join(artifact_dir, "indicator.csv")
    slope_path = os.path.join(artifact_dir, "slopes.csv")
    samples_list = []
    slope_rows = []
    if os.path.exists(ind_path):
        samples_list = _read_indicator_csv(ind_path)
    else:
        missing.append("indicator.csv")
    if os.path.exists(slope_path):
        with open(slope_path, encoding="utf-8") as fh:
            header = fh.readline()
            for line in fh:
                parts = line.strip().split(",")
                slope_rows.append([parts[0], parts[1]] + [float(x) for x in parts[2:8]]
                                  + [parts[8], float(parts[9]), float(parts[10])])
    salt = ""
    man_path = os.path.join(artifact_dir, "manifest.json")
    if os.path.exists(man_path):
        with open(man_path, encoding="utf-8") as fh:
            salt = json.load(fh).get("config_sha256", "")
    svg = os.path.join(artifact_dir, "indicator.svg")
    persist.plot_indicator_svg(svg, samples_list, slope_rows, salt=salt)
    outputs.append(svg)
    summary = os.path.join(artifact_dir, "summary.csv")
    rows = []
    for samples in samples_list:
        vals = [s.value for s in samples.samples if s.usable and np.isfinite(s.value)]
        rows.append([samples.curve_id, samples.mode, len(samples.samples),
                     len(vals), min(vals) if vals else math.nan,
                     max(vals) if vals else math.nan])
    if missing:
        rows.append(["MISSING:" + ";".join(missing), "", 0, 0, math.nan, math.nan])
    persist.write_csv(summary, ["curve_id", "mode", "n_samples", "n_usable",
                                "min_I", "max_I"], rows)
    outputs.append(summary)
    return outputs


def _read_indicator_csv(path: str):
    from .indicator import IndicatorSample, IndicatorSamples
    groups = {}
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            parts = line.rstrip("\n").split(",")
            if len(parts) < 8:
                continue
            tau, val, mode, curve_id, rb, ar, usable, note = parts[:8]
            key = (curve_id, mode)
            groups.setdefault(key, []).append(IndicatorSample(
                tau=float(tau), value=float(val), abs_reference=float(ar),
                residual_bound=float(rb), usable=bool(int(usable)), note=note))
    out = []
    for (curve_id, mode), samples in sorted(groups.items()):
        samples.sort(key=lambda s: s.tau)
        out.append(IndicatorSamples(samples=samples, mode=mode, curve_id=curve_id))
    return out
