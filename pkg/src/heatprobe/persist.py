"""Artifact persistence: CSV tables, SVG plots and the run manifest.

All writers format numbers with repr-stable %.17g so reruns of the same
config produce byte-identical files; nothing time- or host-dependent is ever
written.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) or isinstance(x, np.floating):
        return "%.17g" % float(x)
    return str(x)


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_mesh_csv(prefix: str, grid) -> None:
    """Node table (id, x, y[, z]) and cell table (id, v0..vk, volume)."""
    axes = ["x", "y", "z"][: grid.dim]
    write_csv(prefix + "_nodes.csv", ["node"] + axes,
              [[i] + list(grid.nodes[i]) for i in range(grid.nnodes)])
    k = grid.cells.shape[1]
    write_csv(prefix + "_cells.csv", ["cell"] + [f"v{j}" for j in range(k)] + ["volume"],
              [[i] + list(grid.cells[i]) + [grid.cell_volumes[i]] for i in range(grid.ncells)])


def write_field_csv(path: str, times, history, stride: int = 1) -> None:
    """Value table: (time_index, time, node, value), sampled every ``stride``."""
    rows = []
    for n in range(0, len(times), stride):
        for i, val in enumerate(history[n]):
            rows.append([n, times[n], i, val])
    write_csv(path, ["time_index", "time", "node", "value"], rows)


def write_boundary_csv(path: str, times, flux, boundary_nodes) -> None:
    rows = []
    for n in range(flux.shape[0]):
        for j, node in enumerate(boundary_nodes):
            rows.append([n + 1, times[n + 1], int(node), flux[n, j]])
    write_csv(path, ["time_index", "time", "node", "flux"], rows)


def write_indicator_csv(path: str, samples_list) -> None:
    rows = []
    for samples in samples_list:
        for s in samples.samples:
            rows.append([s.tau, s.value, samples.mode, samples.curve_id,
                         s.residual_bound, s.abs_reference, int(s.usable),
                         s.note.replace(",", ";")])
    write_csv(path, ["tau", "I", "mode", "curve_id", "residual_bound",
                     "abs_reference", "usable", "note"], rows)


def write_slope_csv(path: str, rows) -> None:
    write_csv(path, ["curve_id", "mode", "slope_lo", "slope_hi", "slope_lsq",
                     "window_lo", "window_hi", "n_used", "classification",
                     "far_threshold", "touch_threshold"], rows)


def write_constants_csv(path: str, reports) -> None:
    rows = []
    for rep in reports:
        for tag, c in rep.levels:
            rows.append([rep.lemma_id, tag, c, rep.stability,
                         int(bool(rep.passed)), rep.n_samples, rep.n_excluded])
    write_csv(path, ["lemma_id", "level", "fitted_constant", "stability",
                     "pass", "n_samples", "n_excluded"], rows)


def write_coeff_csv(path: str, coeffs) -> None:
    write_csv(path, ["k", "c_k"], [[k, c] for k, c in enumerate(coeffs)])


def write_verdict(path: str, verdict) -> None:
    lines = [f"verdict={verdict.verdict}"]
    for key, val in sorted(verdict.thresholds.items()):
        lines.append(f"threshold.{key}={_fmt(val)}")
    for i, row in enumerate(verdict.evidence):
        for key in sorted(row):
            lines.append(f"probe{i}.{key}={row[key]}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_manifest(out_dir: str, cfg, seed: int, extra=None) -> None:
    import numpy
    import scipy

    from . import __version__
    manifest = {
        "config_sha256": cfg.sha256,
        "package_version": __version__,
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "seed": seed,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def mark_failed(out_dir: str, stage: str, message: str) -> None:
    with open(os.path.join(out_dir, "FAILED"), "w", encoding="utf-8") as fh:
        fh.write(f"stage={stage}\n{message}\n")


# ---------------------------------------------------------------------------
# SVG report
# ---------------------------------------------------------------------------


def plot_indicator_svg(path: str, samples_list, slope_rows, salt: str = "") -> None:
    """ln I vs tau with the dichotomy threshold slopes drawn as guide lines."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = salt or "heatprobe"

    fig, ax = plt.subplots(figsize=(7, 5))
    drew = False
    for samples in samples_list:
        taus, lns = [], []
        for s in samples.samples:
            if s.usable and np.isfinite(s.value) and abs(s.value) > s.floor:
                taus.append(s.tau)
                lns.append(np.log(abs(s.value)))
        if taus:
            ax.plot(taus, lns, marker="o", label=f"{samples.curve_id} [{samples.mode}]")
            drew = True
            for row in slope_rows:
                if row[0] != samples.curve_id:
                    continue
                far_thr, touch_thr = row[9], row[10]
                t0, l0 = taus[0], lns[0]
                tt = np.asarray([taus[0], taus[-1]])
                if np.isfinite(far_thr):
                    ax.plot(tt, l0 + far_thr * (tt - t0), "--", lw=0.8,
                            label=f"{samples.curve_id} far slope")
                if np.isfinite(touch_thr):
                    ax.plot(tt, l0 + touch_thr * (tt - t0), ":", lw=0.8,
                            label=f"{samples.curve_id} touch slope")
    if not drew:
        ax.text(0.5, 0.5, "no samples", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_xlabel("tau")
    ax.set_ylabel("ln |I|")
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()
