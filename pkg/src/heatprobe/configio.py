"""Experiment configuration: a flat TOML document validated up front.

Invalid configs are rejected with the full list of violations so a batch user
sees every problem at once.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .geometry import (ClippedDisc, ConvexPolygon, Disc, Domain, Ellipse,
                       MovingInclusion, MovingShape, ProbeCurve)
from .mesh import Box


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n  - " + "\n  - ".join(self.violations))


@dataclass
class ExperimentConfig:
    raw: dict
    text: str = ""

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def get(self, *keys, default=None):
        cur = self.raw
        for k in keys:
            if not isinstance(cur, dict) or k not in cur:
                return default
            cur = cur[k]
        return cur


def load_config(path: str) -> ExperimentConfig:
    with open(path, "rb") as fh:
        text = fh.read()
    raw = tomllib.loads(text.decode())
    cfg = ExperimentConfig(raw=raw, text=text.decode())
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def validate_config(cfg: ExperimentConfig) -> list:
    v = []
    dim = cfg.get("experiment", "dim", default=2)
    if dim not in (2, 3):
        v.append("experiment.dim must be 2 or 3")
    horizon = cfg.get("experiment", "horizon", default=1.0)
    if not horizon > 0:
        v.append("experiment.horizon must be positive")
    theta = cfg.get("experiment", "theta", default=horizon / 2 if horizon > 0 else 0.5)
    if not (0 < theta < horizon):
        v.append("experiment.theta must lie strictly inside (0, horizon)")
    cells = cfg.get("mesh", "cells", default=64)
    steps = cfg.get("mesh", "time_steps", default=128)
    if cells < 8:
        v.append("mesh.cells must be >= 8")
    if steps < 8:
        v.append("mesh.time_steps must be >= 8")
    if steps > 0 and horizon > 0:
        dt = horizon / steps
        k = theta / dt
        if abs(k - round(k)) > 1e-9:
            v.append("experiment.theta must land on the time grid (theta/dt integral)")
    lo = cfg.get("domain", "lo", default=[0.0] * dim)
    hi = cfg.get("domain", "hi", default=[1.0] * dim)
    if len(lo) != dim or len(hi) != dim or any(b <= a for a, b in zip(lo, hi)):
        v.append("domain.lo/hi must define a nonempty box of the right dimension")
    taus = cfg.get("sweep", "taus", default=[])
    if taus:
        if any(t2 <= t1 for t1, t2 in zip(taus, taus[1:])):
            v.append("sweep.taus must be strictly increasing")
        h = (hi[0] - lo[0]) / cells if cells else 1.0
        if max(taus) > 0.5 / h:
            v.append(f"sweep.taus exceed the mesh-resolvable cap 0.5/h = {0.5/h:.1f}")
    for i, shape in enumerate(cfg.get("inclusion", "shapes", default=[]) or []):
        if shape.get("kind") not in ("disc", "ellipse", "polygon", "clipped_disc"):
            v.append(f"inclusion.shapes[{i}].kind unknown")
    mode = cfg.get("sweep", "mode", default="volume")
    if mode not in ("volume", "boundary"):
        v.append("sweep.mode must be volume or boundary")
    return v


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_domain(cfg: ExperimentConfig) -> Domain:
    dim = cfg.get("experiment", "dim", default=2)
    lo = tuple(cfg.get("domain", "lo", default=[0.0] * dim))
    hi = tuple(cfg.get("domain", "hi", default=[1.0] * dim))
    return Domain(Box(lo, hi))


def _build_shape(spec: dict, dim: int):
    kind = spec["kind"]
    if kind == "disc":
        return Disc(spec["radius"], dim=dim)
    if kind == "ellipse":
        return Ellipse(spec["a"], spec["b"])
    if kind == "polygon":
        return ConvexPolygon(spec["vertices"])
    if kind == "clipped_disc":
        return ClippedDisc(spec["radius"], spec["normal"], spec["cut"])
    raise ConfigError([f"unknown shape kind {kind}"])


def build_inclusion(cfg: ExperimentConfig, section: str = "inclusion") -> MovingInclusion | None:
    dim = cfg.get("experiment", "dim", default=2)
    horizon = cfg.get("experiment", "horizon", default=1.0)
    shapes = cfg.get(section, "shapes", default=[]) or []
    moving = []
    for spec in shapes:
        shape = _build_shape(spec, dim)
        if "path" in spec:
            path = [(float(row[0]), tuple(row[1:])) for row in spec["path"]]
        else:
            path = [(0.0, tuple(spec.get("center", [0.0] * dim)))]
        active = tuple(spec["active"]) if "active" in spec else None
        moving.append(MovingShape(shape, path, active=active))
    if not moving:
        return None
    return MovingInclusion(moving, (0.0, horizon))


def build_background(cfg: ExperimentConfig):
    from .conductivity import BackgroundField
    dim = cfg.get("experiment", "dim", default=2)
    kind = cfg.get("background", "kind", default="homogeneous")
    if kind == "homogeneous":
        return BackgroundField(np.eye(dim), dim=dim)
    if kind == "contrast":
        contrast = cfg.get("background", "contrast", default=4.0)
        center = np.asarray(cfg.get("background", "region_center", default=[0.25] * dim))
        radius = cfg.get("background", "region_radius", default=0.15)

        def region(x, c=center, r=radius):
            return float(np.linalg.norm(np.asarray(x) - c)) <= r

        return BackgroundField(np.eye(dim), [(region, contrast * np.eye(dim))], dim=dim)
    if kind == "matrix":
        return BackgroundField(np.asarray(cfg.get("background", "matrix")), dim=dim)
    raise ConfigError([f"unknown background kind {kind}"])


def build_fill(cfg: ExperimentConfig, section: str = "fill"):
    dim = cfg.get("experiment", "dim", default=2)
    mat = cfg.get(section, "matrix", default=None)
    if mat is not None:
        return np.asarray(mat, dtype=float)
    return float(cfg.get(section, "value", default=2.0)) * np.eye(dim)


def build_initial(cfg: ExperimentConfig, grid) -> np.ndarray | None:
    kind = cfg.get("initial", "v0", default="zero")
    if kind == "zero":
        return None
    x = grid.nodes
    if kind == "sine":
        out = np.ones(grid.nnodes)
        for d in range(grid.dim):
            lo, hi = grid.box.lo[d], grid.box.hi[d]
            out = out * np.sin(math.pi * (x[:, d] - lo) / (hi - lo))
        return out
    if kind == "linear":
        return x[:, 0].copy()
    if kind == "constant":
        return np.full(grid.nnodes, float(cfg.get("initial", "value", default=1.0)))
    raise ConfigError([f"unknown initial.v0 kind {kind}"])


def build_curve(cfg: ExperimentConfig, incl, dom, section: str = "probe") -> ProbeCurve:
    from .geometry import build_curve_family
    horizon = cfg.get("experiment", "horizon", default=1.0)
    theta = cfg.get("experiment", "theta", default=horizon / 2)
    kind = cfg.get(section, "kind", default="static")
    if kind == "static":
        pt = cfg.get(section, "point")
        if pt is None:
            raise ConfigError([f"{section}.point required for a static probe"])
        return ProbeCurve.static(np.asarray(pt, dtype=float), -1.0, horizon + 1.0,
                                 theta=theta, label=cfg.get(section, "label", default="static"))
    if kind == "family":
        z = np.asarray(cfg.get(section, "z"), dtype=float)
        alpha = cfg.get(section, "alpha")
        epsilon = cfg.get(section, "epsilon")
        return build_curve_family(z, theta, alpha, epsilon, incl, dom,
                                  boundary_tol=cfg.get(section, "boundary_tol", default=1e-6))
    raise ConfigError([f"unknown probe kind {kind}"])
