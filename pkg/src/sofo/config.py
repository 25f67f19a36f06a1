"""JSON experiment configuration: validation and model construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .engine import AlgorithmConfig, World
from .model import ComplianceModel, DisturbanceGenerator, MeasurementModel, PhiDistribution, PlantModel
from .objectives import StageObjective
from .projections import Ball, Box, ConstraintSet, Intersection, InverterDisks
from .rng import RandomStream

__all__ = [
    "ConfigError",
    "SPEC_VERSION",
    "load_config",
    "validate_config",
    "config_hash",
    "Instance",
    "build_instance",
    "build_phi",
    "build_set",
    "build_algorithm",
    "instance_streams",
]

SPEC_VERSION = "1.0"

KINDS = {"tracking", "mse_sweep", "opf_compare", "constants", "contraction"}


class ConfigError(ValueError):
    """Configuration failed schema or consistency checks."""


def _schema():
    text = (resources.files("sofo") / "schemas" / "experiment.schema.json").read_text()
    return json.loads(text)


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{loc}: {exc.message}") from None
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = validate_config(cfg)
    cfg = copy.deepcopy(cfg)
    cfg["_base_dir"] = str(path.parent.resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(json.dumps(clean, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def instance_streams(seed: int):
    """Fixed split of one seed into (instance, run, analysis, test) streams."""
    return RandomStream(seed).split(4)


# ---------------------------------------------------------------------------
# builders


def _matrix(spec, shape, rng: RandomStream, name):
    rows, cols = shape
    if isinstance(spec, str):
        return np.eye(rows, cols) if spec == "identity" else np.zeros(shape)
    if isinstance(spec, list):
        M = np.asarray(spec, dtype=float)
        if M.shape != shape:
            raise ConfigError(f"{name} has shape {M.shape}, expected {shape}")
        return M
    if "diag" in spec:
        if len(spec["diag"]) != min(shape):
            raise ConfigError(f"{name} diagonal has length {len(spec['diag'])}, expected {min(shape)}")
        M = np.zeros(shape)
        np.fill_diagonal(M, spec["diag"])
        return M
    if "scaled_identity" in spec:
        return spec["scaled_identity"] * np.eye(rows, cols)
    if "random_diag" in spec:
        lo, hi = spec["random_diag"]
        M = np.zeros(shape)
        np.fill_diagonal(M, rng.uniform(lo, hi, min(shape)))
        return M
    lo, hi = spec["random_uniform"]
    return rng.uniform(lo, hi, shape)


def build_phi(spec: dict) -> PhiDistribution:
    kind = spec["dist"]
    return PhiDistribution(kind, float(spec.get("lo", 0.0)), float(spec.get("hi", 1.0)),
                           float(spec.get("a", 1.0)), float(spec.get("b", 1.0)))


def _compliance(spec, dim):
    if spec["kind"] == "identity":
        return ComplianceModel.identity(dim)
    if "phi" not in spec:
        raise ConfigError("diagonal compliance needs 'phi'")
    return ComplianceModel.diagonal(dim, build_phi(spec["phi"]), spec.get("active"))


def _disturbance(spec, horizon):
    if "constant" in spec:
        return DisturbanceGenerator.constant(spec["constant"])
    w = spec["waveform"]
    if len(w["amplitudes"]) != len(w["shapes"]):
        raise ConfigError("need one amplitude vector per waveform segment")
    return DisturbanceGenerator.even_segments(w["shapes"], w["omega"], w["amplitudes"], horizon)


def _base_dir(cfg):
    return Path(cfg.get("_base_dir", "."))


def build_set(spec: dict, dim: int, cfg: Optional[dict] = None) -> ConstraintSet:
    kind = spec["kind"]
    if kind == "ball":
        return Ball(np.asarray(spec.get("center", np.zeros(dim)), dtype=float), float(spec["radius"]))
    if kind == "box":
        return Box(spec["lo"], spec["hi"])
    if kind == "inverter":
        if "pbar_csv" in spec:
            path = _base_dir(cfg or {}) / spec["pbar_csv"]
            pbar = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        else:
            pbar = spec["pbar"]
        return InverterDisks(spec["smax"], pbar)
    return Intersection(tuple(build_set(s, dim, cfg) for s in spec["sets"]))


def build_algorithm(spec: dict) -> AlgorithmConfig:
    return AlgorithmConfig(alpha=float(spec["alpha"]), eta=float(spec.get("eta", 0.0)),
                           variant=spec.get("variant", "sofo"), horizon=int(spec["horizon"]),
                           a_recovery=spec.get("a_recovery", "exact"))


@dataclass(frozen=True)
class Instance:
    world: World
    cset: ConstraintSet
    obj: StageObjective
    algo: AlgorithmConfig

    def describe(self) -> dict:
        """JSON-friendly record of the (possibly randomly drawn) instance."""
        p = self.world.plant
        return {"C": p.C.tolist(), "D": p.D.tolist(), "Wy": self.obj.g_y.W.tolist(), "Wx": self.obj.g_x.W.tolist(),
                "alpha": self.algo.alpha, "eta": self.algo.eta, "horizon": self.algo.horizon,
                "b_U": self.cset.bound(), "epsilon_m": self.world.measurement.epsilon_m}


def build_instance(cfg: dict, seed: int, horizon: Optional[int] = None) -> Instance:
    """Materialize world, set, objective and algorithm; random matrices come from ``seed``."""
    inst_rng = instance_streams(seed)[0]
    m = cfg["model"]
    d = int(m["dim"])
    algo = build_algorithm(cfg["algorithm"])
    if horizon is not None:
        algo = AlgorithmConfig(algo.alpha, algo.eta, algo.variant, horizon, algo.a_recovery)
    p = m["plant"]
    dist = _disturbance(p["disturbance"], algo.horizon)
    dim_y = int(p.get("dim_y", d))
    C = _matrix(p["C"], (dim_y, d), inst_rng, "C")
    D = _matrix(p["D"], (dim_y, dist.dim), inst_rng, "D")
    plant = PlantModel(C, D, dist)
    meas_spec = m.get("measurement", {})
    cov = lambda key, dim: None if meas_spec.get(key) is None else _matrix(meas_spec[key], (dim, dim), inst_rng, key)
    meas = MeasurementModel(cov("y_cov", dim_y), cov("x_cov", d), meas_spec.get("epsilon_m"))
    world = World(_compliance(m["compliance"], d), plant, meas)
    o = cfg["objective"]
    obj = StageObjective.from_weights(_matrix(o["Wy"], (dim_y, dim_y), inst_rng, "Wy"),
                                      _matrix(o["Wx"], (d, d), inst_rng, "Wx"),
                                      o.get("y_ref"), o.get("x_ref"), algo.eta)
    cset = build_set(cfg["set"], d, cfg)
    if cset.dim != d:
        raise ConfigError(f"set dimension {cset.dim} does not match model dimension {d}")
    return Instance(world, cset, obj, algo)
