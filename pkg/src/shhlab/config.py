"""Run configuration: JSON schema, defaults and object construction."""
import copy
import json

import jsonschema
import numpy as np

from . import benchmarks as bench
from .lyapunov import power_kinf
from .noise import TAGS, NoiseModel
from .nonsmooth import InfConvolution, InfConvPolicy, InnerSolver
from .sde import ControlledSde, MarkovPolicy, SampleHoldConfig, zero_policy


class ConfigError(ValueError):
    pass


_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "benchmark": {
            "type": "object", "additionalProperties": False, "required": ["name"],
            "properties": {
                "name": {"enum": sorted(bench.REGISTRY)},
                "params": {"type": "object"},
            },
        },
        "system": {
            "type": "object", "additionalProperties": False,
            "required": ["A", "B", "Sigma"],
            "properties": {"A": _mat, "B": _mat, "Sigma": _mat},
        },
        "noise": {
            "type": "object", "additionalProperties": False, "required": ["tag"],
            "properties": {"tag": {"enum": list(TAGS)}, "params": {"type": "object"}},
        },
        "lyapunov": {
            "type": "object", "additionalProperties": False,
            "properties": {"alpha1": _pos, "alpha2": _pos, "alpha3": _pos,
                           "sigma_bar": {"type": "number", "minimum": 0}},
        },
        "policy": {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {
                "kind": {"enum": ["builtin", "zero", "linear", "inf_conv"]},
                "gain": {"oneOf": [{"type": "number"}, _mat]},
                "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "control_grid_density": {"type": "integer", "minimum": 2},
                "evaluate_at": {"enum": ["state", "subgradient"]},
                "tol": _pos,
                "starts": {"type": "integer", "minimum": 1},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "simulation": {
            "type": "object", "additionalProperties": False,
            "required": ["delta", "horizon", "initial_state"],
            "properties": {
                "delta": _pos, "horizon": _pos,
                "substep": {"oneOf": [_pos, {"type": "null"}]},
                "initial_state": _vec,
            },
        },
        "ensemble": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "N": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
                "window": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "thresholds": {"type": "array", "items": _pos},
                "eps": {"type": "array", "items": {"type": "number",
                                                   "exclusiveMinimum": 0,
                                                   "exclusiveMaximum": 1}},
            },
        },
        "radii": {
            "type": "object", "additionalProperties": False, "required": ["r", "R"],
            "properties": {"r": _pos, "R": _pos},
        },
        "ledger": {
            "type": "object", "additionalProperties": False,
            "properties": {"enabled": {"type": "boolean"},
                           "grid_density": {"type": "integer", "minimum": 16},
                           "safety": {"type": "number", "minimum": 1},
                           "r_prime": _pos},
        },
        "sweep": {
            "type": "object", "additionalProperties": False,
            "properties": {"deltas": {"type": "array", "items": _pos, "minItems": 1},
                           "plateau_threshold": _pos},
        },
        "output": {"type": "string"},
    },
    "oneOf": [{"required": ["benchmark"]}, {"required": ["system"]}],
}

DEFAULTS = {
    "policy": {"kind": "builtin"},
    "ensemble": {"N": 4096, "seed": 0, "window": 0.2, "thresholds": [], "eps": [0.1, 0.2]},
    "ledger": {"enabled": True, "grid_density": 2 ** 14, "safety": 1.25},
    "sweep": {"plateau_threshold": 0.2},
}

INF_CONV_DEFAULTS = {"beta": 0.1, "control_grid_density": 41, "evaluate_at": "subgradient",
                     "tol": 1e-8, "starts": 8, "max_iter": 10_000}


def unwrap(doc):
    """Accept a plain config or a run manifest carrying one."""
    if isinstance(doc, dict) and doc.get("tool") == "shhlab" and "config" in doc:
        return copy.deepcopy(doc["config"])
    return copy.deepcopy(doc)


def load(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return normalise(unwrap(doc))


def normalise(cfg):
    """Validate and fill defaults; the result is what manifests echo."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    out = copy.deepcopy(cfg)
    for key, dflt in DEFAULTS.items():
        merged = copy.deepcopy(dflt)
        merged.update(out.get(key, {}))
        out[key] = merged
    if out["policy"]["kind"] == "inf_conv":
        merged = dict(INF_CONV_DEFAULTS)
        merged.update(out["policy"])
        out["policy"] = merged
    if "radii" in out and not out["radii"]["r"] < out["radii"]["R"]:
        raise ConfigError("radii: need r < R")
    return out


def build_benchmark(cfg):
    """Benchmark for a named entry, or None for an inline linear system."""
    if "benchmark" not in cfg:
        return None
    entry = cfg["benchmark"]
    params = dict(entry.get("params", {}))
    try:
        if entry["name"] == "nonholonomic":
            noise = cfg.get("noise")
            model = None if noise is None else NoiseModel(noise["tag"], noise.get("params", {}))
            if model is not None and not model.bounded:
                raise ConfigError("nonholonomic benchmark needs a bounded noise model")
            if "z0" in params:
                params["z0"] = np.asarray(params["z0"], dtype=float)
            b = bench.nonholonomic_benchmark(model, **params)
        else:
            if "noise" in cfg and cfg["noise"]["tag"] != "brownian":
                raise ConfigError(f"benchmark {entry['name']} is Brownian-driven")
            b = bench.get_benchmark(entry["name"], **params)
    except TypeError as exc:
        raise ConfigError(f"benchmark params: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return _override_pair(b, cfg.get("lyapunov"))


def _override_pair(b, over):
    if not over:
        return b
    from dataclasses import replace
    pair = b.pair_or_clf
    if not hasattr(pair, "alpha1"):
        raise ConfigError("lyapunov overrides apply to smooth benchmarks only")
    power = 4.0 if b.name == "quartic" else 2.0
    kw = {k: power_kinf(float(over[k]), power) for k in ("alpha1", "alpha2", "alpha3")
          if k in over}
    if "sigma_bar" in over:
        kw["sigma_bar"] = float(over["sigma_bar"])
    return replace(b, pair_or_clf=replace(pair, **kw))


def inline_system(cfg):
    s = cfg["system"]
    A, B, S = (np.asarray(s[k], dtype=float) for k in ("A", "B", "Sigma"))
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or S.shape[0] != n:
        raise ConfigError("system: A must be n x n and B, Sigma must have n rows")
    m, d = B.shape[1], S.shape[1]
    return ControlledSde(
        n, m, d,
        lambda x, u: np.asarray(x) @ A.T + np.asarray(u) @ B.T,
        lambda x, u: np.broadcast_to(S, np.shape(x)[:-1] + (n, d)),
        "linear")


def system_of(cfg, b):
    return b.system if b is not None else inline_system(cfg)


def build_policy(cfg, b, system):
    pol = cfg["policy"]
    kind = pol["kind"]
    plant = getattr(system, "plant", system)
    if kind == "builtin":
        if b is None or not hasattr(b.pair_or_clf, "policy"):
            kind = "inf_conv" if b is not None else "zero"
        else:
            return b.pair_or_clf.policy
    if kind == "zero":
        return zero_policy(plant.control_dim)
    if kind == "linear":
        if "gain" not in pol:
            raise ConfigError("policy: linear needs a gain")
        K = np.asarray(pol["gain"], dtype=float)
        if K.ndim == 0:
            K = K * np.eye(plant.control_dim, plant.state_dim)
        if K.shape != (plant.control_dim, plant.state_dim):
            raise ConfigError("policy: gain must be m x n")
        return MarkovPolicy(lambda x: -np.asarray(x) @ K.T, None, "linear")
    if b is None or hasattr(b.pair_or_clf, "policy"):
        raise ConfigError("policy: inf_conv needs a non-smooth CLF benchmark")
    p = dict(INF_CONV_DEFAULTS)
    p.update(pol)
    solver = InnerSolver(starts=p["starts"], tol=p["tol"], max_iter=p["max_iter"])
    ic = InfConvolution(b.pair_or_clf, p["beta"], solver)
    return InfConvPolicy(ic, system, p["control_grid_density"], p["evaluate_at"])


def inf_convolution(cfg, b):
    p = dict(INF_CONV_DEFAULTS)
    p.update(cfg["policy"] if cfg["policy"]["kind"] == "inf_conv" else {})
    solver = InnerSolver(starts=p["starts"], tol=p["tol"], max_iter=p["max_iter"])
    return InfConvolution(b.pair_or_clf, p["beta"], solver), p


def build_sample_hold(cfg, delta=None):
    sim = cfg.get("simulation")
    if sim is None:
        raise ConfigError("simulation section is required for this command")
    try:
        return SampleHoldConfig(delta if delta is not None else sim["delta"],
                                sim["horizon"], tuple(sim["initial_state"]),
                                sim.get("substep"))
    except ValueError as exc:
        raise ConfigError(f"simulation: {exc}") from None
