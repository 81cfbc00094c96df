"""Flat key-value run configuration for the command-line harness.

Grammar: one ``key = value`` per line, ``#`` starts a comment, section
membership is spelled with dotted prefixes (``mpc.Np = 60``). Values are
scalars, comma-separated float lists, or bare names. Unknown keys,
duplicate keys and type mismatches are rejected with the offending line
number.
"""

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Malformed run configuration; carries the line number when known."""

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass
class SimConfig:
    """Effective harness configuration with all defaults resolved."""

    model: str = ""
    plant: str = ""
    Np: int = 10
    Nu: Optional[int] = None
    wy: Optional[list] = None
    wu: Optional[list] = None
    umin: Optional[list] = None
    umax: Optional[list] = None
    ymin: Optional[list] = None
    ymax: Optional[list] = None
    u_ref: Optional[list] = None
    sqrt_rho: float = 1e4
    gamma: float = 1e-6
    c: float = 1e-4
    tau: float = 0.5
    max_iters: int = 100
    bvls_tol: float = 1e-8
    steps: int = 40
    y_ref: Optional[list] = None
    y_ref_after: Optional[list] = None
    y_ref_switch_step: int = 0
    seed: int = 0
    horizons: list = field(default_factory=lambda: [10, 20, 40, 60, 120])
    bench_steps: int = 20
    check_instances: int = 100
    dense: bool = False

    def mpc_kwargs(self):
        return dict(Np=self.Np, Nu=self.Nu if self.Nu else self.Np,
                    wy=self.wy, wu=self.wu, umin=self.umin, umax=self.umax,
                    ymin=self.ymin, ymax=self.ymax, u_ref=self.u_ref,
                    sqrt_rho=self.sqrt_rho, gamma=self.gamma, c=self.c,
                    tau=self.tau, max_iters=self.max_iters,
                    bvls_tol=self.bvls_tol)


def _parse_float(raw, line, key):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r} expects a number, got {raw!r}",
                          line, key) from None


def _parse_int(raw, line, key):
    try:
        v = float(raw)
        if v != int(v):
            raise ValueError
        return int(v)
    except ValueError:
        raise ConfigError(f"key {key!r} expects an integer, got {raw!r}",
                          line, key) from None


def _parse_floats(raw, line, key):
    return [_parse_float(p.strip(), line, key) for p in raw.split(",")]


def _parse_ints(raw, line, key):
    return [_parse_int(p.strip(), line, key) for p in raw.split(",")]


def _parse_name(raw, line, key):
    return raw.strip()


# key -> (SimConfig attribute, parser)
CONFIG_KEYS = {
    "model": ("model", _parse_name),
    "plant": ("plant", _parse_name),
    "mpc.Np": ("Np", _parse_int),
    "mpc.Nu": ("Nu", _parse_int),
    "mpc.wy": ("wy", _parse_floats),
    "mpc.wu": ("wu", _parse_floats),
    "mpc.umin": ("umin", _parse_floats),
    "mpc.umax": ("umax", _parse_floats),
    "mpc.ymin": ("ymin", _parse_floats),
    "mpc.ymax": ("ymax", _parse_floats),
    "mpc.u_ref": ("u_ref", _parse_floats),
    "mpc.sqrt_rho": ("sqrt_rho", _parse_float),
    "mpc.gamma": ("gamma", _parse_float),
    "mpc.c": ("c", _parse_float),
    "mpc.tau": ("tau", _parse_float),
    "mpc.max_iters": ("max_iters", _parse_int),
    "mpc.bvls_tol": ("bvls_tol", _parse_float),
    "sim.steps": ("steps", _parse_int),
    "sim.y_ref": ("y_ref", _parse_floats),
    "sim.y_ref_after": ("y_ref_after", _parse_floats),
    "sim.y_ref_switch_step": ("y_ref_switch_step", _parse_int),
    "sim.seed": ("seed", _parse_int),
    "bench.horizons": ("horizons", _parse_ints),
    "bench.steps": ("bench_steps", _parse_int),
    "check.instances": ("check_instances", _parse_int),
}

# scenario keys a builtin bundle may pre-fill
_BUNDLE_KEYS = ("Np", "Nu", "wy", "wu", "umin", "umax", "ymin", "ymax",
                "u_ref", "y_ref", "y_ref_after", "y_ref_switch_step",
                "gamma", "bvls_tol", "sim_steps")


def parse_config(text):
    """Parse the key = value format into a fully validated SimConfig."""
    items = {}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}",
                              lineno)
        key, _, val = stripped.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in items:
            raise ConfigError(
                f"duplicate key {key!r} (first set on line {lines[key]})",
                lineno, key)
        if not val:
            raise ConfigError(f"key {key!r} has no value", lineno, key)
        attr, parser = CONFIG_KEYS[key]
        items[key] = (attr, parser(val, lineno, key))
        lines[key] = lineno

    if "model" not in items:
        raise ConfigError("missing required key 'model'")

    cfg = SimConfig()
    # fill scenario defaults from the builtin bundle first
    from .builtins import get_bundle

    model_name = items["model"][1]
    try:
        bundle = get_bundle(model_name)
    except KeyError as err:
        raise ConfigError(str(err), lines["model"], "model") from None
    for k in _BUNDLE_KEYS:
        if k in bundle.defaults:
            attr = "steps" if k == "sim_steps" else k
            setattr(cfg, attr, bundle.defaults[k])

    for attr, value in items.values():
        setattr(cfg, attr, value)
    if not cfg.plant:
        cfg.plant = cfg.model

    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg.Nu is not None and not (1 <= cfg.Nu <= cfg.Np):
        raise ConfigError(f"need 1 <= Nu <= Np, got Nu={cfg.Nu}, Np={cfg.Np}",
                          key="mpc.Nu")
    if cfg.Np < 1:
        raise ConfigError(f"Np must be positive, got {cfg.Np}", key="mpc.Np")
    if cfg.steps < 1:
        raise ConfigError(f"sim.steps must be at least 1, got {cfg.steps}",
                          key="sim.steps")
    if cfg.sqrt_rho <= 0:
        raise ConfigError("mpc.sqrt_rho must be positive", key="mpc.sqrt_rho")
    if not 0 < cfg.c < 0.5:
        raise ConfigError("mpc.c must lie in (0, 0.5)", key="mpc.c")
    if not 0 < cfg.tau < 1:
        raise ConfigError("mpc.tau must lie in (0, 1)", key="mpc.tau")
    if sorted(cfg.horizons) != list(cfg.horizons):
        raise ConfigError("bench.horizons must be ascending",
                          key="bench.horizons")
    from .builtins import BUILTIN_BUNDLES

    for key, name in (("model", cfg.model), ("plant", cfg.plant)):
        if name not in BUILTIN_BUNDLES:
            raise ConfigError(f"unknown builtin model {name!r}", key=key)


def dump_config(cfg):
    """Effective configuration in the same key = value format."""
    attr_to_key = {attr: key for key, (attr, _) in CONFIG_KEYS.items()}
    out = []
    for f in fields(cfg):
        if f.name == "dense":
            continue
        key = attr_to_key.get(f.name)
        if key is None:
            continue
        val = getattr(cfg, f.name)
        if val is None:
            continue
        if isinstance(val, (list, tuple, np.ndarray)):
            val = ", ".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                            for v in val)
        elif isinstance(val, float):
            val = f"{val:.17g}"
        out.append(f"{key} = {val}")
    return "\n".join(sorted(out)) + "\n"
