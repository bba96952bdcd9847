"""Run configuration: YAML text <-> canonical dict <-> Chain.

Every error raised while loading is a :class:`ConfigError` whose ``key``
is the dotted path of the offending entry, e.g. ``chain.layers[2].sigma``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import yaml

from .autodiff import ParamStore
from .chain import Chain, validate_chain
from .densities import AnnealedDensity, AnnealedLevel, ConfigError, Gaussian, ToyTarget
from .layers import AffineLayer, CouplingLayer, DiffusionLayer, LangevinLayer, MHLayer, VaeLayer
from .training import TrainConfig

LAYER_DEFAULTS = {
    "coupling": {"hidden": [32, 32], "parity": None, "zero_init": True, "init_scale": 1.0},
    "affine": {"log_scale": 0.0, "shift": 0.0},
    "mh": {"sigma": 0.5, "beta": None},
    "langevin": {"a1": 0.01, "a2": None, "beta": None},
    "vae": {"dim": None, "hidden": [32], "zero_init": True, "init_scale": 1.0},
    "diffusion": {"eps": 0.05, "g": 1.0, "hidden": [32], "zero_init": True, "init_scale": 1.0},
}
TRAIN_DEFAULTS = {f: getattr(TrainConfig(), f) for f in
                  ("steps", "batch_size", "lr", "beta1", "beta2", "eps", "eval_every", "eval_samples",
                   "checkpoint_every")}
OUTPUT_DEFAULTS = {"dir": "runs/default", "write_paths": False}
TOP_KEYS = ("seed", "target", "latent", "chain", "train", "output")
POSITIVE = {"sigma", "eps", "g", "a2", "init_scale"}
NON_NEGATIVE = {"a1", "lr"}
INT_KEYS = {"steps", "batch_size", "eval_every", "eval_samples", "checkpoint_every", "dim"}


def _number(value, key, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    try:
        out = float(value)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {value!r}") from None
    if not math.isfinite(out):
        raise ConfigError(key, "must be finite")
    if kind is int:
        if not out.is_integer():
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(out)
    return out


def _check_value(name, value, key):
    if value is None:
        return None
    if name in INT_KEYS:
        value = _number(value, key, int)
        if value < 1:
            raise ConfigError(key, f"must be a positive integer, got {value}")
        return value
    if name in POSITIVE:
        value = _number(value, key)
        if value <= 0:
            raise ConfigError(key, f"must be positive, got {value}")
    elif name in NON_NEGATIVE:
        value = _number(value, key)
        if value < 0:
            raise ConfigError(key, f"must be non-negative, got {value}")
    elif name == "beta":
        value = _number(value, key)
        if not 0 <= value <= 1:
            raise ConfigError(key, f"must lie in [0, 1], got {value}")
    elif name in ("hidden",):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, "must be a list of widths")
        value = [_check_value("dim", v, f"{key}[{i}]") for i, v in enumerate(value)]
    elif name in ("zero_init", "write_paths"):
        if not isinstance(value, bool):
            raise ConfigError(key, "must be true or false")
    elif name == "parity":
        value = _number(value, key, int)
        if value not in (0, 1):
            raise ConfigError(key, "must be 0 or 1")
    elif name in ("beta1", "beta2"):
        value = _number(value, key)
        if not 0 <= value < 1:
            raise ConfigError(key, "must lie in [0, 1)")
    elif name in ("log_scale", "shift"):
        value = [_number(v, key) for v in value] if isinstance(value, list) else _number(value, key)
    return value


def _merge(defaults, given, prefix):
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(prefix, "must be a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown key")
    out = {}
    for name, default in defaults.items():
        out[name] = _check_value(name, given.get(name, copy.deepcopy(default)), f"{prefix}.{name}")
    return out


@dataclass
class RunConfig:
    """Resolved, canonical run configuration (all defaults filled in)."""

    seed: int
    target: dict
    latent: dict
    chain: dict
    train: dict
    output: dict

    def to_dict(self):
        return {"seed": self.seed, "target": copy.deepcopy(self.target), "latent": dict(self.latent),
                "chain": copy.deepcopy(self.chain), "train": dict(self.train), "output": dict(self.output)}

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def train_config(self):
        return TrainConfig(seed=self.seed, **self.train)


def parse_config(data):
    """Validate a config mapping (or YAML text) and return the canonical RunConfig."""
    if isinstance(data, str):
        try:
            data = yaml.safe_load(data)
        except yaml.YAMLError as exc:
            raise ConfigError("<root>", f"invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = sorted(set(data) - set(TOP_KEYS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    seed = _number(data.get("seed", 0), "seed", int)
    if seed < 0:
        raise ConfigError("seed", "must be non-negative")

    target = data.get("target")
    if not isinstance(target, dict) or "kind" not in target:
        raise ConfigError("target.kind", "missing target kind")
    target = copy.deepcopy(target)
    kind = target.pop("kind")
    tt = ToyTarget(kind, target)
    tt.build()  # validates parameters
    target_block = {"kind": kind, **target}

    latent = _merge({"dim": None}, data.get("latent"), "latent")
    if latent["dim"] is None:
        raise ConfigError("latent.dim", "missing latent dimension")

    chain = data.get("chain") or {}
    if not isinstance(chain, dict):
        raise ConfigError("chain", "must be a mapping")
    unknown = sorted(set(chain) - {"layers", "schedule"})
    if unknown:
        raise ConfigError(f"chain.{unknown[0]}", "unknown key")
    layers_in = chain.get("layers") or []
    if not isinstance(layers_in, list):
        raise ConfigError("chain.layers", "must be a list")
    layers = []
    for k, entry in enumerate(layers_in):
        key = f"chain.layers[{k}]"
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ConfigError(f"{key}.kind", "missing layer kind")
        entry = dict(entry)
        lkind = entry.pop("kind")
        if lkind not in LAYER_DEFAULTS:
            raise ConfigError(f"{key}.kind", f"unknown layer kind {lkind!r}; expected one of {sorted(LAYER_DEFAULTS)}")
        layers.append({"kind": lkind, **_merge(LAYER_DEFAULTS[lkind], entry, key)})
    schedule = chain.get("schedule")
    if schedule is not None:
        if not isinstance(schedule, list) or len(schedule) != len(layers) + 1:
            raise ConfigError("chain.schedule", f"must list {len(layers) + 1} values (one per step 0..T)")
        schedule = [_number(b, f"chain.schedule[{i}]") for i, b in enumerate(schedule)]

    train = _merge(TRAIN_DEFAULTS, data.get("train"), "train")
    output = _merge(OUTPUT_DEFAULTS, data.get("output"), "output")
    if not isinstance(output["dir"], str):
        raise ConfigError("output.dir", "must be a path string")
    cfg = RunConfig(seed, target_block, latent, {"schedule": schedule, "layers": layers}, train, output)
    build_chain(cfg)  # dimension checks and proposal construction
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def build_chain(cfg):
    """Instantiate latent, target, layers and parameters from a RunConfig."""
    target_block = dict(cfg.target)
    target = ToyTarget(target_block.pop("kind"), target_block).build()
    latent = Gaussian.standard(cfg.latent["dim"])
    layer_cfgs = cfg.chain["layers"]
    n_layers = len(layer_cfgs)
    schedule = cfg.chain["schedule"]
    if schedule is None:
        schedule = AnnealedDensity.linear_schedule(n_layers).tolist()
    else:
        try:
            AnnealedDensity(latent if latent.dim == target.dim else target, target, schedule)
        except ValueError as exc:
            raise ConfigError("chain.schedule", str(exc)) from None
    store = ParamStore()
    init_rng = np.random.default_rng([cfg.seed, 7919])
    layers = []
    dim = latent.dim
    couplings = 0
    for k, layer_cfg in enumerate(layer_cfgs):
        key = f"chain.layers[{k}]"
        prefix = f"layers.{k}"
        t = k + 1
        kind = layer_cfg["kind"]
        if kind in ("mh", "langevin"):
            if target.dim != dim:
                raise ConfigError(key, f"{kind} layer in dimension {dim} cannot anneal toward a "
                                       f"{target.dim}-dimensional target")
            base = latent if latent.dim == dim else Gaussian.standard(dim)
            beta = schedule[t] if layer_cfg["beta"] is None else layer_cfg["beta"]
            proposal = AnnealedLevel(base, target, float(beta))
        if kind == "coupling":
            parity = couplings % 2 if layer_cfg["parity"] is None else layer_cfg["parity"]
            couplings += 1
            layer = CouplingLayer(store, prefix, dim, parity, layer_cfg["hidden"], init_rng,
                                  layer_cfg["zero_init"], layer_cfg["init_scale"])
        elif kind == "affine":
            layer = AffineLayer(store, prefix, dim, layer_cfg["log_scale"], layer_cfg["shift"])
        elif kind == "mh":
            layer = MHLayer(dim, layer_cfg["sigma"], proposal)
        elif kind == "langevin":
            if layer_cfg["a2"] is None and layer_cfg["a1"] == 0:
                raise ConfigError(f"{key}.a2", "a2 must be given when a1 is 0")
            layer = LangevinLayer(dim, layer_cfg["a1"], proposal, layer_cfg["a2"])
        elif kind == "vae":
            out_dim = layer_cfg["dim"]
            if out_dim is None:
                raise ConfigError(f"{key}.dim", "vae layers need an output dimension")
            layer = VaeLayer(store, prefix, dim, out_dim, layer_cfg["hidden"], init_rng, layer_cfg["zero_init"],
                             layer_cfg["init_scale"])
        else:
            layer = DiffusionLayer(store, prefix, dim, layer_cfg["eps"], layer_cfg["g"], layer_cfg["hidden"], init_rng,
                                   layer_cfg["zero_init"], layer_cfg["init_scale"])
        layers.append(layer)
        dim = layer.out_dim
    chain = Chain(latent, target, layers, store)
    problems = validate_chain(chain)
    if problems:
        raise ConfigError("chain.layers", "; ".join(problems))
    return chain
