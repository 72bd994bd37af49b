"""Run configuration: a flat ``key = value`` text file.

Lines starting with ``#`` are comments. Unknown keys are rejected. Every
subcommand writes the fully resolved configuration next to its outputs, so a
run directory can be replayed from ``resolved.cfg`` alone.

Material constants can be overridden with ``material.<name>`` keys (for example
``material.rho_gm = 4.0``). Named seeds (``seed.<name>``) default to values
derived from the master ``seed``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import MATERIAL_DEFAULTS

SEED_NAMES = (
    "bases",
    "train_data",
    "test_data",
    "init",
    "shuffle",
    "truth",
    "noise",
    "sboed",
    "gevp",
    "realizations",
)


class ConfigError(ValueError):
    """Bad or missing configuration; the CLI maps this to a usage error."""

    def __init__(self, msg, key=None):
        super().__init__(msg)
        self.key = key


@dataclass
class RunConfig:
    # geometry
    nx: int = 32
    ny: int = 32
    domain_size_mm: float = 20.0
    region: str = "disk"
    region_radius_frac: float = 0.3
    region_mask: str = ""
    # time stepping and observation
    T: float = 10.0
    dt: float = 0.1
    K: int = 10
    noise_std: float = 0.02
    reaction: str = "logistic"
    # reduction
    r_m: int = 16
    r_f: int = 16
    oversampling: int = 10
    n_dis: int = 32
    n_pca: int = 64
    n_train: int = 256
    n_test: int = 100
    # surrogate
    surrogate: str = "lano"
    d_h: int = 64
    d_a: int = 64
    baseline_width: int = 100
    epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 0.0
    w_j: float = 1.0
    batch_size: int = 32
    teacher_forcing: bool = False
    # inference and design
    gevp_rank: int = 0  # 0 means r_m
    design: str = ""  # bitstring for map/eig/ig; empty means every candidate time
    n_realizations: int = 16
    design_d: int = 2
    n_s: int = 16
    strategy: str = "exhaustive"
    budget_cap: int = 10000
    sboed_model: str = "surrogate"
    bench_repeats: int = 3
    # seeds
    seed: int = 0
    seeds: dict = field(default_factory=dict)
    material: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("nx", "ny", "K", "r_m", "r_f", "n_dis", "n_pca", "n_train", "n_test", "d_h", "d_a", "epochs", "batch_size", "design_d", "n_s", "budget_cap", "baseline_width", "bench_repeats")
        for k in positive:
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1", k)
        if self.nx < 3 or self.ny < 3:
            raise ConfigError("grid needs at least 3 nodes per axis", "nx")
        for k in ("domain_size_mm", "T", "dt", "noise_std", "lr"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive", k)
        choices = {
            "region": ("disk", "half-split", "mask-file"),
            "reaction": ("logistic", "linear"),
            "surrogate": ("lano", "neural-ode", "per-step"),
            "strategy": ("exhaustive", "greedy"),
            "sboed_model": ("surrogate", "full", "linear"),
        }
        for k, allowed in choices.items():
            if getattr(self, k) not in allowed:
                raise ConfigError(f"{k} must be one of {', '.join(allowed)}; got {getattr(self, k)!r}", k)
        if self.region == "mask-file" and not self.region_mask:
            raise ConfigError("region = mask-file needs region_mask", "region_mask")
        if self.design_d > self.K:
            raise ConfigError("design_d exceeds K", "design_d")
        if self.design and (len(self.design) != self.K or set(self.design) - {"0", "1"}):
            raise ConfigError(f"design must be a {self.K}-character bitstring", "design")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
        for name in self.seeds:
            if name not in SEED_NAMES:
                raise ConfigError(f"unknown seed name seed.{name}", f"seed.{name}")
        for name in self.material:
            if name not in MATERIAL_DEFAULTS:
                raise ConfigError(f"unknown material key material.{name}", f"material.{name}")

    # -- derived values

    def named_seed(self, name) -> int:
        """Explicit ``seed.<name>`` or a value derived from the master seed."""
        if name not in SEED_NAMES:
            raise KeyError(name)
        if name in self.seeds:
            return int(self.seeds[name])
        ss = np.random.SeedSequence(self.seed, spawn_key=(SEED_NAMES.index(name),))
        return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))

    @property
    def rank(self) -> int:
        return self.gevp_rank or self.r_m

    def design_vector(self):
        if not self.design:
            return np.ones(self.K, dtype=int)
        return np.array([int(c) for c in self.design])

    def region_spec(self):
        if self.region == "half-split":
            return "half-split"
        if self.region == "mask-file":
            return ("mask-file", self.region_mask)
        L = self.domain_size_mm
        return ("disk", (0.5 * L, 0.5 * L), self.region_radius_frac * L)

    # -- text round trip

    def items(self):
        for f in dataclasses.fields(self):
            if f.name in ("seeds", "material"):
                continue
            yield f.name, getattr(self, f.name)
        for name in SEED_NAMES:
            yield f"seed.{name}", self.named_seed(name)
        for name in sorted(MATERIAL_DEFAULTS):
            yield f"material.{name}", self.material.get(name, MATERIAL_DEFAULTS[name])

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        for k, v in self.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text())

    def replace(self, **changes):
        out = dataclasses.replace(self, seeds=dict(self.seeds), material=dict(self.material), **{k: v for k, v in changes.items() if k not in ("seeds", "material")})
        out.seeds.update(changes.get("seeds", {}))
        out.material.update(changes.get("material", {}))
        out.validate()
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw, 0) if raw.lower().startswith(("0x", "0o", "0b")) else int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}", key) from None
    return raw


def parse_assignments(pairs) -> dict:
    """Turn (key, raw value) pairs into keyword arguments for RunConfig."""
    kwargs, seeds, material = {}, {}, {}
    defaults = RunConfig()
    for key, raw in pairs:
        key = key.strip()
        if key.startswith("seed."):
            name = key[5:]
            if name not in SEED_NAMES:
                raise ConfigError(f"unknown key {key!r}", key)
            seeds[name] = _coerce(key, raw, 0)
        elif key.startswith("material."):
            name = key[9:]
            if name not in MATERIAL_DEFAULTS:
                raise ConfigError(f"unknown key {key!r}", key)
            material[name] = _coerce(key, raw, 0.0)
        elif key in _FIELDS and key not in ("seeds", "material"):
            kwargs[key] = _coerce(key, raw, getattr(defaults, key))
        else:
            raise ConfigError(f"unknown key {key!r}", key)
    kwargs["seeds"] = seeds
    kwargs["material"] = material
    return kwargs


def parse_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (or defaults) and apply ``key=value`` overrides on top."""
    pairs = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found", "config")
        pairs += parse_text(p.read_text())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    kwargs = parse_assignments(pairs)
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:  # pragma: no cover - guarded by parse_assignments
        raise ConfigError(str(exc)) from None
