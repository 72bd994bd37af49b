"""Weight containers, initialisation and checkpoint I/O for the surrogates."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io

KINDS = ("lano", "neural-ode", "per-step")


def lano_shapes(K, r_m, r_f, d_h, d_a):
    return {
        "Wp": (d_h, r_m),
        "bp": (d_h,),
        "Ws": (K, d_h, r_f),
        "bs": (K, d_h),
        "Wz": (K, d_h, 2 * d_h),
        "bz": (K, d_h),
        "WQ": (d_h, d_a),
        "WK": (d_h, d_a),
        "WV": (d_h, d_a),
        "P": (d_h, K),
        "W1": (d_a, d_h),
        "b1": (d_h,),
        "W2": (d_h, d_h),
        "b2": (d_h,),
        "ln_g": (d_h,),
        "ln_b": (d_h,),
        "W1F": (K, r_f, d_h),
        "b1F": (K, r_f),
        "W2F": (K, r_f, r_f),
        "b2F": (K, r_f),
        "W1J": (K, r_f, d_h),
        "b1J": (K, r_f),
        "W2J": (K, r_f, r_f),
        "b2J": (K, r_f),
    }


def resnet_shapes(n_in, n_out, width, blocks=3, prefix=""):
    return {
        f"{prefix}W_in": (width, n_in),
        f"{prefix}b_in": (width,),
        f"{prefix}W_blk": (blocks, width, width),
        f"{prefix}b_blk": (blocks, width),
        f"{prefix}W_out": (n_out, width),
        f"{prefix}b_out": (n_out,),
    }


@dataclass
class SurrogateParams:
    """Named float64 weight arrays plus the hyper-parameters that fix their shapes."""

    kind: str
    K: int
    r_m: int
    r_f: int
    hyper: dict
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        expected = self.shapes()
        if self.arrays:
            if set(self.arrays) != set(expected):
                raise ValueError(f"parameter names differ from the {self.kind} layout")
            for name, shape in expected.items():
                arr = np.asarray(self.arrays[name], dtype=np.float64)
                if arr.shape != shape:
                    raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name} has non-finite entries")
                self.arrays[name] = np.ascontiguousarray(arr)

    def shapes(self):
        h = self.hyper
        if self.kind == "lano":
            return lano_shapes(self.K, self.r_m, self.r_f, h["d_h"], h["d_a"])
        if self.kind == "neural-ode":
            return resnet_shapes(self.r_f + self.r_m, self.r_f, h["width"], h.get("blocks", 3))
        out = {}
        for k in range(self.K):
            out.update(resnet_shapes(self.r_m, self.r_f, h["width"], h.get("blocks", 3), prefix=f"k{k}_"))
        return out

    def __getitem__(self, name):
        return self.arrays[name]

    def per_step_list(self, arrays=None):
        """Split per-step weights into one dict per step (works for torch tensors too)."""
        arrays = self.arrays if arrays is None else arrays
        return [{n[len(f"k{k}_"):]: v for n, v in arrays.items() if n.startswith(f"k{k}_")} for k in range(self.K)]

    def n_params(self):
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self):
        return SurrogateParams(self.kind, self.K, self.r_m, self.r_f, dict(self.hyper), {n: a.copy() for n, a in self.arrays.items()})

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra=None, losses=None):
        path = io.ensure_dir(path)
        meta = {"kind": self.kind, "K": self.K, "r_m": self.r_m, "r_f": self.r_f}
        meta.update({f"hyper.{k}": v for k, v in self.hyper.items()})
        for name, arr in self.arrays.items():
            io.write_sbf(path / f"w_{name}.sbf", arr)
            meta[f"hash.{name}"] = io.array_hash(arr)
        meta.update(extra or {})
        io.write_manifest(path / "checkpoint.manifest", meta)
        if losses is not None:
            cols = list(losses[0].keys()) if losses else ["epoch", "loss"]
            io.write_csv(path / "losses.csv", cols, [[row[c] for c in cols] for row in losses])

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = io.read_manifest(path / "checkpoint.manifest")
        hyper = {k[len("hyper."):]: _num(v) for k, v in meta.items() if k.startswith("hyper.")}
        obj = cls(meta["kind"], int(meta["K"]), int(meta["r_m"]), int(meta["r_f"]), hyper)
        obj.arrays = {name: io.read_sbf(path / f"w_{name}.sbf") for name in obj.shapes()}
        obj.__post_init__()
        return obj


def _num(v):
    if isinstance(v, str):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
    return v


def _glorot(rng, shape, gain=1.0):
    fan_in = shape[-1]
    return gain * rng.standard_normal(shape) / np.sqrt(fan_in)


def init_lano(K, r_m, r_f, d_h=64, d_a=64, seed=0, head_gain=0.1) -> SurrogateParams:
    """Random initialisation; the residual heads start small so the rollout starts near identity."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in lano_shapes(K, r_m, r_f, d_h, d_a).items():
        if name.startswith("b") or name == "ln_b":
            arrays[name] = np.zeros(shape)
        elif name == "ln_g":
            arrays[name] = np.ones(shape)
        elif name == "P":
            arrays[name] = 0.1 * rng.standard_normal(shape)
        elif name in ("WQ", "WK", "WV"):
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name in ("W1",):
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name in ("W2",):
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif name in ("W2F", "W2J"):
            arrays[name] = _glorot(rng, shape, head_gain)
        else:
            arrays[name] = _glorot(rng, shape)
    return SurrogateParams("lano", K, r_m, r_f, {"d_h": d_h, "d_a": d_a}, arrays)


def zero_lano(K, r_m, r_f, d_h=64, d_a=64) -> SurrogateParams:
    shapes = lano_shapes(K, r_m, r_f, d_h, d_a)
    return SurrogateParams("lano", K, r_m, r_f, {"d_h": d_h, "d_a": d_a}, {n: np.zeros(s) for n, s in shapes.items()})


def _init_resnet(rng, shapes, out_gain=0.1):
    arrays = {}
    for name, shape in shapes.items():
        base = name.split("_", 1)[1] if name.startswith("k") and "_" in name else name
        if base.startswith("b_"):
            arrays[name] = np.zeros(shape)
        elif base == "W_out":
            arrays[name] = _glorot(rng, shape, out_gain)
        elif base == "W_blk":
            arrays[name] = _glorot(rng, shape, 0.5)
        else:
            arrays[name] = _glorot(rng, shape)
    return arrays


def init_baseline(kind, K, r_m, r_f, width=100, blocks=3, seed=0) -> SurrogateParams:
    rng = np.random.default_rng(seed)
    obj = SurrogateParams(kind, K, r_m, r_f, {"width": width, "blocks": blocks})
    obj.arrays = _init_resnet(rng, obj.shapes(), out_gain=0.1 if kind == "neural-ode" else 1.0)
    obj.__post_init__()
    return obj
