"""The control agent: state-aware, action-aware and combination networks.

    u_i = f_c( f_s([re; im]) + f_a(u_{i-1}) )

All three are stacks of affine layers.  Every layer is followed by a ReLU except
the last layer of f_c, whose output is used directly as the control vector.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

SUBNETS = ("fs", "fa", "fc")
CHECKPOINT_FORMAT = "diffqc-checkpoint/1"


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    in_features: int
    out_features: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ArchitectureError("layer sizes must be positive")
        if self.activation not in ("relu", "none"):
            raise ArchitectureError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Architecture:
    fs: tuple
    fa: tuple
    fc: tuple

    def __post_init__(self):
        for name in SUBNETS:
            layers = tuple(getattr(self, name))
            object.__setattr__(self, name, layers)
            if not layers:
                raise ArchitectureError(f"subnetwork {name} has no layers")
            for prev, nxt in zip(layers, layers[1:]):
                if prev.out_features != nxt.in_features:
                    raise ArchitectureError(
                        f"{name}: layer of width {prev.out_features} feeds a layer expecting {nxt.in_features}"
                    )
        if self.fc[-1].activation != "none":
            raise ArchitectureError("the output layer of fc must be linear")
        if self.fs[-1].out_features != self.fa[-1].out_features:
            raise ArchitectureError("fs and fa must produce the same number of features")
        if self.fc[0].in_features != self.fs[-1].out_features:
            raise ArchitectureError("fc input width must equal the fs/fa output width")

    @classmethod
    def from_widths(cls, fs: Sequence, fa: Sequence, fc: Sequence) -> "Architecture":
        """Layers given as (in, out) pairs; activations follow the fixed ReLU/linear rule."""
        mk = lambda pairs, last_linear: tuple(
            LayerSpec(int(i), int(o), "none" if last_linear and k == len(pairs) - 1 else "relu")
            for k, (i, o) in enumerate(pairs)
        )
        return cls(mk(fs, False), mk(fa, False), mk(fc, True))

    @property
    def state_width(self) -> int:
        return self.fs[0].in_features

    @property
    def num_controls(self) -> int:
        return self.fc[-1].out_features

    @property
    def features(self) -> int:
        return self.fs[-1].out_features

    def check_system(self, dim: int, num_controls: int) -> None:
        if self.state_width != 2 * dim:
            raise ArchitectureError(f"fs expects input width {self.state_width}, the system needs {2 * dim}")
        if self.fa[0].in_features != num_controls or self.num_controls != num_controls:
            raise ArchitectureError(f"fa input / fc output must both equal the number of controls {num_controls}")

    def widths(self) -> dict:
        return {name: [[l.in_features, l.out_features] for l in getattr(self, name)] for name in SUBNETS}

    def tensor_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for name in SUBNETS:
            for k, layer in enumerate(getattr(self, name)):
                shapes[f"{name}.{k}.weight"] = (layer.out_features, layer.in_features)
                shapes[f"{name}.{k}.bias"] = (layer.out_features,)
        return shapes


@dataclass
class AgentParams:
    arch: Architecture
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.tensor_shapes()
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ArchitectureError(f"parameter names mismatch (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(ad.value(self.tensors[name]).shape) != shape:
                raise ArchitectureError(f"{name} has shape {ad.value(self.tensors[name]).shape}, expected {shape}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(ad.value(v)) for k, v in self.tensors.items()}

    def traced(self) -> "AgentParams":
        """Copy whose tensors are tape leaves, for use in a recorded forward pass."""
        return AgentParams(self.arch, {k: ad.leaf(ad.value(v), name=k) for k, v in self.tensors.items()})

    def copy(self) -> "AgentParams":
        return AgentParams(self.arch, self.arrays())

    @property
    def size(self) -> int:
        return int(sum(ad.value(v).size for v in self.tensors.values()))


def init_params(arch: Architecture, seed: int = 0, zero: bool = False) -> AgentParams:
    """Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], or all zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        if zero:
            tensors[name] = np.zeros(shape)
            continue
        fan_in = arch.tensor_shapes()[name.replace(".bias", ".weight")][1]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return AgentParams(arch, tensors)


def _subnet(layers, tensors: Mapping, prefix: str, h):
    for k, layer in enumerate(layers):
        h = ad.affine(h, tensors[f"{prefix}.{k}.weight"], tensors[f"{prefix}.{k}.bias"])
        if layer.activation == "relu":
            h = ad.relu(h)
    return h


def forward(params: AgentParams, x, u_prev):
    """Next controls for stacked states x (..., 2D) and previous controls u_prev (..., K)."""
    arch = params.arch
    xv, uv = ad.value(x), ad.value(u_prev)
    if xv.shape[-1] != arch.state_width:
        raise ArchitectureError(f"state input has width {xv.shape[-1]}, expected {arch.state_width}")
    if uv.shape[-1] != arch.fa[0].in_features:
        raise ArchitectureError(f"action input has width {uv.shape[-1]}, expected {arch.fa[0].in_features}")
    t = params.tensors
    h = ad.add(_subnet(arch.fs, t, "fs", x), _subnet(arch.fa, t, "fa", u_prev))
    return _subnet(arch.fc, t, "fc", h)


def first_step_action(num_controls: int, batch: int | None = None) -> np.ndarray:
    """Vanishing controls fed to the agent as u_{-1}."""
    return np.zeros(num_controls if batch is None else (batch, num_controls))


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: AgentParams, path, config_hash: str = "", seed: int | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 data).

    The manifest lists each tensor's name, shape, offset and count (in float64
    elements) into the binary file, which holds all tensors back to back in
    row-major order.
    """
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    arrays = params.arrays()
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays, key=_tensor_order):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes(order="C"))
        offset += a.size
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "float64-le",
        "architecture": params.arch.widths(),
        "config_hash": config_hash,
        "seed": seed,
        "data_file": base.name + ".bin",
        "data_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
    }
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".bin").write_bytes(blob)
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return base.with_suffix(".json")


def load_checkpoint(path) -> tuple[AgentParams, dict]:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    manifest = json.loads(base.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = (base.parent / manifest["data_file"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["data_sha256"]:
        raise ValueError("checkpoint data does not match its manifest checksum")
    data = np.frombuffer(blob, dtype="<f8")
    tensors = {
        e["name"]: data[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
        for e in manifest["tensors"]
    }
    w = manifest["architecture"]
    arch = Architecture.from_widths(w["fs"], w["fa"], w["fc"])
    return AgentParams(arch, tensors), manifest


def _tensor_order(name: str):
    sub, idx, kind = name.split(".")
    return SUBNETS.index(sub), int(idx), kind != "weight"
