"""Run configuration: a small sectioned key=value format plus built-in presets.

    # comment
    [task]
    kind = spin_chain
    M = 3

Layer lists are written as ``16x512, 512x32``; the token ``K`` stands for the
number of control fields of the task.  A ``preset`` key in ``[run]`` (or the
``--preset`` flag) supplies every value that the file does not set.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .agent import Architecture
from .integrator import DT_MODES, StepSpec
from .losses import LossWeights
from .systems import make_task
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default); a default of REQUIRED marks a key the file must set
REQUIRED = object()
LAYERS = "layers"

SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "preset": (str, None),
        "mode": (str, "dp"),
        "seed": (int, 0),
        "deterministic": (bool, False),
        "threads": (int, 1),
        "dt_mode": (str, "substep"),
        "out": (str, "runs/out"),
    },
    "task": {
        "kind": (str, REQUIRED),
        "n_steps": (int, REQUIRED),
        "n_sub": (int, REQUIRED),
        "dt": (float, REQUIRED),
        "omega": (float, None),
        "M": (int, None),
        "J": (float, None),
        "flip_p": (float, 0.1),
        "flip_mode": (str, "per_site"),
        "U": (float, None),
        "G": (float, None),
        "D": (int, None),
        "xi": (float, None),
        "alpha": (float, 2.0),
        "parametron_two_quadratures": (bool, False),
    },
    "loss": {
        "gamma": (float, REQUIRED),
        "c_F": (float, REQUIRED),
        "c_FN": (float, REQUIRED),
        "c_amp": (float, REQUIRED),
        "c_amp_sq": (float, REQUIRED),
    },
    "train": {
        "batch": (int, REQUIRED),
        "epochs": (int, REQUIRED),
        "lr": (float, REQUIRED),
        "eval_set_size": (int, 64),
        "grad_clip": (float, 0.0),
    },
    "agent": {
        "fs": (LAYERS, REQUIRED),
        "fa": (LAYERS, REQUIRED),
        "fc": (LAYERS, REQUIRED),
    },
    "reinforce": {
        "sigma2": (float, 0.04),
        "batch": (int, 1024),
        "lr": (float, 2.5e-4),
        "epochs": (int, 10000),
    },
}

KIND_REQUIRED = {"qubit": ("omega",), "spin_chain": ("M", "J"), "parametron": ("U", "D", "xi")}

_QUBIT_NET = {"fs": "4x256, 256x256, 256x128", "fa": "1x128, 128x128", "fc": "128x64, 64x32, 32x1"}
_QUBIT_TASK = {"kind": "qubit", "omega": 1.0, "n_steps": 150, "n_sub": 20, "dt": 0.01}
_CHAIN = {
    3: ("16x512, 512x32", "6x16, 16x32", "32x32, 32x6"),
    4: ("32x256, 256x256", "8x64, 64x256", "256x256, 256x8"),
    5: ("64x128, 128x128, 128x128", "10x32, 32x32, 32x128", "128x128, 128x128, 128x10"),
    6: ("128x256, 256x256, 256x256", "12x64, 64x64, 64x256", "256x256, 256x256, 256x12"),
}
# M: (N, c_F, c_FN, c_amp_sq, lr, b, epochs)
_CHAIN_HYPER = {
    3: (30, 1.8e-4, 8.1e-6, 4.2e-5, 8.4e-4, 256, 2000),
    4: (40, 1.1e-4, 3.6e-7, 4.1e-6, 7.0e-4, 512, 2000),
    5: (50, 2.0e-4, 0.13, 1.7e-6, 6.0e-4, 256, 3000),
    6: (60, 3.0e-4, 0.15, 1.7e-6, 6.0e-4, 256, 4000),
}


def _chain_preset(M: int) -> dict:
    n, c_f, c_fn, c_sq, lr, b, epochs = _CHAIN_HYPER[M]
    fs, fa, fc = _CHAIN[M]
    return {
        "task": {"kind": "spin_chain", "M": M, "J": 1.0, "flip_p": 0.1, "n_steps": n, "n_sub": 20, "dt": 0.001},
        "loss": {"gamma": 1.0, "c_F": c_f, "c_FN": c_fn, "c_amp": 0.0, "c_amp_sq": c_sq},
        "train": {"batch": b, "epochs": epochs, "lr": lr, "eval_set_size": 256},
        "agent": {"fs": fs, "fa": fa, "fc": fc},
    }


PRESETS: dict[str, dict] = {
    "qubit-single-loss": {
        "task": dict(_QUBIT_TASK),
        "loss": {"gamma": 1.0, "c_F": 3.1e-4, "c_FN": 0.0, "c_amp": 0.0, "c_amp_sq": 0.0},
        "train": {"batch": 256, "epochs": 400, "lr": 4.9e-4, "eval_set_size": 512},
        "agent": dict(_QUBIT_NET),
    },
    "qubit-multi-loss": {
        "task": dict(_QUBIT_TASK),
        "loss": {"gamma": 1.0, "c_F": 0.57, "c_FN": 2.6e-3, "c_amp": 0.0, "c_amp_sq": 3.9e-6},
        "train": {"batch": 256, "epochs": 400, "lr": 3.3e-3, "eval_set_size": 512},
        "agent": dict(_QUBIT_NET),
    },
    **{f"ghz-m{M}": _chain_preset(M) for M in (3, 4, 5, 6)},
    "parametron-cat": {
        "task": {
            "kind": "parametron", "U": 1.0, "G": -4.0, "D": 16, "xi": 0.4, "alpha": 2.0,
            "n_steps": 187, "n_sub": 200, "dt": 1e-4,
        },
        "loss": {"gamma": 0.999, "c_F": 0.8, "c_FN": 200.0, "c_amp": 0.01, "c_amp_sq": 0.0},
        "train": {"batch": 64, "epochs": 3000, "lr": 4e-5, "eval_set_size": 64},
        "agent": {
            "fs": "32x512, 512x256, 256x256, 256x64",
            "fa": "Kx128, 128x64",
            "fc": "64x64, 64x32, 32xK",
        },
    },
}


@dataclass
class RunConfig:
    train: TrainConfig
    mode: str
    seed: int
    deterministic: bool
    threads: int
    dt_mode: str
    out: Path
    preset: str | None
    values: dict          # fully resolved section -> key -> value
    reinforce: dict

    @property
    def config_hash(self) -> str:
        return config_hash(self.values)


def config_hash(values: dict) -> str:
    canon = json.dumps(values, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _coerce(section: str, key: str, raw, typ, where: str):
    if typ is LAYERS:
        return raw if isinstance(raw, str) else ", ".join(f"{a}x{b}" for a, b in raw)
    if isinstance(raw, str):
        text = raw.strip()
        try:
            if typ is bool:
                low = text.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError
            if typ is int:
                return int(text)
            if typ is float:
                return float(text)
            return text
        except ValueError:
            raise ConfigError(f"{where}: [{section}] {key} expects {typ.__name__}, got {raw!r}") from None
    if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
        return float(raw)
    if not isinstance(raw, typ) or (typ is int and isinstance(raw, bool)):
        raise ConfigError(f"{where}: [{section}] {key} expects {typ.__name__}, got {raw!r}")
    return raw


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse the sectioned key=value text; unknown sections/keys and bad types are errors."""
    out: dict[str, dict] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line.strip()!r}")
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            out.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected key = value, got {line.strip()!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any section")
        key, raw = (p.strip() for p in stripped.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if key in out[section]:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{section}]")
        out[section][key] = _coerce(section, key, raw, SCHEMA[section][key][0], where)
    return out


def parse_layers(text: str, k: int, where: str = "agent") -> list[tuple[int, int]]:
    pairs = []
    for item in text.split(","):
        item = item.strip().lower()
        try:
            a, b = (p.strip() for p in item.split("x"))
            pairs.append((k if a == "k" else int(a), k if b == "k" else int(b)))
        except ValueError:
            raise ConfigError(f"{where}: bad layer {item!r}; expected INxOUT") from None
    return pairs


def resolve(file_values: dict, preset: str | None = None, overrides: dict | None = None, source: str = "<config>") -> RunConfig:
    """Merge preset < file < overrides, check required keys and build the typed config."""
    preset = (overrides or {}).get("run", {}).get("preset") or file_values.get("run", {}).get("preset") or preset
    merged: dict[str, dict] = {s: {} for s in SCHEMA}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(sorted(PRESETS))}")
        for s, kv in PRESETS[preset].items():
            merged[s].update(kv)
    for layer in (file_values, overrides or {}):
        for s, kv in layer.items():
            for k, v in kv.items():
                if k not in SCHEMA[s]:
                    raise ConfigError(f"{source}: unknown key {k!r} in [{s}]")
                if v is not None:
                    merged[s][k] = _coerce(s, k, v, SCHEMA[s][k][0], source)
    merged["run"]["preset"] = preset

    missing = [f"[{s}] {k}" for s, keys in SCHEMA.items() for k, (_, d) in keys.items() if d is REQUIRED and k not in merged[s]]
    kind = merged["task"].get("kind")
    if kind in KIND_REQUIRED:
        missing += [f"[task] {k}" for k in KIND_REQUIRED[kind] if merged["task"].get(k) is None]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(missing)}")
    for s, keys in SCHEMA.items():
        for k, (_, d) in keys.items():
            if k not in merged[s] and d is not REQUIRED:
                merged[s][k] = d

    run = merged["run"]
    if run["mode"] not in ("dp", "reinforce"):
        raise ConfigError(f"{source}: [run] mode must be dp or reinforce, got {run['mode']!r}")
    if run["dt_mode"] not in DT_MODES:
        raise ConfigError(f"{source}: [run] dt_mode must be one of {DT_MODES}")
    if run["threads"] < 1:
        raise ConfigError(f"{source}: [run] threads must be >= 1")

    t = merged["task"]
    horizon = StepSpec.from_table(t["n_steps"], t["n_sub"], t["dt"], run["dt_mode"])
    task_params = {k: v for k, v in t.items() if k not in ("kind", "n_steps", "n_sub", "dt", "parametron_two_quadratures") and v is not None}
    if t["kind"] == "parametron":
        task_params["two_quadratures"] = t["parametron_two_quadratures"]
    try:
        task = make_task(t["kind"], task_params, horizon)
        k = task.num_controls
        a = merged["agent"]
        arch = Architecture.from_widths(
            parse_layers(a["fs"], k, "[agent] fs"), parse_layers(a["fa"], k, "[agent] fa"), parse_layers(a["fc"], k, "[agent] fc")
        )
        weights = LossWeights(**merged["loss"])
        tr = merged["train"]
        threads = 1 if run["deterministic"] else run["threads"]
        train = TrainConfig(
            task=task,
            arch=arch,
            weights=weights,
            batch=tr["batch"],
            epochs=tr["epochs"],
            lr=tr["lr"],
            seed=run["seed"],
            eval_set_size=tr["eval_set_size"],
            threads=threads,
            grad_clip=tr["grad_clip"] or None,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    hashed = {s: {k: v for k, v in kv.items() if not (s == "run" and k in ("out", "threads"))} for s, kv in merged.items()}
    return RunConfig(
        train=train,
        mode=run["mode"],
        seed=run["seed"],
        deterministic=run["deterministic"],
        threads=threads,
        dt_mode=run["dt_mode"],
        out=Path(run["out"]),
        preset=preset,
        values=hashed,
        reinforce=dict(merged["reinforce"]),
    )


def parse_config(path, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return resolve(parse_text(path.read_text(), str(path)), preset, overrides, str(path))


def load_preset(name: str, overrides: dict | None = None) -> RunConfig:
    return resolve({}, name, overrides, f"preset {name}")
