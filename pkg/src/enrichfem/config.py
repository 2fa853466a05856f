"""Run configuration for the CLI.

Plain-text key=value files with five sections:

    [problem]     id, mu, box, n_p, n_ref
    [mesh]        N, k, n_r, n_t
    [training]    n_epochs, n_col, n_bc, n_data, lr, decay, n_switch,
                  batch_size, w_r, w_b, w_data, w_sob
    [enrichment]  mode, M, bc_mode, m
    [output]      directory, seed, samples

Unknown sections and keys are rejected.  Lists are comma-separated
(`N = 8, 16, 32`); the parameter box is one `lo,hi` pair per parameter
joined by semicolons.  Every run writes the fully resolved configuration
(defaults filled in, training preset merged) next to its outputs, and that
file reproduces the run byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .catalog import PROBLEM_IDS, get_problem
from .errors import ConfigError
from .training import TrainingConfig

MODES = ("standard", "additive", "multiplicative")
BC_MODES = ("strong", "free")

_TRAINING_KEYS = (
    "n_epochs", "n_col", "n_bc", "n_data", "lr", "decay", "n_switch",
    "batch_size", "w_r", "w_b", "w_data", "w_sob",
)
_INT_TRAINING_KEYS = frozenset(
    ("n_epochs", "n_col", "n_bc", "n_data", "n_switch", "batch_size")
)

_SECTION_KEYS = {
    "problem": ("id", "mu", "box", "n_p", "n_ref"),
    "mesh": ("N", "k", "n_r", "n_t"),
    "training": _TRAINING_KEYS,
    "enrichment": ("mode", "M", "bc_mode", "m"),
    "output": ("directory", "seed", "samples"),
}

# seed and box are TrainingConfig fields but are owned by other sections
_REDIRECTED = {"seed": "[output]", "box": "[problem]"}


def parse_config(text: str) -> Dict[str, Dict[str, str]]:
    """Section/key/value triples from a config file body.

    Rejects unknown sections and keys, duplicate keys, and any assignment
    outside a section.  Full-line comments start with '#'.
    """
    sections: Dict[str, Dict[str, str]] = {}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SECTION_KEYS:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            if name in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{name}]")
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: assignment before any section")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SECTION_KEYS[current]:
            hint = _REDIRECTED.get(key)
            extra = f" (it belongs in {hint})" if hint else ""
            raise ConfigError(
                f"line {lineno}: unknown key {key!r} in [{current}]{extra}"
            )
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = value
    return sections


def _parse_int(value: str, where: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {value!r}") from None


def _parse_float(value: str, where: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if not np.isfinite(out):
        raise ConfigError(f"{where}: value must be finite, got {value!r}")
    return out


def _parse_list(value: str, parse, where: str) -> tuple:
    items = [s.strip() for s in value.split(",")]
    if any(not s for s in items):
        raise ConfigError(f"{where}: empty entry in list {value!r}")
    return tuple(parse(s, where) for s in items)


def _parse_box(value: str, n_params: int, where: str) -> np.ndarray:
    rows = []
    for part in value.split(";"):
        pair = _parse_list(part, _parse_float, where)
        if len(pair) != 2 or pair[0] >= pair[1]:
            raise ConfigError(f"{where}: each box entry must be lo,hi with lo < hi")
        rows.append(pair)
    if len(rows) != n_params:
        raise ConfigError(
            f"{where}: box has {len(rows)} rows for {n_params} parameters"
        )
    return np.asarray(rows, dtype=float)


@dataclass
class RunConfig:
    """Resolved run configuration; one instance drives one command."""

    problem_id: str
    mu: Optional[np.ndarray] = None
    box: Optional[np.ndarray] = None
    n_p: int = 0
    n_ref: int = 0
    mesh_sizes: Tuple[int, ...] = ()
    k: int = 1
    n_r: Optional[int] = None
    n_t: Optional[int] = None
    training: Dict[str, object] = field(default_factory=dict)
    modes: Tuple[str, ...] = ("standard",)
    lifts: Tuple[float, ...] = (0.0,)
    bc_mode: str = "strong"
    ms: Optional[Tuple[int, ...]] = None
    out_dir: str = ""
    seed: int = 0
    samples: int = 0


def resolve_config(sections: Dict[str, Dict[str, str]]) -> RunConfig:
    """Typed RunConfig from parsed sections."""
    problem = sections.get("problem", {})
    if "id" not in problem:
        raise ConfigError("[problem] id is required")
    pid = problem["id"]
    if pid not in PROBLEM_IDS:
        raise ConfigError(
            f"unknown problem id {pid!r}; choose from {', '.join(PROBLEM_IDS)}"
        )
    n_params = get_problem(pid).n_params
    cfg = RunConfig(problem_id=pid)

    if "mu" in problem:
        mu = np.asarray(
            _parse_list(problem["mu"], _parse_float, "[problem] mu"), dtype=float
        )
        if mu.size != n_params:
            raise ConfigError(
                f"[problem] mu has {mu.size} entries; {pid} takes {n_params}"
            )
        cfg.mu = mu
    if "box" in problem:
        cfg.box = _parse_box(problem["box"], n_params, "[problem] box")
    if "n_p" in problem:
        cfg.n_p = _parse_int(problem["n_p"], "[problem] n_p")
        if cfg.n_p < 1:
            raise ConfigError("[problem] n_p must be at least 1")
    if "n_ref" in problem:
        cfg.n_ref = _parse_int(problem["n_ref"], "[problem] n_ref")
        if cfg.n_ref < 3:
            raise ConfigError("[problem] n_ref must be at least 3")

    mesh = sections.get("mesh", {})
    if "N" in mesh:
        cfg.mesh_sizes = _parse_list(mesh["N"], _parse_int, "[mesh] N")
        if any(n < 2 for n in cfg.mesh_sizes):
            raise ConfigError("[mesh] N entries must be at least 2")
    if "k" in mesh:
        cfg.k = _parse_int(mesh["k"], "[mesh] k")
        if cfg.k not in (1, 2, 3):
            raise ConfigError("[mesh] k must be 1, 2 or 3")
    for key in ("n_r", "n_t"):
        if key in mesh:
            if pid != "annulus":
                raise ConfigError(f"[mesh] {key} only applies to the annulus")
            value = _parse_int(mesh[key], f"[mesh] {key}")
            if value < 2:
                raise ConfigError(f"[mesh] {key} must be at least 2")
            setattr(cfg, key, value)

    training = sections.get("training", {})
    for key, value in training.items():
        where = f"[training] {key}"
        if key in _INT_TRAINING_KEYS:
            parsed: object = _parse_int(value, where)
            if parsed < 0:
                raise ConfigError(f"{where} must be nonnegative")
        else:
            parsed = _parse_float(value, where)
            if key.startswith("w_") and parsed < 0:
                raise ConfigError(f"{where} must be nonnegative")
        cfg.training[key] = parsed

    enrich = sections.get("enrichment", {})
    if "mode" in enrich:
        modes = tuple(s.strip() for s in enrich["mode"].split(","))
        for mode in modes:
            if mode not in MODES:
                raise ConfigError(
                    f"unknown mode {mode!r}; choose from {', '.join(MODES)}"
                )
        if len(set(modes)) != len(modes):
            raise ConfigError("[enrichment] mode lists a mode twice")
        cfg.modes = modes
    if "M" in enrich:
        cfg.lifts = _parse_list(enrich["M"], _parse_float, "[enrichment] M")
        if any(m < 0 for m in cfg.lifts):
            raise ConfigError("[enrichment] M entries must be nonnegative")
    if "bc_mode" in enrich:
        if enrich["bc_mode"] not in BC_MODES:
            raise ConfigError(
                f"unknown boundary mode {enrich['bc_mode']!r}; "
                f"choose from {', '.join(BC_MODES)}"
            )
        cfg.bc_mode = enrich["bc_mode"]
    if "m" in enrich:
        cfg.ms = _parse_list(enrich["m"], _parse_int, "[enrichment] m")
        if any(m < 1 for m in cfg.ms):
            raise ConfigError("[enrichment] m entries must be at least 1")

    output = sections.get("output", {})
    if "directory" in output:
        cfg.out_dir = output["directory"]
    if "seed" in output:
        cfg.seed = _parse_int(output["seed"], "[output] seed")
        if cfg.seed < 0:
            raise ConfigError("[output] seed must be nonnegative")
    if "samples" in output:
        cfg.samples = _parse_int(output["samples"], "[output] samples")

    return cfg


@dataclass(frozen=True)
class TrainingPreset:
    """Architecture and training defaults for one catalog problem."""

    hidden: Tuple[int, ...]
    activation: str
    n_fourier: int
    defaults: Dict[str, object]


TRAINING_PRESETS: Dict[str, TrainingPreset] = {
    "lap1d": TrainingPreset(
        hidden=(20, 80, 80, 80, 20, 10), activation="sine", n_fourier=0,
        defaults=dict(n_epochs=10000, n_col=5000, lr=9e-2, decay=0.99),
    ),
    "ell1d": TrainingPreset(
        hidden=(40, 40, 40, 40, 40), activation="tanh", n_fourier=0,
        defaults=dict(n_epochs=20000, n_col=5000, lr=1e-3, decay=0.99),
    ),
    "lap2d_low": TrainingPreset(
        hidden=(40, 60, 60, 60, 40), activation="sine", n_fourier=0,
        defaults=dict(
            n_epochs=5000, n_col=6000, lr=1.7e-2, decay=0.99, n_switch=1000
        ),
    ),
    "lap2d_high": TrainingPreset(
        hidden=(40, 60, 60, 60, 40), activation="sine", n_fourier=40,
        defaults=dict(
            n_epochs=20000, n_col=6000, lr=1.7e-2, decay=0.99, n_switch=1000
        ),
    ),
    "ell2d": TrainingPreset(
        hidden=(40, 60, 60, 60, 40), activation="tanh", n_fourier=0,
        defaults=dict(n_epochs=15000, n_col=8000, lr=1.6e-2, decay=0.99),
    ),
    "annulus": TrainingPreset(
        hidden=(40, 40, 40, 40, 40), activation="tanh", n_fourier=0,
        defaults=dict(
            n_epochs=4000, n_col=6000, lr=1e-2, decay=0.99, n_switch=3000
        ),
    ),
}


def merged_training(cfg: RunConfig) -> Dict[str, object]:
    """Preset defaults overlaid with the file's [training] overrides."""
    merged = dict(TRAINING_PRESETS[cfg.problem_id].defaults)
    merged.update(cfg.training)
    return merged


def training_config(cfg: RunConfig) -> TrainingConfig:
    return TrainingConfig(seed=cfg.seed, box=cfg.box, **merged_training(cfg))


def _fmt_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_list(values: Sequence) -> str:
    return ", ".join(_fmt_value(v) for v in values)


def write_resolved(cfg: RunConfig, path) -> None:
    """Resolved config: defaults applied, training preset merged.

    Feeding the written file back reproduces the run exactly (floats use
    shortest round-trip repr).
    """
    lines = ["[problem]", f"id = {cfg.problem_id}"]
    if cfg.mu is not None:
        lines.append(f"mu = {_fmt_list(cfg.mu.tolist())}")
    if cfg.box is not None:
        lines.append(
            "box = " + "; ".join(_fmt_list(row) for row in cfg.box.tolist())
        )
    if cfg.n_p:
        lines.append(f"n_p = {cfg.n_p}")
    if cfg.n_ref:
        lines.append(f"n_ref = {cfg.n_ref}")

    lines += ["", "[mesh]"]
    if cfg.mesh_sizes:
        lines.append(f"N = {_fmt_list(cfg.mesh_sizes)}")
    lines.append(f"k = {cfg.k}")
    if cfg.n_r is not None:
        lines.append(f"n_r = {cfg.n_r}")
    if cfg.n_t is not None:
        lines.append(f"n_t = {cfg.n_t}")

    merged = merged_training(cfg)
    lines += ["", "[training]"]
    for key in _TRAINING_KEYS:
        if key in merged:
            lines.append(f"{key} = {_fmt_value(merged[key])}")

    lines += [
        "",
        "[enrichment]",
        f"mode = {', '.join(cfg.modes)}",
        f"M = {_fmt_list(cfg.lifts)}",
        f"bc_mode = {cfg.bc_mode}",
    ]
    if cfg.ms is not None:
        lines.append(f"m = {_fmt_list(cfg.ms)}")

    lines += [
        "",
        "[output]",
        f"directory = {cfg.out_dir}",
        f"seed = {cfg.seed}",
        f"samples = {cfg.samples}",
        "",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines))
