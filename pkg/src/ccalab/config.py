"""Experiment configuration: a line-oriented ``key = value`` format with ``[sections]``.

Parsing collects every problem (unknown keys, duplicates, type and range
errors) with its line number before reporting, rather than stopping at the
first one. Comments start with ``#`` or ``;``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigurationError

AXES = ("cca_lambda", "cca_beta", "cfg_s", "cca_cfg_s")
ALIGN_LOSSES = ("none", "cca", "dpo", "unlearn", "mle")


@dataclass(frozen=True)
class RunSection:
    out_dir: str = "runs/default"
    seed: int = 0
    record_every: int = 100
    dataset_size: int = 10000
    data_mode: str = "exact"
    target_s: float = 1.0
    revision: str = ""


@dataclass(frozen=True)
class SpecSection:
    family: str = "random-dirichlet"
    seed: int = 0
    V: int = 3
    N: int = 2
    C: int = 3
    concentration: float = 1.0


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 4000
    lr: float = 4.0
    dropout_prob: float = 0.1
    batch_size: int = 256


@dataclass(frozen=True)
class AlignSection:
    loss: str = "cca"
    beta: float = 0.02
    lam: float = 1000.0
    lambda_mode: str = "global"
    beta_d: float = 0.1
    lambda_u: float = 0.05
    steps: int = -1  # -1: one epoch over the dataset
    lr: float = 1e-5
    lr_scale: str = "none"
    batch_size: int = 256
    dropout_prob: float = 0.0


@dataclass(frozen=True)
class GuidanceSection:
    kind: str = "none"
    s: float = 0.0
    s_max: float = 0.0
    classifier_steps: int = 2000


@dataclass(frozen=True)
class SweepSection:
    axis: tuple = ()
    grid: tuple = ()
    grid_cca_lambda: tuple = ()
    grid_cca_beta: tuple = ()
    grid_cfg_s: tuple = ()
    grid_cca_cfg_s: tuple = ()
    cca_cfg_lambda: float = 1.0

    def grid_for(self, axis: str) -> tuple:
        own = getattr(self, f"grid_{axis}")
        if own:
            return own
        return self.grid if len(self.axis) == 1 else ()


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    spec: SpecSection = field(default_factory=SpecSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    align: AlignSection = field(default_factory=AlignSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def align_steps(self) -> int:
        if self.align.steps >= 0:
            return self.align.steps
        return math.ceil(self.run.dataset_size / self.align.batch_size)

    def with_overrides(self, **run_fields) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, **{k: v for k, v in run_fields.items() if v is not None}))

    def hash(self) -> str:
        """Digest of everything that affects numbers (the output directory is excluded)."""
        text = serialize_config(replace(self, run=replace(self.run, out_dir="", revision="")))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


SECTIONS = {
    "run": RunSection,
    "spec": SpecSection,
    "pretrain": PretrainSection,
    "align": AlignSection,
    "guidance": GuidanceSection,
    "sweep": SweepSection,
}


def _convert(raw: str, default, key: str):
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return v
    if isinstance(default, tuple):
        items = [t.strip() for t in raw.split(",") if t.strip()]
        if key == "axis":
            return tuple(items)
        out = []
        for t in items:
            v = float(t)
            if not math.isfinite(v):
                raise ValueError(f"grid values must be finite, got {t!r}")
            out.append(v)
        return tuple(out)
    return raw


def _check(section: str, key: str, v) -> str | None:
    """Range/enum constraint for one field; returns an error message or None."""
    nonneg = {("run", "seed"), ("spec", "seed"), ("pretrain", "steps"), ("guidance", "classifier_steps"),
              ("guidance", "s"), ("guidance", "s_max"), ("align", "lam"), ("align", "lambda_u"),
              ("sweep", "cca_cfg_lambda")}
    positive = {("run", "record_every"), ("run", "dataset_size"), ("pretrain", "batch_size"),
                ("align", "batch_size"), ("align", "beta"), ("align", "beta_d"), ("pretrain", "lr"), ("align", "lr"),
                ("spec", "concentration")}
    probs = {("pretrain", "dropout_prob"), ("align", "dropout_prob")}
    enums = {("run", "data_mode"): ("exact", "empirical"),
             ("spec", "family"): ("random-dirichlet", "needle", "independent"),
             ("align", "loss"): ALIGN_LOSSES, ("align", "lambda_mode"): ("global", "exact"),
             ("align", "lr_scale"): ("none", "inv_beta_sq"),
             ("guidance", "kind"): ("none", "cfg", "cfgv2", "classifier")}
    k = (section, key)
    if k in nonneg and v < 0:
        return f"{key} must be >= 0, got {v}"
    if k in positive and not v > 0:
        return f"{key} must be > 0, got {v}"
    if k in probs and not 0 <= v <= 1:
        return f"{key} must lie in [0, 1], got {v}"
    if k in enums and v not in enums[k]:
        return f"{key} must be one of {', '.join(enums[k])}, got {v!r}"
    if k == ("run", "target_s") and v < 0:
        return f"target_s must be >= 0, got {v}"
    if k == ("align", "steps") and v < -1:
        return f"steps must be >= 0 (or -1 for one epoch), got {v}"
    if k == ("spec", "V") and v < 2 or k in (("spec", "N"), ("spec", "C")) and v < 1:
        return f"{key} out of range: {v}"
    if section == "sweep" and key == "axis":
        bad = [a for a in v if a not in AXES]
        if bad:
            return f"unknown sweep axis {bad[0]!r}; choose from {', '.join(AXES)}"
    if section == "sweep" and key.startswith("grid") and key != "grid" and any(g < 0 for g in v):
        return f"{key} values must be >= 0"
    return None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises ConfigurationError listing every problem found."""
    errors: list[str] = []
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    seen: dict[tuple[str, str], int] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                errors.append(f"line {lineno}: malformed section header {stripped!r}")
                section = None
                continue
            name = stripped[1:-1].strip()
            if name not in SECTIONS:
                errors.append(f"line {lineno}: unknown section [{name}]")
                section = None
            else:
                section = name
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, raw = (t.strip() for t in stripped.split("=", 1))
        if section is None:
            errors.append(f"line {lineno}: key {key!r} outside a known section")
            continue
        defaults = {f.name: f.default for f in fields(SECTIONS[section])}
        if key not in defaults:
            errors.append(f"line {lineno}: unknown key {key!r} in [{section}]")
            continue
        if (section, key) in seen:
            errors.append(f"line {lineno}: duplicate key {key!r} in [{section}] (first set on line {seen[section, key]})")
            continue
        seen[section, key] = lineno
        try:
            v = _convert(raw, defaults[key], key)
        except ValueError as e:
            errors.append(f"line {lineno}: {section}.{key}: type error: {e}")
            continue
        msg = _check(section, key, v)
        if msg:
            errors.append(f"line {lineno}: {section}.{key}: {msg}")
            continue
        values[section][key] = v

    sw = values["sweep"]
    for ax in sw.get("axis", ()):
        has = bool(sw.get(f"grid_{ax}")) or (len(sw.get("axis", ())) == 1 and bool(sw.get("grid")))
        if not has:
            errors.append(f"sweep axis {ax!r} has an empty grid")
    if values["guidance"].get("kind") == "cfgv2" and "s_max" not in values["guidance"]:
        errors.append("guidance kind cfgv2 requires s_max")
    sp = values["spec"]
    V, N = sp.get("V", SpecSection.V), sp.get("N", SpecSection.N)
    if isinstance(V, int) and isinstance(N, int) and V >= 2 and N >= 1 and V**N > 10**7:
        errors.append(f"spec: V^N = {V}^{N} exceeds the enumeration budget of 10^7")
    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
    return ExperimentConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) if isinstance(x, str) else repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    out = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, tuple) and not v:
                continue
            out.append(f"{f.name} = {_fmt(v)}")
        out.append("")
    return "\n".join(out)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
