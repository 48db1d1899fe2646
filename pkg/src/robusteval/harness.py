"""Experiment orchestration: config files and attack sweeps whose batches
are re-verified before any accuracy is reported."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from robusteval.advbatch import AdvBatch, load_advbatch, save_advbatch
from robusteval.attacks import PRESETS, best_of_both, make_spec, run_attack
from robusteval.data import load_data
from robusteval.errors import ConfigError
from robusteval.model import RandomnessPolicy, load_model
from robusteval.verifier import verify_accuracy, verify_bounds

logger = logging.getLogger(__name__)

SEED_ENV = "ROBUSTEVAL_SEED"


class ConfigParseError(ConfigError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _int(v):
    return int(v)


def _eps(v):
    try:
        eps = Fraction(v.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a number or fraction: {v!r}") from exc
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    return eps


def _classes(v):
    return [int(c) for c in v.replace(" ", "").split(",") if c]


GLOBAL_KEYS = {
    "model": str, "data": str, "split": str, "variant": _int, "classes": _classes,
    "samples": _int, "eps": _eps, "runs": _int, "seed": _int, "mode": str, "out": str,
}
ATTACK_KEYS = {
    "attack": str, "preset": str, "steps": _int, "eot_samples": _int, "step_size": float,
    "loss": str, "kappa": float, "early_stop": lambda v: v.strip().lower() in ("1", "true", "yes", "on"),
    "of": lambda v: [s.strip() for s in v.split(",") if s.strip()],
}
DEFAULTS = {"split": "test", "variant": 10, "classes": None, "samples": 100, "eps": Fraction(8, 255),
            "runs": 10, "seed": 0, "mode": "fresh", "out": None}


@dataclass
class AttackSection:
    name: str
    attack: str = "pgd"
    preset: str = "plain"
    overrides: dict = field(default_factory=dict)
    of: list = field(default_factory=list)
    line: int = 0


@dataclass
class ExperimentConfig:
    model: str
    data: str
    split: str = "test"
    variant: int = 10
    classes: list | None = None
    samples: int = 100
    eps: Fraction = Fraction(8, 255)
    runs: int = 10
    seed: int = 0
    mode: str = "fresh"
    out: str | None = None
    attacks: list[AttackSection] = field(default_factory=list)
    base_dir: str = "."

    @property
    def epsilon(self) -> float:
        return float(self.eps)

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) or path.startswith("synth") else os.path.join(self.base_dir, path)


_SECTION = re.compile(r"^\[\s*attack\s+([A-Za-z0-9_.+-]+)\s*\]$")


def config_parse(path_or_text, text: bool = False) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``[attack NAME]`` opens a section whose
    keys configure one row. ``#`` and ``;`` start comments. Unknown keys,
    duplicate keys or sections and a missing ``model`` raise
    :class:`ConfigParseError` with the offending line number."""
    if text:
        source, base = str(path_or_text), "."
    else:
        source = Path(path_or_text).read_text()
        base = str(Path(path_or_text).resolve().parent)
    values: dict = {}
    sections: list[AttackSection] = []
    current: AttackSection | None = None
    seen: set = set()
    lineno = 0
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            name = m.group(1)
            if any(s.name == name for s in sections):
                raise ConfigParseError(lineno, f"duplicate section [attack {name}]")
            current = AttackSection(name, line=lineno)
            sections.append(current)
            seen = set()
            continue
        if line.startswith("["):
            raise ConfigParseError(lineno, f"unknown section header {line!r}; expected [attack NAME]")
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigParseError(lineno, f"expected key = value, got {raw.strip()!r}")
        table = GLOBAL_KEYS if current is None else ATTACK_KEYS
        if key not in table:
            where = "top level" if current is None else f"[attack {current.name}]"
            raise ConfigParseError(lineno, f"unknown key {key!r} in {where}")
        target = values if current is None else seen
        if key in target:
            raise ConfigParseError(lineno, f"duplicate key {key!r}")
        try:
            parsed = table[key](value)
        except ValueError as exc:
            raise ConfigParseError(lineno, f"bad value for {key!r}: {exc}") from None
        if current is None:
            values[key] = parsed
        else:
            seen.add(key)
            if key == "attack":
                current.attack = parsed
            elif key == "preset":
                current.preset = parsed
            elif key == "of":
                current.of = parsed
            else:
                current.overrides[key] = parsed
    for req in ("model", "data"):
        if req not in values:
            raise ConfigParseError(lineno, f"missing required key {req!r}")
    cfg = ExperimentConfig(**{**DEFAULTS, **values}, attacks=sections, base_dir=base)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.samples < 1 or cfg.runs < 1:
        raise ConfigParseError(0, "samples and runs must be >= 1")
    if cfg.mode not in ("fresh", "frozen"):
        raise ConfigParseError(0, f"mode must be fresh or frozen, got {cfg.mode!r}")
    names = []
    for s in cfg.attacks:
        if s.attack not in ("pgd", "apgd", "best", "none"):
            raise ConfigParseError(s.line, f"unknown attack {s.attack!r} in [attack {s.name}]")
        if s.attack in ("pgd", "apgd") and s.preset not in PRESETS:
            raise ConfigParseError(s.line, f"unknown preset {s.preset!r} in [attack {s.name}]")
        if s.attack == "best":
            if not s.of:
                raise ConfigParseError(s.line, f"[attack {s.name}] needs 'of = name, name'")
            for ref in s.of:
                if ref not in names:
                    raise ConfigParseError(s.line, f"[attack {s.name}] refers to {ref!r}, which is not an earlier section")
        names.append(s.name)


# --- running ------------------------------------------------------------------------

COLUMNS = ["attack", "mean", "std", "n_samples", "eps", "verified"]


@dataclass
class Row:
    attack: str
    mean: float | None
    std: float | None
    n_samples: int
    eps: Fraction
    verified: bool
    error: str = ""

    def cells(self) -> list[str]:
        if not self.verified:
            return [self.attack, "INVALID", "INVALID", str(self.n_samples), str(self.eps), "false"]
        return [self.attack, f"{self.mean:.6f}", f"{self.std:.6f}", str(self.n_samples), str(self.eps), "true"]


@dataclass
class ExperimentResult:
    rows: list[Row]
    run_dir: Path
    seed: int

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'attack':<24} {'robust acc (%)':>16}  verified"]
        for r in self.rows:
            acc = "INVALID" if not r.verified else f"{100 * r.mean:.1f} ± {100 * r.std:.1f}"
            lines.append(f"{r.attack:<24} {acc:>16}  {'yes' if r.verified else 'NO: ' + r.error}")
        return "\n".join(lines) + "\n"


def effective_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else seed


def select_samples(dataset, n: int, seed: int):
    """``n`` samples in a seeded random order (all of them if fewer)."""
    order = np.random.default_rng(seed).permutation(len(dataset))[: min(n, len(dataset))]
    return dataset.subset(np.sort(order))


def write_manifest(run_dir: Path) -> Path:
    """``sha256  name`` per artifact (sha256sum format), sorted by name."""
    lines = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.sha256":
            lines.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.relative_to(run_dir).as_posix()}")
    out = run_dir / "manifest.sha256"
    out.write_text("\n".join(lines) + "\n")
    return out


def run_experiment(config, out_dir=None, attack_hook=None) -> ExperimentResult:
    """Run every configured attack, save each AdvBatch, re-load and verify
    it, then report mean and std robust accuracy over ``runs`` evaluations.

    A batch failing the bound check yields an INVALID row. ``attack_hook``
    (name, batch) -> batch may replace a batch before it is saved; tests use
    it to inject faulty attacks.
    """
    cfg = config if isinstance(config, ExperimentConfig) else config_parse(config)
    seed = effective_seed(cfg.seed)
    run_dir = Path(out_dir or cfg.out or "run")
    if not run_dir.is_absolute() and out_dir is None:
        run_dir = Path(cfg.base_dir) / run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(config, ExperimentConfig):
        (run_dir / "config.ini").write_text(Path(config).read_text())
    model = load_model(cfg.resolve(cfg.model))
    data = load_data(cfg.resolve(cfg.data), cfg.split, cfg.variant, cfg.classes)
    subset = select_samples(data, cfg.samples, seed)
    x, y = subset.images, subset.labels
    batches: dict[str, AdvBatch] = {}
    rows = []
    for sec in cfg.attacks:
        logger.info("attack %s (%s/%s)", sec.name, sec.attack, sec.preset)
        if sec.attack == "none":
            batch = AdvBatch(x, x.copy(), y, cfg.epsilon, sec.name, seed)
        elif sec.attack == "best":
            batch = best_of_both([batches[r] for r in sec.of], model, RandomnessPolicy.fresh(seed))
            batch.attack = sec.name
        else:
            spec = make_spec(sec.attack, sec.preset, cfg.epsilon, seed, name=sec.name, **sec.overrides)
            batch = run_attack(sec.attack, model, x, y, spec).to_batch()
        if attack_hook is not None:
            batch = attack_hook(sec.name, batch)
        batches[sec.name] = batch
        path = run_dir / f"{sec.name}.advx"
        save_advbatch(batch, path)
        loaded = load_advbatch(path)
        clean = load_data(cfg.resolve(cfg.data), cfg.split, cfg.variant, cfg.classes)
        bounds = verify_bounds(loaded, clean=clean)
        (run_dir / f"{sec.name}.bounds.csv").write_text(bounds.to_csv())
        if not bounds.passed:
            logger.error("%s: %s", sec.name, bounds.summary())
            rows.append(Row(sec.name, None, None, len(loaded), cfg.eps, False, bounds.summary()))
            continue
        acc = verify_accuracy(loaded, model, cfg.runs, seed, cfg.mode)
        rows.append(Row(sec.name, acc.mean, acc.std, len(loaded), cfg.eps, True))
    result = ExperimentResult(rows, run_dir, seed)
    (run_dir / "results.csv").write_text(result.csv())
    (run_dir / "results.txt").write_text(result.table())
    write_manifest(run_dir)
    return result
