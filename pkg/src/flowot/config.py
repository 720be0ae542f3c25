"""Experiment configuration: INI grammar, validation, canonical echo.

A config file is standard INI text with the sections [run], [dataset],
[model], [train] and [eval]; see the README for the full grammar and
defaults.  Every field is validated before any compute starts and unknown
sections or keys are rejected with the offending line.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

_TABLE_COUPLINGS = ((2, 32), (16, 16), (10**9, 8))  # thresholds: d <= key -> value

_KNOWN_KEYS = {
    "run": {"task", "outdir"},
    "dataset": {"family", "base", "d", "n_inputs", "weights", "noise"},
    "model": {"levels", "couplings", "hidden", "clamp", "encoding", "residual"},
    "train": {"iterations", "batch", "latent_batch", "lr", "schedule", "seed"},
    "eval": {"samples"},
}

_SCHEDULE_RE = re.compile(r"^logspace\s*\[\s*(-?[\d.]+)\s*,\s*(-?[\d.]+)\s*\]$")


def default_levels(d: int) -> int:
    return max(1, int(np.floor(np.log2(d))))


def default_couplings(d: int) -> int:
    for bound, k in _TABLE_COUPLINGS:
        if d <= bound:
            return k
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ExperimentConfig:
    """One fully-resolved experiment; mirrors the config file sections."""

    task: str
    outdir: str
    family: str
    base: str
    d: int
    n_inputs: int
    weights: tuple[float, ...]
    noise: float
    levels: int
    couplings: int
    hidden: tuple[int, ...]
    clamp: float
    encoding: str
    residual: bool
    iterations: int
    batch_size: int
    latent_batch: int | None
    learning_rate: float
    schedule_start: float
    schedule_end: float
    seed: int
    eval_samples: int

    def base_label(self) -> str:
        return self.base if self.family == "location-scatter" else "rotated-gaussian"

    def to_text(self) -> str:
        """Canonical normalized rendering; the config echo and hash input."""
        lines = [
            "[run]",
            f"task = {self.task}",
            f"outdir = {self.outdir}",
            "",
            "[dataset]",
            f"family = {self.family}",
        ]
        if self.family == "location-scatter":
            lines.append(f"base = {self.base}")
        lines += [
            f"d = {self.d}",
            f"n_inputs = {self.n_inputs}",
            "weights = " + ",".join(repr(w) for w in self.weights),
        ]
        if self.base == "swiss-roll":
            lines.append(f"noise = {self.noise!r}")
        lines += [
            "",
            "[model]",
            f"levels = {self.levels}",
            f"couplings = {self.couplings}",
            "hidden = " + ",".join(str(h) for h in self.hidden),
            f"clamp = {self.clamp!r}",
            f"encoding = {self.encoding}",
            f"residual = {'true' if self.residual else 'false'}",
            "",
            "[train]",
            f"iterations = {self.iterations}",
            f"batch = {self.batch_size}",
        ]
        if self.latent_batch is not None:
            lines.append(f"latent_batch = {self.latent_batch}")
        lines += [
            f"lr = {self.learning_rate!r}",
            f"schedule = logspace[{self.schedule_start!r},{self.schedule_end!r}]",
            f"seed = {self.seed}",
            "",
            "[eval]",
            f"samples = {self.eval_samples}",
            "",
        ]
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    def run_id(self) -> str:
        return (
            f"{self.task}-{self.base_label()}-d{self.d}-n{self.n_inputs}"
            f"-s{self.seed}-{self.config_hash()[:8]}"
        )


def _find_line(raw_text: str, token: str) -> str:
    for lineno, line in enumerate(raw_text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(token):
            return f"line {lineno}: {stripped}"
    return token


def _fail(raw_text: str, token: str, message: str):
    raise ConfigError(f"{message} ({_find_line(raw_text, token)})")


class _Section:
    def __init__(self, raw_text: str, name: str, data: dict):
        self.raw = raw_text
        self.name = name
        self.data = data

    def take(self, key, parse, default=None, required=False):
        if key not in self.data:
            if required:
                raise ConfigError(f"missing required key '{key}' in section [{self.name}]")
            return default
        raw = self.data[key]
        try:
            return parse(raw)
        except ConfigError:
            raise
        except Exception as exc:
            _fail(self.raw, key, f"invalid value for '{key}': {exc}")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got '{raw}'")


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.split(","))


def _parse_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(","))


def _parse_schedule(raw: str) -> tuple[float, float]:
    match = _SCHEDULE_RE.match(raw.strip())
    if not match:
        raise ValueError(f"expected 'logspace[start,end]', got '{raw}'")
    return float(match.group(1)), float(match.group(2))


def parse_config(path) -> ExperimentConfig:
    """Read, validate and normalize one experiment config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw_text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(raw_text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            _fail(raw_text, f"[{section}]", f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                _fail(raw_text, key, f"unknown key '{key}' in section [{section}]")

    def section(name):
        return _Section(raw_text, name, dict(parser[name]) if parser.has_section(name) else {})

    run, dataset, model, trainsec, evalsec = map(section, ("run", "dataset", "model", "train", "eval"))

    task = run.take("task", str.strip, required=True)
    if task not in ("ot", "barycenter"):
        _fail(raw_text, "task", f"task must be 'ot' or 'barycenter', got '{task}'")
    outdir = run.take("outdir", str.strip, default="runs")

    family = dataset.take("family", str.strip, default="location-scatter")
    if family not in ("location-scatter", "rotated-gaussian"):
        _fail(raw_text, "family", f"unknown dataset family '{family}'")
    base = dataset.take("base", str.strip, default="gaussian")
    if family == "rotated-gaussian" and "base" in dataset.data:
        _fail(raw_text, "base", "the rotated-gaussian family takes no base")
    if base not in ("gaussian", "uniform-cube", "swiss-roll"):
        _fail(raw_text, "base", f"unknown base '{base}'")
    d = dataset.take("d", int, required=True)
    if d < 2:
        _fail(raw_text, "d", "dataset dimension d must be >= 2")
    if base == "swiss-roll" and d != 2:
        _fail(raw_text, "d", "swiss-roll base requires d = 2")
    n_inputs = dataset.take("n_inputs", int, default=2 if task == "ot" else 4)
    if n_inputs < 1:
        _fail(raw_text, "n_inputs", "n_inputs must be >= 1")
    if task == "ot" and n_inputs != 2:
        _fail(raw_text, "n_inputs", "the ot task uses exactly 2 input distributions")
    if task == "ot" and family != "location-scatter":
        _fail(raw_text, "family", "the ot task supports the location-scatter family only")
    if task == "ot" and base == "swiss-roll":
        _fail(raw_text, "base", "the ot task has no oracle for the swiss-roll base")
    weights = dataset.take("weights", _parse_floats, default=tuple(1.0 / n_inputs for _ in range(n_inputs)))
    if len(weights) != n_inputs:
        _fail(raw_text, "weights", f"expected {n_inputs} weights, got {len(weights)}")
    if min(weights) < 0:
        _fail(raw_text, "weights", "weights must be non-negative")
    if abs(sum(weights) - 1.0) > 1e-9:
        _fail(raw_text, "weights", "weights must sum to 1")
    noise = dataset.take("noise", float, default=0.05)
    if noise < 0:
        _fail(raw_text, "noise", "noise must be >= 0")

    levels = model.take("levels", int, default=default_levels(d))
    couplings = model.take("couplings", int, default=default_couplings(d))
    if levels < 1 or couplings < 1:
        _fail(raw_text, "levels", "levels and couplings must be >= 1")
    active = d
    for _ in range(levels - 1):
        active -= active // 2
    if active < 2:
        _fail(raw_text, "levels", f"levels = {levels} leaves fewer than 2 active dims at d = {d}")
    hidden = model.take("hidden", _parse_ints, default=(64, 64))
    if not hidden or min(hidden) < 1:
        _fail(raw_text, "hidden", "hidden sizes must be positive")
    clamp = model.take("clamp", float, default=5.0)
    if clamp <= 0:
        _fail(raw_text, "clamp", "clamp must be positive")
    default_encoding = "scalar" if family == "rotated-gaussian" else "one-hot"
    encoding = model.take("encoding", str.strip, default=default_encoding)
    if encoding not in ("one-hot", "scalar"):
        _fail(raw_text, "encoding", f"unknown encoding '{encoding}'")
    if encoding == "scalar" and family != "rotated-gaussian":
        _fail(raw_text, "encoding", "scalar encoding requires the rotated-gaussian family")
    if encoding == "one-hot" and family == "rotated-gaussian":
        _fail(raw_text, "encoding", "the rotated-gaussian family uses scalar encoding")
    residual = model.take("residual", _parse_bool, default=True)

    iterations = trainsec.take("iterations", int, required=True)
    if iterations < 2:
        _fail(raw_text, "iterations", "iterations must be >= 2")
    batch = trainsec.take("batch", int, required=True)
    if batch < 1:
        _fail(raw_text, "batch", "batch must be >= 1")
    latent_batch = trainsec.take("latent_batch", int, default=None)
    if latent_batch is not None and latent_batch < 1:
        _fail(raw_text, "latent_batch", "latent_batch must be >= 1")
    lr = trainsec.take("lr", float, required=True)
    if lr <= 0:
        _fail(raw_text, "lr", "lr must be positive")
    schedule_start, schedule_end = trainsec.take("schedule", _parse_schedule, default=(0.0, -2.0))
    seed = trainsec.take("seed", int, default=0)
    if seed < 0:
        _fail(raw_text, "seed", "seed must be >= 0")

    eval_samples = evalsec.take("samples", int, default=100_000)
    if eval_samples < d + 1:
        _fail(raw_text, "samples", "eval samples must be at least d + 1")

    return ExperimentConfig(
        task=task,
        outdir=outdir,
        family=family,
        base=base,
        d=d,
        n_inputs=n_inputs,
        weights=weights,
        noise=noise,
        levels=levels,
        couplings=couplings,
        hidden=hidden,
        clamp=clamp,
        encoding=encoding,
        residual=residual,
        iterations=iterations,
        batch_size=batch,
        latent_batch=latent_batch,
        learning_rate=lr,
        schedule_start=schedule_start,
        schedule_end=schedule_end,
        seed=seed,
        eval_samples=eval_samples,
    )


def with_outdir(config: ExperimentConfig, outdir: str) -> ExperimentConfig:
    return replace(config, outdir=outdir)
