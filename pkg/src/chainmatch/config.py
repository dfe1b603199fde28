"""Experiment configuration as a flat, commented ``dotted.key = value`` text file.

Example::

    # corpus
    corpus.n_speakers = 4
    corpus.noise_sigma = 0.1
    scenario.tau = 0.7
    matrix.taus = 0.5, 0.7, 0.9

Every key maps onto a field of one of the section dataclasses below; values are
converted to the field's type (lists are comma-separated). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from chainmatch.asr import ASRConfig
from chainmatch.augment import AugmentPolicy, strong_policy, weak_policy
from chainmatch.corpus import CorpusSpec
from chainmatch.trainer import ASRTrainConfig, ConsistencyTrainConfig, Scenario
from chainmatch.tts import TTSConfig, TTSTrainConfig


@dataclass(frozen=True)
class MatrixConfig:
    blocks: tuple[str, ...] = (
        "static-original",
        "static-weak_perturbed",
        "dynamic-original",
        "dynamic-weak_perturbed",
    )
    weak_kinds: tuple[str, ...] = ("weak_specaugment", "speech_chain")
    taus: tuple[float, ...] = (0.5, 0.7, 0.9)
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str = "runs/default"
    corpus_seed: int = 0
    corpus: CorpusSpec = CorpusSpec()
    asr: ASRConfig = ASRConfig()
    asr_train: ASRTrainConfig = ASRTrainConfig()
    tts: TTSConfig = TTSConfig()
    tts_train: TTSTrainConfig = TTSTrainConfig()
    consistency: ConsistencyTrainConfig = ConsistencyTrainConfig()
    weak: AugmentPolicy = field(default_factory=lambda: weak_policy(1))
    strong: AugmentPolicy = field(default_factory=lambda: strong_policy(2))
    scenario: Scenario = Scenario()
    matrix: MatrixConfig = MatrixConfig()

    def validate(self) -> None:
        self.corpus.validate()
        for tau in self.matrix.taus:
            if not 0.0 <= tau <= 1.0:
                raise ValueError(f"tau {tau} outside [0, 1]")
        for kind in self.matrix.weak_kinds:
            if kind not in ("weak_specaugment", "speech_chain"):
                raise ValueError(f"unknown weak augmentation {kind!r}")
        valid_blocks = {f"{m}-{i}" for m in ("static", "dynamic") for i in ("original", "weak_perturbed")}
        for block in self.matrix.blocks:
            if block not in valid_blocks:
                raise ValueError(f"unknown scenario block {block!r}")
        if self.asr.n_feats != self.corpus.n_feats or self.tts.n_feats != self.corpus.n_feats:
            raise ValueError("asr.n_feats and tts.n_feats must equal corpus.n_feats")


def _convert(text: str, kind, default):
    text = text.strip()
    origin = typing.get_origin(kind)
    if origin is tuple or isinstance(default, tuple):
        args = typing.get_args(kind)
        elem = args[0] if args else str
        return tuple(_convert(part, elem, None) for part in text.split(",") if part.strip())
    if kind is bool or isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if kind is int or (isinstance(default, int) and not isinstance(default, bool)):
        return int(text)
    if kind is float or isinstance(default, float):
        return float(text)
    if isinstance(default, str) and hasattr(default, "value"):  # str-valued enums
        return type(default)(text)
    return text


def _resolve_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls, globalns=vars(__import__(cls.__module__, fromlist=["_"])))


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    config = base or ExperimentConfig()
    sections: dict[str, dict[str, object]] = {}
    top: dict[str, object] = {}
    top_types = _resolve_types(ExperimentConfig)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        head, _, rest = key.partition(".")
        if head not in top_types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        current = getattr(config, head)
        if not rest:
            if dataclasses.is_dataclass(current):
                raise ValueError(f"line {lineno}: {key!r} is a section, not a value")
            top[head] = _convert(value, top_types[head], current)
            continue
        if not dataclasses.is_dataclass(current) or "." in rest:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        names = {f.name for f in fields(current)}
        if rest not in names:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        hints = _resolve_types(type(current))
        sections.setdefault(head, {})[rest] = _convert(value, hints[rest], getattr(current, rest))
    updates = dict(top)
    for head, values in sections.items():
        updates[head] = replace(getattr(config, head), **values)
    config = replace(config, **updates)
    config.validate()
    return config


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            lines.append(f"# {f.name}")
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} = {_format(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"
