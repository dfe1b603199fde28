"""Experiment orchestration: CER evaluation, the scenario matrix, and reports."""

from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from chainmatch.asr import ASRModel, batch_beam_decode
from chainmatch.augment import AugmentContext, ReconstructionCache, WeakAugmentKind
from chainmatch.checkpoint import load_model, save_model
from chainmatch.config import ExperimentConfig
from chainmatch.corpus import EOS, CorpusSplit, Utterance, build_vocabulary, detokenize, generate_corpus
from chainmatch.trainer import MetricLog, Scenario, train_base, train_consistency
from chainmatch.tts import TTSModel, train_tts

log = logging.getLogger(__name__)

BLOCK_ORDER = ("static-original", "static-weak_perturbed", "dynamic-original", "dynamic-weak_perturbed")
KIND_ORDER = ("weak_specaugment", "speech_chain")
BLOCK_TITLES = {
    "static-original": "Static pseudo transcripts from original speech",
    "static-weak_perturbed": "Static pseudo transcripts from weak-perturbed speech",
    "dynamic-original": "Dynamic pseudo transcripts from original speech",
    "dynamic-weak_perturbed": "Dynamic pseudo transcripts from weak-perturbed speech",
}
KIND_TITLES = {"weak_specaugment": "Weak SpecAugment", "speech_chain": "Speech Chain Reconstruction"}


def edit_distance(hyp, ref) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def cer(hyp: str, ref: str) -> float:
    if not ref:
        raise ValueError("reference must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


@dataclass
class Evaluation:
    cer: float
    errors: int
    ref_chars: int
    per_utterance: list[tuple[str, str, int]] = field(default_factory=list)  # (hyp, ref, errors)


def evaluate(model: ASRModel, testset: list[Utterance], beam: int = 4) -> Evaluation:
    """Corpus-level CER: total edit distance over total reference characters."""
    vocab = build_vocabulary()
    hyps = batch_beam_decode(model, [u.features for u in testset], beam)
    rows = []
    for ids, u in zip(hyps, testset):
        hyp = detokenize(ids, vocab)
        ref = detokenize(u.transcript, vocab)
        rows.append((hyp, ref, edit_distance(hyp, ref)))
    errors = sum(r[2] for r in rows)
    chars = sum(len(r[1]) for r in rows)
    return Evaluation(errors / chars, errors, chars, rows)


# -- results table --------------------------------------------------------------------


@dataclass
class ResultsTable:
    """CER percentages: a baseline per seed, plus one cell per (block, kind, tau, seed)."""

    taus: tuple[float, ...]
    seeds: tuple[int, ...]
    baseline: dict[int, float] = field(default_factory=dict)
    cells: dict[tuple[str, str, float, int], float] = field(default_factory=dict)

    def baseline_median(self) -> float | None:
        vals = [self.baseline[s] for s in self.seeds if s in self.baseline]
        return statistics.median(vals) if vals else None

    def median(self, block: str, kind: str, tau: float) -> float | None:
        vals = [self.cells[(block, kind, tau, s)] for s in self.seeds if (block, kind, tau, s) in self.cells]
        return statistics.median(vals) if vals else None

    def best_in_block(self, block: str) -> tuple[str, float] | None:
        best = None
        for kind in KIND_ORDER:
            for tau in self.taus:
                m = self.median(block, kind, tau)
                if m is not None and (best is None or m < best[0]):
                    best = (m, kind, tau)
        return None if best is None else (best[1], best[2])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["block", "weak_kind", "tau", "seed", "cer"])
        for s in self.seeds:
            if s in self.baseline:
                writer.writerow(["baseline", "-", "", s, repr(self.baseline[s])])
        for block in BLOCK_ORDER:
            for kind in KIND_ORDER:
                for tau in self.taus:
                    for s in self.seeds:
                        key = (block, kind, tau, s)
                        if key in self.cells:
                            writer.writerow([block, kind, repr(tau), s, repr(self.cells[key])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, taus=None, seeds=None) -> ResultsTable:
        rows = list(csv.DictReader(io.StringIO(text)))
        found_taus = sorted({float(r["tau"]) for r in rows if r["tau"]})
        found_seeds = sorted({int(r["seed"]) for r in rows})
        table = cls(tuple(taus or found_taus), tuple(seeds or found_seeds))
        for r in rows:
            if r["block"] == "baseline":
                table.baseline[int(r["seed"])] = float(r["cer"])
            else:
                table.cells[(r["block"], r["weak_kind"], float(r["tau"]), int(r["seed"]))] = float(r["cer"])
        return table

    def to_markdown(self) -> str:
        head = "| weak augmentation | " + " | ".join(f"tau={t:g}" for t in self.taus) + " |"
        sep = "|---|" + "---|" * len(self.taus)
        lines = ["CER (%) on the test split, median over seeds " + ", ".join(map(str, self.seeds)) + ".", "", head, sep]
        base = self.baseline_median()
        base_txt = "n/a" if base is None else f"{base:.1f}"
        lines.append("| *Supervised baseline* | " + " | ".join([base_txt] * len(self.taus)) + " |")
        for block in BLOCK_ORDER:
            best = self.best_in_block(block)
            lines.append(f"| *{BLOCK_TITLES[block]}* |" + " |" * len(self.taus))
            for kind in KIND_ORDER:
                cells = []
                for tau in self.taus:
                    m = self.median(block, kind, tau)
                    if m is None:
                        cells.append("n/a")
                    elif best == (kind, tau):
                        cells.append(f"**{m:.1f}**")
                    else:
                        cells.append(f"{m:.1f}")
                lines.append(f"| {KIND_TITLES[kind]} | " + " | ".join(cells) + " |")
        lines.append("")
        lines.append("Bold marks the best cell of each block.")
        return "\n".join(lines) + "\n"


def emit_report(table: ResultsTable, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, md_path = out_dir / "results.csv", out_dir / "results.md"
        csv_path.write_text(table.to_csv(), encoding="utf-8")
        md_path.write_text(table.to_markdown(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return csv_path, md_path


# -- orchestration --------------------------------------------------------------------


class Workspace:
    """On-disk layout of one experiment's artifacts under ``config.output_dir``."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = Path(config.output_dir)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    def seed_dir(self, seed: int) -> Path:
        return self.root / f"seed{seed}"

    def base_ckpt(self, seed: int) -> Path:
        return self.seed_dir(seed) / "base.ckpt"

    def tts_ckpt(self, seed: int) -> Path:
        return self.seed_dir(seed) / "tts.ckpt"

    def cache_dir(self, seed: int) -> Path:
        return self.seed_dir(seed) / "reconstruction"

    def scenario_ckpt(self, seed: int, scenario: Scenario) -> Path:
        return self.seed_dir(seed) / f"{scenario.name}.ckpt"

    def metric_log(self, seed: int) -> MetricLog:
        return MetricLog(self.seed_dir(seed) / "metrics.log")

    def corpus(self) -> CorpusSplit:
        if (self.corpus_dir / "manifest.tsv").exists():
            return CorpusSplit.load(self.corpus_dir)
        corpus = generate_corpus(self.config.corpus, self.config.corpus_seed)
        corpus.save(self.corpus_dir)
        return corpus

    def base(self, seed: int, corpus: CorpusSplit) -> ASRModel:
        path = self.base_ckpt(seed)
        if path.exists():
            return load_model(path)
        model = train_base(
            corpus.labeled,
            corpus.dev,
            self.config.asr,
            replace(self.config.asr_train, seed=seed),
            on_epoch=_tagged(self.metric_log(seed), "base"),
        )
        save_model(model, path)
        return load_model(path)

    def tts(self, seed: int, corpus: CorpusSplit, base: ASRModel) -> TTSModel:
        path = self.tts_ckpt(seed)
        if path.exists():
            return load_model(path)
        model, _ = train_tts(
            corpus.labeled,
            corpus.unlabeled,
            corpus.dev,
            base,
            self.config.tts,
            replace(self.config.tts_train, seed=seed),
            on_epoch=_tagged(self.metric_log(seed), "tts"),
        )
        save_model(model, path)
        return load_model(path)

    def cache(self, seed: int, corpus: CorpusSplit, base: ASRModel, tts: TTSModel) -> ReconstructionCache:
        directory = self.cache_dir(seed)
        if directory.exists():
            cache = ReconstructionCache.load(directory)
            if cache.complete:
                return cache
        cache = ReconstructionCache(directory)
        cache.build(corpus.unlabeled, base, tts)
        return cache

    def context(self, seed: int, cache: ReconstructionCache | None) -> AugmentContext:
        return AugmentContext(weak=self.config.weak, strong=self.config.strong, seed=seed, cache=cache)

    def consistency(self, seed: int, scenario: Scenario, corpus, base, cache) -> ASRModel:
        path = self.scenario_ckpt(seed, scenario)
        if path.exists():
            return load_model(path)
        model = train_consistency(
            scenario,
            corpus.labeled,
            corpus.unlabeled,
            corpus.dev,
            base,
            self.context(seed, cache),
            config=replace(self.config.consistency, seed=seed),
            on_epoch=_tagged(self.metric_log(seed), scenario.name),
        )
        save_model(model, path)
        return load_model(path)


def _tagged(metric_log: MetricLog, tag: str):
    return lambda epoch, split, metric, value: metric_log(epoch, split, f"{tag}/{metric}", value)


def scenario_for(block: str, kind: str, tau: float, lambda_con: float) -> Scenario:
    mode, source = block.split("-", 1)
    return Scenario(mode, source, kind, tau, lambda_con)


def run_matrix(config: ExperimentConfig, seeds=None) -> ResultsTable:
    """Baseline once per seed, then every configured (block, weak kind, tau) cell.

    A cell that raises is logged and left missing; the run continues.
    """
    config.validate()
    seeds = tuple(seeds if seeds is not None else config.matrix.seeds)
    ws = Workspace(config)
    corpus = ws.corpus()
    table = ResultsTable(tuple(config.matrix.taus), seeds)
    needs_chain = WeakAugmentKind.SPEECH_CHAIN.value in config.matrix.weak_kinds
    for seed in seeds:
        base = ws.base(seed, corpus)
        table.baseline[seed] = 100.0 * evaluate(base, corpus.test).cer
        log.info("seed %d baseline CER %.2f", seed, table.baseline[seed])
        cache = None
        if needs_chain:
            tts = ws.tts(seed, corpus, base)
            cache = ws.cache(seed, corpus, base, tts)
        for block in config.matrix.blocks:
            for kind in config.matrix.weak_kinds:
                for tau in config.matrix.taus:
                    scenario = scenario_for(block, kind, tau, config.scenario.lambda_con)
                    try:
                        model = ws.consistency(seed, scenario, corpus, base, cache)
                        table.cells[(block, kind, tau, seed)] = 100.0 * evaluate(model, corpus.test).cer
                        log.info("seed %d %s CER %.2f", seed, scenario.name, table.cells[(block, kind, tau, seed)])
                    except Exception:  # noqa: BLE001 - a failed cell must not abort the matrix
                        log.exception("cell %s seed %d failed", scenario.name, seed)
    return table
