"""Command-line entry point: ``chainmatch <command> --config FILE --seed N``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from chainmatch.checkpoint import load_model
from chainmatch.config import load_config
from chainmatch.corpus import generate_corpus
from chainmatch.harness import ResultsTable, Workspace, emit_report, evaluate, run_matrix

log = logging.getLogger("chainmatch")


def _gen_data(args, config):
    seed = config.corpus_seed if args.seed is None else args.seed
    corpus = generate_corpus(config.corpus, seed)
    ws = Workspace(config)
    corpus.save(ws.corpus_dir)
    print(f"wrote {sum(len(v) for v in corpus.splits().values())} utterances to {ws.corpus_dir}")


def _train_base(args, config):
    ws = Workspace(config)
    ws.base(args.seed or 0, ws.corpus())
    print(ws.base_ckpt(args.seed or 0))


def _train_tts(args, config):
    ws = Workspace(config)
    corpus = ws.corpus()
    seed = args.seed or 0
    ws.tts(seed, corpus, ws.base(seed, corpus))
    print(ws.tts_ckpt(seed))


def _build_cache(args, config):
    ws = Workspace(config)
    corpus = ws.corpus()
    seed = args.seed or 0
    base = ws.base(seed, corpus)
    cache = ws.cache(seed, corpus, base, ws.tts(seed, corpus, base))
    print(f"{len(cache)} reconstructions in {ws.cache_dir(seed)}")


def _train_consistency(args, config):
    ws = Workspace(config)
    corpus = ws.corpus()
    seed = args.seed or 0
    base = ws.base(seed, corpus)
    cache = None
    if config.scenario.weak_kind.value == "speech_chain":
        cache = ws.cache(seed, corpus, base, ws.tts(seed, corpus, base))
    ws.consistency(seed, config.scenario, corpus, base, cache)
    print(ws.scenario_ckpt(seed, config.scenario))


def _evaluate(args, config):
    ws = Workspace(config)
    corpus = ws.corpus()
    path = Path(args.checkpoint) if args.checkpoint else ws.base_ckpt(args.seed or 0)
    result = evaluate(load_model(path), getattr(corpus, args.split))
    print(f"{path}\t{args.split}\tCER {100 * result.cer:.2f}% ({result.errors}/{result.ref_chars})")


def _run_matrix(args, config):
    table = run_matrix(config, None if args.seed is None else [args.seed])
    csv_path, md_path = emit_report(table, config.output_dir)
    print(md_path.read_text(encoding="utf-8"))


def _report(args, config):
    csv_path = Path(config.output_dir) / "results.csv"
    table = ResultsTable.from_csv(csv_path.read_text(encoding="utf-8"))
    _, md_path = emit_report(table, config.output_dir)
    print(md_path.read_text(encoding="utf-8"))


COMMANDS = {
    "gen-data": (_gen_data, "generate and save the synthetic corpus"),
    "train-base": (_train_base, "supervised baseline ASR"),
    "train-tts": (_train_tts, "speaker-conditioned TTS on labeled + pseudo-transcribed speech"),
    "build-cache": (_build_cache, "precompute speech-chain reconstructions of the unlabeled split"),
    "train-consistency": (_train_consistency, "consistency training for the configured scenario"),
    "evaluate": (_evaluate, "CER of a checkpoint"),
    "run-matrix": (_run_matrix, "the full scenario x tau matrix plus report"),
    "report": (_report, "re-render results.md from results.csv"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="defaults to the seed's base model")
            p.add_argument("--split", choices=["dev", "test"], default="test")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    config = load_config(args.config)
    COMMANDS[args.command][0](args, config)
    return 0


if __name__ == "__main__":
    sys.exit(main())
