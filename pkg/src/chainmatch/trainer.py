"""FixMatch-style consistency training for sequence-to-sequence ASR.

Per step, an unlabeled utterance ``x_u`` gets a weak view ``alpha(x_u)`` (SpecAugment
or speech-chain reconstruction) and a strong SpecAugment view ``A(x_u)``. A pseudo
transcript ``y~`` supplies the decoder prefixes on both branches. The student's
per-position argmax on the weak view gives pseudo labels ``y-_t`` with confidences
``q_t``; positions with ``q_t > tau`` contribute ``-log p(y-_t | y~_{<t}, A(x_u))``
and the sum is divided by the full ``|y~|``.

Pseudo transcripts are either static (beam-decoded once by a frozen copy of the base
model before training) or dynamic (re-decoded by the current student), and are
decoded from either the original or the weakly-perturbed input.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from chainmatch.asr import (
    ASRConfig,
    ASRModel,
    _shift,
    batch_beam_decode,
    beam_decode,
    supervised_loss,
    target_log_probs,
    teacher_forced_log_probs,
)
from chainmatch.augment import AugmentContext, WeakAugmentKind, apply_strong, apply_weak
from chainmatch.corpus import EOS, Utterance
from chainmatch.schedule import PlateauSchedule
from chainmatch.tts import TTSModel

log = logging.getLogger(__name__)


class TranscriptMode(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


class TranscriptInput(str, enum.Enum):
    ORIGINAL = "original"
    WEAK_PERTURBED = "weak_perturbed"


@dataclass(frozen=True)
class Scenario:
    """One cell of the static/dynamic x original/weak-perturbed x weak-kind x tau grid.

    ``(static, original)`` is the teacher-transcript paradigm; ``(dynamic,
    weak_perturbed)`` is self-transcribing from the weak view.
    """

    transcript_mode: TranscriptMode = TranscriptMode.DYNAMIC
    transcript_input: TranscriptInput = TranscriptInput.WEAK_PERTURBED
    weak_kind: WeakAugmentKind = WeakAugmentKind.SPEECH_CHAIN
    tau: float = 0.7
    lambda_con: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "transcript_mode", TranscriptMode(self.transcript_mode))
        object.__setattr__(self, "transcript_input", TranscriptInput(self.transcript_input))
        object.__setattr__(self, "weak_kind", WeakAugmentKind(self.weak_kind))
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")

    @property
    def block(self) -> str:
        return f"{self.transcript_mode.value}-{self.transcript_input.value}"

    @property
    def name(self) -> str:
        return f"{self.block}-{self.weak_kind.value}-tau{self.tau:g}"


BLOCKS = [
    (TranscriptMode.STATIC, TranscriptInput.ORIGINAL),
    (TranscriptMode.STATIC, TranscriptInput.WEAK_PERTURBED),
    (TranscriptMode.DYNAMIC, TranscriptInput.ORIGINAL),
    (TranscriptMode.DYNAMIC, TranscriptInput.WEAK_PERTURBED),
]


@dataclass
class PseudoBatch:
    transcripts: list[list[int]]  # y~, each ending with EOS
    labels: list[list[int]]  # y-, aligned with y~
    confidences: list[np.ndarray]  # q, aligned with y~


class MetricLog:
    """Append-only ``epoch<TAB>split<TAB>metric<TAB>value`` lines."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, epoch: int, split: str, metric: str, value: float) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{epoch}\t{split}\t{metric}\t{value:.6f}\n")


# -- pseudo transcripts and labels ---------------------------------------------------


def decode_transcripts(model: ASRModel, inputs: list[np.ndarray], beam: int = 4) -> list[list[int]]:
    with torch.no_grad():
        return batch_beam_decode(model, inputs, beam)


def make_pseudo_transcript(
    x_u: np.ndarray,
    scenario: Scenario,
    teacher: ASRModel,
    student: ASRModel,
    weak_x: np.ndarray | None = None,
    beam: int = 4,
) -> list[int]:
    """Beam-decoded ``y~`` for one utterance, from the teacher (static) or student (dynamic)."""
    model = teacher if scenario.transcript_mode is TranscriptMode.STATIC else student
    if scenario.transcript_input is TranscriptInput.WEAK_PERTURBED:
        if weak_x is None:
            raise ValueError("weak-perturbed transcript input needs weak_x")
        source = weak_x
    else:
        source = x_u
    with torch.no_grad():
        return beam_decode(model, source, beam)


def make_pseudo_labels(student: ASRModel, weak_x, transcripts: list[list[int]]):
    """Per-position argmax ``y-`` and its probability ``q`` on the weak view, prefixes ``y~``.

    ``weak_x`` is a list of feature matrices (or a single matrix with a single
    transcript). Returns lists ``(labels, confidences)``.
    """
    single = isinstance(weak_x, np.ndarray)
    feats = [weak_x] if single else list(weak_x)
    if single:
        transcripts = [transcripts]
    if any(len(t) == 0 for t in transcripts):
        raise ValueError("pseudo transcripts must be non-empty")
    with torch.no_grad():
        logp, _ = teacher_forced_log_probs(student, feats, [_shift(t) for t in transcripts])
        probs = logp.double().exp().numpy()
    labels, confs = [], []
    for b, t in enumerate(transcripts):
        p = probs[b, : len(t)]
        ids = p.argmax(axis=-1)
        labels.append([int(i) for i in ids])
        confs.append(p[np.arange(len(t)), ids])
    if single:
        return labels[0], confs[0]
    return labels, confs


def consistency_loss(student: ASRModel, strong_x, transcripts, labels, confidences, tau: float) -> torch.Tensor:
    """Mean over utterances of ``-(1/T) sum_t 1(q_t > tau) log p(y-_t | y~_{<t}, A(x))``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for t, y, q in zip(transcripts, labels, confidences):
        if not len(t) == len(y) == len(q):
            raise ValueError("pseudo transcript, labels and confidences must be aligned")
    picked, valid = target_log_probs(student, strong_x, [list(y) for y in labels], [_shift(t) for t in transcripts])
    keep = torch.zeros_like(valid)
    for b, q in enumerate(confidences):
        keep[b, : len(q)] = torch.as_tensor(np.asarray(q) > tau)
    masked = torch.where(keep, picked, torch.zeros_like(picked))
    lengths = torch.tensor([len(t) for t in transcripts], dtype=picked.dtype)
    return (-masked.sum(dim=1) / lengths).mean()


def total_loss(sup, con, lambda_con: float = 0.1):
    return sup + lambda_con * con


# -- evaluation on dev ----------------------------------------------------------------


def dev_accuracy(model: ASRModel, dev: list[Utterance], batch_size: int = 64) -> float:
    """Teacher-forced token accuracy (``EOS`` position included)."""
    correct = total = 0
    with torch.no_grad():
        for i in range(0, len(dev), batch_size):
            chunk = dev[i : i + batch_size]
            targets = [list(u.transcript) + [EOS] for u in chunk]
            logp, _ = teacher_forced_log_probs(model, [u.features for u in chunk], [_shift(t) for t in targets])
            pred = logp.argmax(dim=-1).numpy()
            for b, t in enumerate(targets):
                correct += int((pred[b, : len(t)] == np.asarray(t)).sum())
                total += len(t)
    return correct / total


# -- training loops -------------------------------------------------------------------


@dataclass(frozen=True)
class ASRTrainConfig:
    lr: float = 1.0
    decay: float = 0.1  # on plateau: lr <- lr * (1 - decay)
    patience: int = 3
    max_epochs: int = 40
    min_epochs: int = 20  # early stopping is armed only after this many epochs
    batch_size: int = 16
    grad_clip: float = 5.0
    eps: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class ConsistencyTrainConfig:
    lr: float = 0.5
    decay: float = 0.2
    patience: int = 3
    max_epochs: int = 20
    batch_size: int = 16
    grad_clip: float = 5.0
    eps: float = 1e-6
    beam: int = 4
    dynamic_refresh: str = "per_batch"  # or "per_epoch"
    seed: int = 0

    def __post_init__(self):
        if self.dynamic_refresh not in ("per_batch", "per_epoch"):
            raise ValueError(f"dynamic_refresh must be per_batch or per_epoch, got {self.dynamic_refresh}")


def _adadelta(model: ASRModel, lr: float, eps: float) -> torch.optim.Optimizer:
    return torch.optim.Adadelta(model.parameters(), lr=lr, rho=0.95, eps=eps)


def _batch_order(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


@dataclass
class TrainResult:
    model: ASRModel
    schedule: PlateauSchedule
    history: list = field(default_factory=list)


def train_base(
    labeled: list[Utterance],
    dev: list[Utterance],
    model_config: ASRConfig = ASRConfig(),
    config: ASRTrainConfig = ASRTrainConfig(),
    on_epoch=None,
) -> ASRModel:
    """Supervised training with AdaDelta, plateau decay on dev accuracy, early stopping."""
    if not labeled:
        raise ValueError("labeled set is empty")
    model = ASRModel(model_config, seed=config.seed, role="base")
    opt = _adadelta(model, config.lr, config.eps)
    sched = PlateauSchedule(opt, mode="max", factor=1.0 - config.decay, patience=config.patience)
    rng = np.random.default_rng([config.seed, 21])
    for epoch in range(1, config.max_epochs + 1):
        for idx in _batch_order(len(labeled), config.batch_size, rng):
            batch = [labeled[i] for i in idx]
            loss = supervised_loss(model, [u.features for u in batch], [u.transcript for u in batch])
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
        acc = dev_accuracy(model, dev)
        sched.step(acc, model)
        log.info("base epoch %d dev_acc %.4f lr %.3g", epoch, acc, sched.lr)
        if on_epoch is not None:
            on_epoch(epoch, "dev", "accuracy", acc)
        if sched.should_stop and epoch >= config.min_epochs:
            break
    sched.restore_best(model)
    model.schedule_history = list(sched.state.history)
    return model


def train_consistency(
    scenario: Scenario,
    labeled: list[Utterance],
    unlabeled: list[Utterance],
    dev: list[Utterance],
    base: ASRModel,
    ctx: AugmentContext,
    tts: TTSModel | None = None,
    config: ConsistencyTrainConfig = ConsistencyTrainConfig(),
    on_epoch=None,
    on_step=None,
) -> ASRModel:
    """Student initialized from ``base``; minimizes supervised + lambda * consistency loss.

    ``ctx`` carries the augmentation policies and, for speech-chain weak views, the
    reconstruction cache (built beforehand from the frozen base ASR and ``tts``).
    """
    if scenario.weak_kind is WeakAugmentKind.SPEECH_CHAIN and (ctx.cache is None or not len(ctx.cache)):
        if ctx.base_asr is None or (ctx.tts is None and tts is None):
            raise ValueError("speech-chain scenario requires a built reconstruction cache")
    if not unlabeled:
        raise ValueError("unlabeled set is empty")
    if tts is not None and ctx.tts is None:
        ctx.tts = tts
    student = base.clone(role="student")
    teacher = base.clone(role="teacher")
    teacher.requires_grad_(False)
    opt = _adadelta(student, config.lr, config.eps)
    sched = PlateauSchedule(opt, mode="max", factor=1.0 - config.decay, patience=config.patience)
    rng = np.random.default_rng([config.seed, 31])
    weak_input = scenario.transcript_input is TranscriptInput.WEAK_PERTURBED

    def source(u: Utterance, draw: int) -> np.ndarray:
        return apply_weak(u, scenario.weak_kind, ctx, draw) if weak_input else u.features

    static: dict[str, list[int]] = {}
    if scenario.transcript_mode is TranscriptMode.STATIC:
        # draw -1: the one weak realization the frozen teacher transcribes
        ids = decode_transcripts(teacher, [source(u, -1) for u in unlabeled], config.beam)
        static = {u.uid: t for u, t in zip(unlabeled, ids)}

    step = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_transcripts: dict[str, list[int]] = {}
        if scenario.transcript_mode is TranscriptMode.DYNAMIC and config.dynamic_refresh == "per_epoch":
            ids = decode_transcripts(student, [source(u, -1 - epoch) for u in unlabeled], config.beam)
            epoch_transcripts = {u.uid: t for u, t in zip(unlabeled, ids)}
        lab_order = _batch_order(len(labeled), config.batch_size, rng)
        masked_frac = []
        for i, uidx in enumerate(_batch_order(len(unlabeled), config.batch_size, rng)):
            step += 1
            unl = [unlabeled[j] for j in uidx]
            lab = [labeled[j] for j in lab_order[i % len(lab_order)]]
            weak_x = [apply_weak(u, scenario.weak_kind, ctx, step) for u in unl]
            strong_x = [apply_strong(u, ctx, step) for u in unl]
            if scenario.transcript_mode is TranscriptMode.STATIC:
                y_tilde = [static[u.uid] for u in unl]
            elif config.dynamic_refresh == "per_epoch":
                y_tilde = [epoch_transcripts[u.uid] for u in unl]
            else:
                y_tilde = decode_transcripts(student, weak_x if weak_input else [u.features for u in unl], config.beam)
            y_bar, q = make_pseudo_labels(student, weak_x, y_tilde)
            pseudo = PseudoBatch(y_tilde, y_bar, q)
            sup = supervised_loss(student, [u.features for u in lab], [u.transcript for u in lab])
            con = consistency_loss(student, strong_x, pseudo.transcripts, pseudo.labels, pseudo.confidences, scenario.tau)
            loss = total_loss(sup, con, scenario.lambda_con)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(student.parameters(), config.grad_clip)
            opt.step()
            masked_frac.append(float(np.mean(np.concatenate(q) > scenario.tau)))
            if on_step is not None:
                on_step(step, pseudo, float(sup), float(con))
        acc = dev_accuracy(student, dev)
        sched.step(acc, student)
        log.info(
            "%s epoch %d dev_acc %.4f lr %.3g kept %.3f", scenario.name, epoch, acc, sched.lr, np.mean(masked_frac)
        )
        if on_epoch is not None:
            on_epoch(epoch, "dev", "accuracy", acc)
            on_epoch(epoch, "train", "confident_fraction", float(np.mean(masked_frac)))
        if sched.should_stop:
            break
    sched.restore_best(student)
    student.schedule_history = list(sched.state.history)
    return student
