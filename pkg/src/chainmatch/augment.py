"""Weak and strong augmentations: SpecAugment masking and speech-chain reconstruction."""

from __future__ import annotations

import enum
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from chainmatch.asr import ASRModel, beam_decode
from chainmatch.corpus import EOS, Utterance, extract_speaker_embedding, read_matrix, write_matrix
from chainmatch.tts import TTSModel, tts_teacher_forced

log = logging.getLogger(__name__)

COMPLETE_MARKER = "COMPLETE"


class WeakAugmentKind(str, enum.Enum):
    WEAK_SPECAUGMENT = "weak_specaugment"
    SPEECH_CHAIN = "speech_chain"


@dataclass(frozen=True)
class AugmentPolicy:
    n_masks: int
    max_freq_width: int
    max_time_width: int
    fill_value: float = 0.0

    def __post_init__(self):
        if self.n_masks < 0 or self.max_freq_width < 0 or self.max_time_width < 0:
            raise ValueError(f"negative policy field in {self}")

    def fitted(self, n_frames: int, n_feats: int) -> AugmentPolicy:
        """Clip widths to one utterance; at least one frequency bin always survives."""
        return replace(
            self,
            max_freq_width=min(self.max_freq_width, n_feats - 1),
            max_time_width=min(self.max_time_width, n_frames),
        )


# (weak, strong, reference utterance length) in frames at the original corpus scale.
# LJSpeech-like utterances average ~530 frames at a 12.5 ms shift, LibriSpeech ~1000.
REFERENCE_TIME_WIDTHS = {"single": (10, 50, 530.0), "multi": (20, 100, 1000.0)}


def scaled_time_widths(mean_frames: float, setting: str = "single") -> tuple[int, int]:
    """(weak, strong) max time-mask widths keeping the reference width/length ratio."""
    weak, strong, ref = REFERENCE_TIME_WIDTHS[setting]
    return max(1, round(weak * mean_frames / ref)), max(1, round(strong * mean_frames / ref))


def weak_policy(max_time_width: int = 10) -> AugmentPolicy:
    return AugmentPolicy(n_masks=1, max_freq_width=5, max_time_width=max_time_width)


def strong_policy(max_time_width: int = 50) -> AugmentPolicy:
    return AugmentPolicy(n_masks=2, max_freq_width=20, max_time_width=max_time_width)


def spec_augment(features: np.ndarray, policy: AugmentPolicy, rng_seed) -> np.ndarray:
    """``n_masks`` rounds of one frequency band mask and one time span mask.

    Widths are drawn uniformly from ``0..max``; starts uniformly over valid offsets.
    """
    S, F = features.shape
    if policy.max_freq_width > F or policy.max_time_width > S:
        raise ValueError(
            f"mask widths ({policy.max_freq_width} bins, {policy.max_time_width} frames) exceed features {S}x{F}"
        )
    rng = np.random.default_rng(rng_seed)
    out = np.array(features, copy=True)
    for _ in range(policy.n_masks):
        wf = int(rng.integers(0, policy.max_freq_width + 1))
        f0 = int(rng.integers(0, F - wf + 1))
        out[:, f0 : f0 + wf] = policy.fill_value
        wt = int(rng.integers(0, policy.max_time_width + 1))
        t0 = int(rng.integers(0, S - wt + 1))
        out[t0 : t0 + wt, :] = policy.fill_value
    return out


def speech_chain_reconstruct(
    x_u: np.ndarray, base_asr: ASRModel, tts: TTSModel, pseudo: list[int] | None = None, beam: int = 4
) -> np.ndarray:
    """ASR -> TTS round trip teacher-forced on the original frames.

    The pseudo transcript comes from the frozen base ASR (beam search) unless given,
    the speaker embedding from ``x_u`` itself, and the TTS decoder consumes ``x_u`` as
    its autoregressive input. Output has exactly ``len(x_u)`` frames. An empty pseudo
    transcript leaves the input unchanged.
    """
    if pseudo is None:
        pseudo = beam_decode(base_asr, x_u, beam)
    text = [t for t in pseudo if t != EOS]
    if not text:
        log.warning("empty pseudo transcript; speech-chain reconstruction falls back to identity")
        return np.array(x_u, dtype=np.float32, copy=True)
    pred = tts_teacher_forced(tts, text + [EOS], extract_speaker_embedding(x_u), x_u)
    return pred.frames[0, : len(x_u)].numpy().astype(np.float32)


class ReconstructionCache:
    """Reconstructed features keyed by utterance id, mirrored to ``directory``.

    The directory holds one matrix file per utterance (corpus format) and, once built,
    a ``COMPLETE`` marker listing every covered id.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self.entries: dict[str, np.ndarray] = {}
        self.complete = False

    def __contains__(self, uid: str) -> bool:
        return uid in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, uid: str) -> np.ndarray:
        return self.entries[uid]

    def put(self, uid: str, frames: np.ndarray) -> None:
        self.entries[uid] = frames
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            write_matrix(self.directory / f"{uid}.f32", frames)

    def build(self, utts: list[Utterance], base_asr: ASRModel, tts: TTSModel, pseudo: dict | None = None) -> None:
        for u in utts:
            if u.uid not in self.entries:
                self.put(u.uid, speech_chain_reconstruct(u.features, base_asr, tts, None if pseudo is None else pseudo.get(u.uid)))
        self.mark_complete()

    def mark_complete(self) -> None:
        self.complete = True
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            (self.directory / COMPLETE_MARKER).write_text("\n".join(sorted(self.entries)) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> ReconstructionCache:
        cache = cls(directory)
        marker = cache.directory / COMPLETE_MARKER
        if marker.exists():
            uids = [line for line in marker.read_text(encoding="utf-8").split("\n") if line]
            cache.complete = True
        else:
            uids = [p.stem for p in cache.directory.glob("*.f32")]
        for uid in uids:
            cache.entries[uid] = read_matrix(cache.directory / f"{uid}.f32")
        return cache


@dataclass
class AugmentContext:
    weak: AugmentPolicy = field(default_factory=weak_policy)
    strong: AugmentPolicy = field(default_factory=strong_policy)
    seed: int = 0
    cache: ReconstructionCache | None = None
    base_asr: ASRModel | None = None
    tts: TTSModel | None = None


def _stream(seed: int, tag: int, uid: str, draw: int) -> list[int]:
    # negative draws (pre-training transcription) get their own sign word
    return [seed, tag, zlib.crc32(uid.encode("utf-8")), int(draw < 0), abs(draw)]


def apply_weak(utt: Utterance, kind: WeakAugmentKind, ctx: AugmentContext, draw: int = 0) -> np.ndarray:
    """Weak view of an utterance; ``draw`` indexes a fresh SpecAugment realization."""
    kind = WeakAugmentKind(kind)
    if kind is WeakAugmentKind.WEAK_SPECAUGMENT:
        policy = ctx.weak.fitted(*utt.features.shape)
        return spec_augment(utt.features, policy, _stream(ctx.seed, 1, utt.uid, draw))
    cache = ctx.cache
    if cache is not None and utt.uid in cache:
        return cache.get(utt.uid)
    if cache is not None and cache.complete:
        raise KeyError(f"utterance {utt.uid} missing from a complete reconstruction cache")
    if ctx.base_asr is None or ctx.tts is None:
        raise ValueError("speech-chain augmentation needs a reconstruction cache or frozen ASR/TTS models")
    frames = speech_chain_reconstruct(utt.features, ctx.base_asr, ctx.tts)
    if cache is not None:
        cache.put(utt.uid, frames)
    return frames


def apply_strong(utt: Utterance, ctx: AugmentContext, draw: int = 0) -> np.ndarray:
    policy = ctx.strong.fitted(*utt.features.shape)
    return spec_augment(utt.features, policy, _stream(ctx.seed, 2, utt.uid, draw))
