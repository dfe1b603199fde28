"""Vocabulary, tokenization, synthetic speech-like corpus and speaker embeddings.

The synthetic corpus stands in for real log-spectral speech: every vocabulary token
owns a fixed random spectral prototype (a few anchor frames, linearly interpolated
over the token's duration), every speaker owns a smooth spectral gain curve and a
per-token duration table, and each utterance adds i.i.d. Gaussian noise.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EOS = 0
"""Combined start/end-of-sequence id."""

_TOKENS = ["<eos>", " ", "'"] + [chr(c) for c in range(ord("a"), ord("z") + 1)]

EMBED_DIM = 16
_EMBED_SEED = 20220329


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list; ``<eos>`` doubles as start-of-sequence."""

    tokens: tuple[str, ...]
    id_of: dict[str, int] = field(compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> int:
        return self.id_of["<eos>"]


def build_vocabulary() -> Vocabulary:
    """The canonical 29-token vocabulary: ``<eos>``=0, space=1, apostrophe=2, a..z=3..28."""
    tokens = tuple(_TOKENS)
    return Vocabulary(tokens=tokens, id_of={t: i for i, t in enumerate(tokens)})


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    ids = []
    for pos, ch in enumerate(text.lower()):
        if ch not in vocab.id_of:
            raise ValueError(f"unrepresentable character {ch!r} at position {pos}")
        ids.append(vocab.id_of[ch])
    return ids


def detokenize(ids, vocab: Vocabulary) -> str:
    chars = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} out of range 0..{len(vocab) - 1}")
        if i != vocab.eos:
            chars.append(vocab.tokens[i])
    return "".join(chars)


@dataclass
class Utterance:
    uid: str
    features: np.ndarray  # (S, F) float32
    speaker: int
    transcript: list[int] | None = None

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 4
    n_labeled: int = 1000
    n_unlabeled: int = 1000
    n_dev: int = 250
    n_test: int = 250
    # leading fraction of speakers that supply the labeled split; the rest supply
    # the unlabeled split (1.0 = every speaker supplies both)
    labeled_speaker_fraction: float = 0.5
    alphabet: str = "abcdefghijklmnop"
    min_chars: int = 3
    max_chars: int = 7
    space_prob: float = 0.2
    n_feats: int = 20
    min_frames_per_token: int = 3
    max_frames_per_token: int = 6
    noise_sigma: float = 0.1
    speaker_gain_scale: float = 0.5
    prototype_anchors: int = 3

    def validate(self) -> None:
        sizes = (self.n_labeled, self.n_unlabeled, self.n_dev, self.n_test)
        if min(sizes) < 0 or sum(sizes) == 0:
            raise ValueError(f"infeasible split sizes {sizes}")
        if self.n_labeled == 0 or self.n_dev == 0 or self.n_test == 0:
            raise ValueError("labeled, dev and test splits must be non-empty")
        if self.n_speakers < 1:
            raise ValueError("need at least one speaker")
        if not 0.0 < self.labeled_speaker_fraction <= 1.0:
            raise ValueError("labeled_speaker_fraction must lie in (0, 1]")
        if self.labeled_speaker_fraction < 1.0 and self.n_unlabeled and self.n_speakers < 2:
            raise ValueError("disjoint labeled/unlabeled speakers need >= 2 speakers")
        if not 1 <= self.min_chars <= self.max_chars:
            raise ValueError("bad transcript length range")
        if not 1 <= self.min_frames_per_token <= self.max_frames_per_token:
            raise ValueError("bad frames-per-token range")
        if self.n_feats < 1 or self.prototype_anchors < 1 or self.noise_sigma < 0:
            raise ValueError("n_feats, prototype_anchors must be >= 1 and noise_sigma >= 0")
        vocab = build_vocabulary()
        bad = [c for c in self.alphabet if c not in vocab.id_of or c == " "]
        if not self.alphabet or bad:
            raise ValueError(f"alphabet must be non-empty letters/apostrophes, got {bad}")

    @property
    def labeled_speakers(self) -> list[int]:
        k = max(1, round(self.labeled_speaker_fraction * self.n_speakers))
        return list(range(k))

    @property
    def unlabeled_speakers(self) -> list[int]:
        k = len(self.labeled_speakers)
        return list(range(k, self.n_speakers)) if k < self.n_speakers else list(range(self.n_speakers))


@dataclass
class CorpusSplit:
    labeled: list[Utterance]
    unlabeled: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    seed: int
    spec: CorpusSpec | None = None

    SPLITS = ("labeled", "unlabeled", "dev", "test")

    def splits(self) -> dict[str, list[Utterance]]:
        return {name: getattr(self, name) for name in self.SPLITS}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / "feats").mkdir(parents=True, exist_ok=True)
        vocab = build_vocabulary()
        lines = ["id\tspeaker\tsplit\ttext"]
        for name, utts in self.splits().items():
            for u in utts:
                text = detokenize(u.transcript, vocab) if u.transcript is not None else ""
                lines.append(f"{u.uid}\t{u.speaker}\t{name}\t{text}")
                write_matrix(directory / "feats" / f"{u.uid}.f32", u.features)
        (directory / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (directory / "seed").write_text(f"{self.seed}\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> CorpusSplit:
        directory = Path(directory)
        vocab = build_vocabulary()
        parts: dict[str, list[Utterance]] = {name: [] for name in cls.SPLITS}
        rows = (directory / "manifest.tsv").read_text(encoding="utf-8").split("\n")
        for row in rows[1:]:
            if not row:
                continue
            uid, speaker, split, text = row.split("\t")
            labeled = split != "unlabeled"
            parts[split].append(
                Utterance(
                    uid=uid,
                    features=read_matrix(directory / "feats" / f"{uid}.f32"),
                    speaker=int(speaker),
                    transcript=tokenize(text, vocab) if labeled else None,
                )
            )
        seed_file = directory / "seed"
        seed = int(seed_file.read_text()) if seed_file.exists() else 0
        return cls(seed=seed, **parts)


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Little-endian int32 (S, F) header followed by row-major float32 values."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", *matrix.shape))
        fh.write(matrix.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    n_rows, n_cols = struct.unpack("<ii", data[:8])
    values = np.frombuffer(data, dtype="<f4", offset=8)
    if values.size != n_rows * n_cols:
        raise ValueError(f"{path}: header says {n_rows}x{n_cols}, found {values.size} values")
    return values.reshape(n_rows, n_cols).astype(np.float32)


def _smooth_curve(rng: np.random.Generator, length: int, n_waves: int = 3) -> np.ndarray:
    """Random smooth curve in [-1, 1] built from a few low-frequency cosines."""
    pos = np.linspace(0.0, 1.0, length)
    curve = np.zeros(length)
    for k in range(1, n_waves + 1):
        curve += rng.normal() / k * np.cos(np.pi * k * pos + rng.uniform(0, 2 * np.pi))
    peak = np.abs(curve).max()
    return curve / peak if peak > 0 else curve


class _Synthesizer:
    def __init__(self, spec: CorpusSpec, seed: int):
        self.spec = spec
        vocab_size = len(_TOKENS)
        proto_rng = np.random.default_rng([seed, 0])
        # (V, anchors, F); smoothed across frequency so bins are correlated
        raw = proto_rng.normal(size=(vocab_size, spec.prototype_anchors, spec.n_feats + 2))
        self.prototypes = (raw[..., :-2] + raw[..., 1:-1] + raw[..., 2:]) / np.sqrt(3.0)
        spk_rng = np.random.default_rng([seed, 1])
        self.gains = np.stack(
            [1.0 + spec.speaker_gain_scale * _smooth_curve(spk_rng, spec.n_feats) for _ in range(spec.n_speakers)]
        )
        self.durations = spk_rng.integers(
            spec.min_frames_per_token, spec.max_frames_per_token + 1, size=(spec.n_speakers, vocab_size)
        )

    def segment(self, token: int, n_frames: int) -> np.ndarray:
        anchors = self.prototypes[token]
        if len(anchors) == 1 or n_frames == 1:
            return np.repeat(anchors[:1], n_frames, axis=0)
        where = np.linspace(0.0, len(anchors) - 1, n_frames)
        lo = np.floor(where).astype(int).clip(max=len(anchors) - 2)
        frac = (where - lo)[:, None]
        return anchors[lo] * (1.0 - frac) + anchors[lo + 1] * frac

    def clean_features(self, transcript: list[int], speaker: int) -> np.ndarray:
        segs = [self.segment(t, int(self.durations[speaker, t])) for t in transcript]
        return np.concatenate(segs, axis=0) * self.gains[speaker]

    def transcript(self, rng: np.random.Generator) -> list[int]:
        spec = self.spec
        vocab = build_vocabulary()
        length = int(rng.integers(spec.min_chars, spec.max_chars + 1))
        chars = []
        for i in range(length):
            inner = 0 < i < length - 1 and chars[-1] != " "
            if inner and rng.random() < spec.space_prob:
                chars.append(" ")
            else:
                chars.append(spec.alphabet[int(rng.integers(len(spec.alphabet)))])
        return tokenize("".join(chars), vocab)

    def utterance(self, seed: int, index: int, split: str, speaker: int) -> Utterance:
        rng = np.random.default_rng([seed, 2, index])
        transcript = self.transcript(rng)
        clean = self.clean_features(transcript, speaker)
        feats = clean + self.spec.noise_sigma * rng.normal(size=clean.shape)
        return Utterance(
            uid=f"utt{index:06d}",
            features=feats.astype(np.float32),
            speaker=speaker,
            transcript=transcript if split != "unlabeled" else None,
        )


def generate_corpus(spec: CorpusSpec, seed: int) -> CorpusSplit:
    """Build the four disjoint splits; a pure function of ``(spec, seed)``.

    Labeled utterances come from the leading ``labeled_speaker_fraction`` of the
    speakers and unlabeled ones from the remaining speakers; dev and test cycle over
    all speakers. Each utterance draws from its own RNG stream keyed by its index.
    """
    spec.validate()
    synth = _Synthesizer(spec, seed)
    all_speakers = list(range(spec.n_speakers))
    layout = [
        ("labeled", spec.n_labeled, spec.labeled_speakers),
        ("unlabeled", spec.n_unlabeled, spec.unlabeled_speakers),
        ("dev", spec.n_dev, all_speakers),
        ("test", spec.n_test, all_speakers),
    ]
    parts: dict[str, list[Utterance]] = {}
    index = 0
    for split, count, speakers in layout:
        parts[split] = []
        for k in range(count):
            parts[split].append(synth.utterance(seed, index, split, speakers[k % len(speakers)]))
            index += 1
    return CorpusSplit(seed=seed, spec=spec, **parts)


@functools.lru_cache(maxsize=8)
def _embedding_projection(n_feats: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(_EMBED_SEED)
    return rng.normal(size=(dim, 2 * n_feats)) / np.sqrt(2 * n_feats)


def extract_speaker_embedding(features: np.ndarray, dim: int = EMBED_DIM) -> np.ndarray:
    """Statistics-pooling speaker vector: per-bin mean and std, fixed projection, unit norm."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("features must be an (S, F) matrix with S >= 1")
    pooled = np.concatenate([features.mean(axis=0), features.std(axis=0)])
    vec = _embedding_projection(features.shape[1], dim) @ pooled
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec = np.zeros(dim)
        vec[0] = 1.0
        return vec
    return vec / norm
