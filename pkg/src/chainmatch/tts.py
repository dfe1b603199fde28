"""Speaker-conditioned sequence-to-sequence TTS with stop-token prediction.

A minimal Tacotron-style model: token embedding -> bidirectional LSTM encoder whose
outputs are concatenated with the speaker embedding -> additive attention ->
autoregressive LSTM decoder emitting two frames (and two stop logits) per step.
Only teacher-forced operation is supported: the decoder input at step ``k`` is the
reference frame pair ``(2k-2, 2k-1)`` (zeros at ``k = 0``).

Odd-length references are padded with a copy of their final frame. The padding frame
is excluded from the squared error and carries stop target 1, as does the last real
frame; every other stop target is 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence, pad_sequence

from chainmatch.asr import AdditiveAttention, ASRModel, batch_beam_decode
from chainmatch.corpus import EMBED_DIM, EOS, Utterance, extract_speaker_embedding
from chainmatch.schedule import PlateauSchedule

log = logging.getLogger(__name__)

FRAMES_PER_STEP = 2


@dataclass(frozen=True)
class TTSConfig:
    n_feats: int = 20
    speaker_dim: int = EMBED_DIM
    vocab_size: int = 29
    embed_size: int = 32
    encoder_hidden: int = 32
    decoder_hidden: int = 128
    attention_size: int = 64
    frames_per_step: int = FRAMES_PER_STEP

    def __post_init__(self):
        if self.frames_per_step != FRAMES_PER_STEP:
            raise ValueError("frames_per_step is fixed at 2")


@dataclass
class FramePrediction:
    frames: torch.Tensor  # (B, S_pad, F)
    stop_logits: torch.Tensor  # (B, S_pad)
    n_real: torch.Tensor  # (B,) real (unpadded) reference lengths
    n_padded: torch.Tensor  # (B,) even-padded lengths

    @property
    def stop_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.stop_logits)


def padded_length(n_frames: int) -> int:
    return n_frames + (n_frames % 2)


def tts_input(tokens: list[int]) -> list[int]:
    """Token ids without ``EOS`` followed by a single terminating ``EOS``."""
    return [t for t in tokens if t != EOS] + [EOS]


class TTSModel(nn.Module):
    def __init__(self, config: TTSConfig = TTSConfig(), seed: int = 0, role: str = "tts"):
        super().__init__()
        self.config = config
        self.role = role
        c = config
        mem = 2 * c.encoder_hidden + c.speaker_dim
        self.embed = nn.Embedding(c.vocab_size, c.embed_size)
        self.encoder = nn.LSTM(c.embed_size, c.encoder_hidden, batch_first=True, bidirectional=True)
        self.cell = nn.LSTMCell(FRAMES_PER_STEP * c.n_feats + mem, c.decoder_hidden)
        self.attention = AdditiveAttention(mem, c.decoder_hidden, c.attention_size)
        self.frame_out = nn.Linear(c.decoder_hidden + mem, FRAMES_PER_STEP * c.n_feats)
        self.stop_out = nn.Linear(c.decoder_hidden + mem, FRAMES_PER_STEP)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-0.1, 0.1, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.frame_out.weight.dtype

    def forward(self, tokens: list[list[int]], speakers, references: list[np.ndarray]) -> FramePrediction:
        c = self.config
        B = len(tokens)
        if any(len(t) == 0 for t in tokens):
            raise ValueError("token sequences must be non-empty")
        tok_len = torch.tensor([len(t) for t in tokens], dtype=torch.int64)
        tok = pad_sequence([torch.as_tensor(t, dtype=torch.int64) for t in tokens], batch_first=True)
        packed = pack_padded_sequence(self.embed(tok), tok_len, batch_first=True, enforce_sorted=False)
        enc, _ = pad_packed_sequence(self.encoder(packed)[0], batch_first=True, total_length=tok.size(1))
        spk = torch.as_tensor(np.asarray(speakers), dtype=self.dtype)
        memory = torch.cat([enc, spk.unsqueeze(1).expand(-1, enc.size(1), -1)], dim=-1)
        mask = torch.arange(tok.size(1)).unsqueeze(0) < tok_len.unsqueeze(1)
        keys = self.attention.key(memory)

        n_real = torch.tensor([len(r) for r in references], dtype=torch.int64)
        if int(n_real.min()) < 1:
            raise ValueError("reference must have at least one frame")
        ref = pad_sequence([torch.as_tensor(_pad_even(r), dtype=self.dtype) for r in references], batch_first=True)
        n_steps = ref.size(1) // FRAMES_PER_STEP
        pairs = ref.reshape(B, n_steps, FRAMES_PER_STEP * c.n_feats)
        prev = torch.cat([torch.zeros_like(pairs[:, :1]), pairs[:, :-1]], dim=1)

        h = torch.zeros(B, c.decoder_hidden, dtype=self.dtype)
        cs = torch.zeros_like(h)
        context = torch.zeros(B, memory.size(-1), dtype=self.dtype)
        frames, stops = [], []
        for k in range(n_steps):
            h, cs = self.cell(torch.cat([prev[:, k], context], dim=-1), (h, cs))
            context, _ = self.attention(keys, memory, mask, h)
            out = torch.cat([h, context], dim=-1)
            frames.append(self.frame_out(out))
            stops.append(self.stop_out(out))
        frames_t = torch.stack(frames, dim=1).reshape(B, n_steps * FRAMES_PER_STEP, c.n_feats)
        stops_t = torch.stack(stops, dim=1).reshape(B, n_steps * FRAMES_PER_STEP)
        n_padded = n_real + n_real % 2
        return FramePrediction(frames_t, stops_t, n_real, n_padded)


def _pad_even(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if len(frames) % 2:
        frames = np.concatenate([frames, frames[-1:]], axis=0)
    return frames


def tts_teacher_forced(model: TTSModel, tokens: list[int], speaker: np.ndarray, reference: np.ndarray) -> FramePrediction:
    """Single-utterance teacher-forced synthesis; output has the even-padded reference length."""
    if len(tokens) == 0:
        raise ValueError("tokens must be non-empty")
    with torch.no_grad():
        return model([list(tokens)], [speaker], [reference])


def frame_loss(pred: FramePrediction, references: list[np.ndarray]) -> torch.Tensor:
    """Mean over utterances of ``(1/S) sum_s [ ||x_s - x^_s||^2 + BCE(b_s, b^_s) ]``.

    ``S`` is the even-padded length; squared error is summed over feature bins and
    skips the padding frame.
    """
    B, S_max, _ = pred.frames.shape
    ref = pad_sequence([torch.as_tensor(_pad_even(r), dtype=pred.frames.dtype) for r in references], batch_first=True)
    if ref.size(1) < S_max:
        ref = F.pad(ref, (0, 0, 0, S_max - ref.size(1)))
    ref = ref[:, :S_max]
    pos = torch.arange(S_max).unsqueeze(0)
    real = pos < pred.n_real.unsqueeze(1)
    inside = pos < pred.n_padded.unsqueeze(1)
    stop_target = (pos >= (pred.n_real - 1).unsqueeze(1)).to(pred.frames.dtype)
    sq = ((ref - pred.frames) ** 2).sum(-1)
    bce = F.binary_cross_entropy_with_logits(pred.stop_logits, stop_target, reduction="none")
    per_frame = torch.where(real, sq, torch.zeros_like(sq)) + torch.where(inside, bce, torch.zeros_like(bce))
    per_utt = per_frame.sum(1) / pred.n_padded.to(per_frame.dtype)
    return per_utt.mean()


def tts_supervised_loss(model: TTSModel, features, transcripts, speakers) -> torch.Tensor:
    """Frame loss with ground-truth transcripts (labeled data). Differentiable scalar."""
    if len(features) == 0:
        raise ValueError("empty batch")
    if any(t is None for t in transcripts):
        raise ValueError("supervised TTS loss needs transcripts")
    pred = model([tts_input(t) for t in transcripts], speakers, features)
    return frame_loss(pred, features)


def tts_unsupervised_loss(model: TTSModel, features, pseudo_transcripts, speakers) -> torch.Tensor:
    """Same frame loss, with base-ASR pseudo transcripts standing in for the text."""
    if len(features) == 0:
        raise ValueError("empty batch")
    if any(t is None for t in pseudo_transcripts):
        raise ValueError("missing pseudo transcript")
    pred = model([tts_input(t) for t in pseudo_transcripts], speakers, features)
    return frame_loss(pred, features)


@dataclass(frozen=True)
class TTSTrainConfig:
    lr: float = 1e-3
    decay: float = 0.1
    patience: int = 3
    max_epochs: int = 30
    batch_size: int = 32
    beam: int = 4
    seed: int = 0


def pseudo_transcribe(model: ASRModel, utts: list[Utterance], beam: int = 4) -> dict[str, list[int]]:
    ids = batch_beam_decode(model, [u.features for u in utts], beam)
    return {u.uid: t for u, t in zip(utts, ids)}


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def tts_dev_loss(model: TTSModel, dev: list[Utterance], batch_size: int = 64) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(dev), batch_size):
            chunk = dev[i : i + batch_size]
            loss = tts_supervised_loss(
                model,
                [u.features for u in chunk],
                [u.transcript for u in chunk],
                [extract_speaker_embedding(u.features) for u in chunk],
            )
            total += float(loss) * len(chunk)
    return total / len(dev)


def train_tts(
    labeled: list[Utterance],
    unlabeled: list[Utterance],
    dev: list[Utterance],
    base_asr: ASRModel,
    model_config: TTSConfig = TTSConfig(),
    config: TTSTrainConfig = TTSTrainConfig(),
    pseudo: dict[str, list[int]] | None = None,
    on_epoch=None,
) -> tuple[TTSModel, dict[str, list[int]]]:
    """Train on labeled text plus base-ASR pseudo transcripts of the unlabeled speech.

    Pseudo transcripts are decoded once, before the first epoch. Each step adds the
    supervised loss of one labeled batch and the unsupervised loss of one unlabeled
    batch. Returns the best-on-dev model and the pseudo transcripts used.
    """
    model = TTSModel(model_config, seed=config.seed)
    if pseudo is None:
        pseudo = pseudo_transcribe(base_asr, unlabeled, config.beam) if unlabeled else {}
    spk = {u.uid: extract_speaker_embedding(u.features) for u in [*labeled, *unlabeled]}
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = PlateauSchedule(opt, mode="min", factor=config.decay, patience=config.patience)
    rng = np.random.default_rng([config.seed, 11])
    initial = tts_dev_loss(model, dev)
    log.info("tts epoch 0 dev_loss %.4f", initial)
    for epoch in range(1, config.max_epochs + 1):
        lab_batches = _batches(len(labeled), config.batch_size, rng)
        unl_batches = _batches(len(unlabeled), config.batch_size, rng) if unlabeled else []
        for i, lb in enumerate(lab_batches):
            lab = [labeled[j] for j in lb]
            loss = tts_supervised_loss(
                model, [u.features for u in lab], [u.transcript for u in lab], [spk[u.uid] for u in lab]
            )
            if unl_batches:
                unl = [unlabeled[j] for j in unl_batches[i % len(unl_batches)]]
                loss = loss + tts_unsupervised_loss(
                    model, [u.features for u in unl], [pseudo[u.uid] for u in unl], [spk[u.uid] for u in unl]
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        dev_loss = tts_dev_loss(model, dev)
        sched.step(dev_loss, model)
        log.info("tts epoch %d dev_loss %.4f lr %.2e", epoch, dev_loss, sched.lr)
        if on_epoch is not None:
            on_epoch(epoch, "dev", "tts_loss", dev_loss)
        if sched.should_stop:
            break
    sched.restore_best(model)
    model.eval()
    return model, pseudo
