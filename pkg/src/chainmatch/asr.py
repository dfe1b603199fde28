"""Attention-based encoder-decoder ASR (a scaled-down Listen-Attend-Spell).

Encoder: stacked bidirectional LSTMs; the last two layers each halve the sequence by
keeping even-indexed output frames, so ``S' = ceil(ceil(S / 2) / 2)``.
Decoder: token embedding + previous attention context -> LSTM cell -> additive
attention over the encoder states -> linear projection of ``[h; context]`` to logits.

Token sequences handed to the scoring functions end with ``EOS``; the decoder input at
position ``t`` is ``[EOS] + tokens[:t]`` (``EOS`` doubles as start-of-sequence).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from chainmatch.corpus import EOS

VOCAB_SIZE = 29


@dataclass(frozen=True)
class ASRConfig:
    n_feats: int = 20
    encoder_layers: int = 2
    encoder_hidden: int = 64
    decoder_hidden: int = 128
    embed_size: int = 32
    attention_size: int = 64
    vocab_size: int = VOCAB_SIZE
    subsample_factor: int = 4

    def __post_init__(self):
        if self.subsample_factor != 4:
            raise ValueError("subsample_factor is fixed at 4")
        if self.encoder_layers < 2:
            raise ValueError("need >= 2 encoder layers (the last two subsample)")
        sizes = (self.n_feats, self.encoder_hidden, self.decoder_hidden, self.embed_size, self.attention_size)
        if min(sizes) < 1:
            raise ValueError(f"all sizes must be >= 1, got {sizes}")


def subsampled_length(n_frames: int) -> int:
    return math.ceil(math.ceil(n_frames / 2) / 2)


@dataclass
class EncoderStates:
    states: torch.Tensor  # (B, S', 2H)
    lengths: torch.Tensor  # (B,) int64

    def select(self, rows: torch.Tensor) -> EncoderStates:
        return EncoderStates(self.states.index_select(0, rows), self.lengths.index_select(0, rows))


@dataclass
class DecoderState:
    h: torch.Tensor
    c: torch.Tensor
    context: torch.Tensor

    def select(self, rows: torch.Tensor) -> DecoderState:
        return DecoderState(self.h.index_select(0, rows), self.c.index_select(0, rows), self.context.index_select(0, rows))


@dataclass
class Hypothesis:
    ids: list[int]
    log_prob: float


class AdditiveAttention(nn.Module):
    """score_j = v . tanh(W_k enc_j + W_q h); padded positions get zero weight."""

    def __init__(self, key_size: int, query_size: int, attention_size: int):
        super().__init__()
        self.key = nn.Linear(key_size, attention_size, bias=False)
        self.query = nn.Linear(query_size, attention_size)
        self.score = nn.Linear(attention_size, 1, bias=False)

    def forward(self, keys, values, mask, query):
        # keys: (B, S', A) precomputed projection of values; mask: (B, S') True on valid frames
        energy = self.score(torch.tanh(keys + self.query(query).unsqueeze(1))).squeeze(-1)
        energy = energy.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(energy, dim=-1)
        context = torch.bmm(weights.unsqueeze(1), values).squeeze(1)
        return context, weights


class ASRModel(nn.Module):
    def __init__(self, config: ASRConfig = ASRConfig(), seed: int = 0, role: str = "base"):
        super().__init__()
        self.config = config
        self.role = role
        H = config.encoder_hidden
        layers = []
        for i in range(config.encoder_layers):
            layers.append(nn.LSTM(config.n_feats if i == 0 else 2 * H, H, batch_first=True, bidirectional=True))
        self.encoder = nn.ModuleList(layers)
        self.embed = nn.Embedding(config.vocab_size, config.embed_size)
        self.cell = nn.LSTMCell(config.embed_size + 2 * H, config.decoder_hidden)
        self.attention = AdditiveAttention(2 * H, config.decoder_hidden, config.attention_size)
        self.output = nn.Linear(config.decoder_hidden + 2 * H, config.vocab_size)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-0.1, 0.1, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.output.weight.dtype

    def clone(self, role: str | None = None) -> ASRModel:
        other = copy.deepcopy(self)
        if role is not None:
            other.role = role
        return other

    # -- encoder ---------------------------------------------------------------------

    def encode_batch(self, features: list[np.ndarray]) -> EncoderStates:
        lengths = torch.tensor([len(f) for f in features], dtype=torch.int64)
        if int(lengths.min()) < 1:
            raise ValueError("every utterance needs at least one frame")
        x = nn.utils.rnn.pad_sequence([torch.as_tensor(f, dtype=self.dtype) for f in features], batch_first=True)
        n_layers = len(self.encoder)
        for i, lstm in enumerate(self.encoder):
            packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
            out, _ = lstm(packed)
            x, _ = pad_packed_sequence(out, batch_first=True, total_length=x.size(1))
            if i >= n_layers - 2:
                x = x[:, ::2]
                lengths = (lengths + 1) // 2
        return EncoderStates(x, lengths)

    # -- decoder ---------------------------------------------------------------------

    def initial_state(self, batch: int) -> DecoderState:
        zeros = lambda n: torch.zeros(batch, n, dtype=self.dtype)  # noqa: E731
        return DecoderState(zeros(self.config.decoder_hidden), zeros(self.config.decoder_hidden), zeros(2 * self.config.encoder_hidden))

    def attention_keys(self, enc: EncoderStates):
        mask = torch.arange(enc.states.size(1)).unsqueeze(0) < enc.lengths.unsqueeze(1)
        return self.attention.key(enc.states), mask

    def step(self, enc: EncoderStates, keys, mask, prev_tokens: torch.Tensor, state: DecoderState):
        """One decoder step; returns (log-probabilities (B, V), new state, attention weights)."""
        inp = torch.cat([self.embed(prev_tokens), state.context], dim=-1)
        h, c = self.cell(inp, (state.h, state.c))
        context, weights = self.attention(keys, enc.states, mask, h)
        logits = self.output(torch.cat([h, context], dim=-1))
        return F.log_softmax(logits, dim=-1), DecoderState(h, c, context), weights


def _as_batch(features) -> list[np.ndarray]:
    return [features] if isinstance(features, np.ndarray) or torch.is_tensor(features) else list(features)


def encode(model: ASRModel, features: np.ndarray) -> EncoderStates:
    """Encode one utterance; ``states`` has shape (1, S', 2H)."""
    return model.encode_batch([features])


def decode_step(model: ASRModel, enc: EncoderStates, prefix: list[int], return_attention: bool = False):
    """Distribution over the next token given a prefix starting with ``EOS`` (single utterance)."""
    if len(prefix) == 0:
        raise ValueError("prefix must start with the sos/eos id")
    if prefix[0] != EOS:
        raise ValueError("prefix must start with the sos/eos id")
    keys, mask = model.attention_keys(enc)
    state = model.initial_state(enc.states.size(0))
    with torch.no_grad():
        for tok in prefix:
            logp, state, weights = model.step(enc, keys, mask, torch.tensor([tok]), state)
    probs = logp.exp()[0].numpy()
    return (probs, weights[0].numpy()) if return_attention else probs


def teacher_forced_log_probs(model: ASRModel, features, prefixes: list[list[int]], enc: EncoderStates | None = None):
    """Log-probabilities for every position of every (padded) prefix.

    ``prefixes[b]`` are decoder inputs (starting with ``EOS``); returns ``(B, T, V)``
    log-probs and a ``(B, T)`` validity mask.
    """
    if enc is None:
        enc = model.encode_batch(_as_batch(features))
    B = enc.states.size(0)
    T = max(len(p) for p in prefixes)
    inputs = torch.full((B, T), EOS, dtype=torch.int64)
    valid = torch.zeros(B, T, dtype=torch.bool)
    for b, p in enumerate(prefixes):
        inputs[b, : len(p)] = torch.as_tensor(p, dtype=torch.int64)
        valid[b, : len(p)] = True
    keys, mask = model.attention_keys(enc)
    state = model.initial_state(B)
    out = []
    for t in range(T):
        logp, state, _ = model.step(enc, keys, mask, inputs[:, t], state)
        out.append(logp)
    return torch.stack(out, dim=1), valid


def _shift(tokens: list[int]) -> list[int]:
    return [EOS] + list(tokens[:-1])


def target_log_probs(model: ASRModel, features, targets: list[list[int]], prefixes: list[list[int]] | None = None):
    """Per-position ``log p(targets_t | prefixes_{1:t}, x)``, zero-padded, plus mask.

    Prefixes default to the shifted targets (teacher forcing on the targets themselves).
    """
    if prefixes is None:
        prefixes = [_shift(t) for t in targets]
    logp, valid = teacher_forced_log_probs(model, features, prefixes)
    tgt = torch.zeros(valid.shape, dtype=torch.int64)
    for b, t in enumerate(targets):
        tgt[b, : len(t)] = torch.as_tensor(t, dtype=torch.int64)
    picked = logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    return torch.where(valid, picked, torch.zeros_like(picked)), valid


def sequence_log_prob(model: ASRModel, features: np.ndarray, tokens: list[int]) -> float:
    """log P(tokens | x) as the sum of teacher-forced stepwise log-probabilities."""
    if not tokens or tokens[-1] != EOS:
        raise ValueError("tokens must end with the sos/eos id")
    with torch.no_grad():
        picked, _ = target_log_probs(model, [features], [list(tokens)])
    return float(picked.sum())


def supervised_loss(model: ASRModel, features: list[np.ndarray], transcripts: list[list[int]]) -> torch.Tensor:
    """Mean over utterances of ``-(1/T) sum_t log p(y_t | y_{<t}, x)``.

    ``transcripts`` exclude the final ``EOS``, which is appended here. Returns a
    differentiable scalar; call ``.backward()`` to populate gradients.
    """
    if len(features) == 0:
        raise ValueError("empty batch")
    if any(t is None for t in transcripts):
        raise ValueError("supervised loss needs transcripts for every utterance")
    targets = [list(t) + [EOS] for t in transcripts]
    picked, valid = target_log_probs(model, features, targets)
    per_utt = -picked.sum(dim=1) / valid.sum(dim=1)
    return per_utt.mean()


def default_max_len(n_frames: int) -> int:
    return 2 * subsampled_length(n_frames) + 10


def greedy_decode(model: ASRModel, features: np.ndarray, max_len: int | None = None) -> list[int]:
    """Stepwise argmax (smallest id on ties); ``EOS`` is forced at position ``max_len``."""
    if max_len is None:
        max_len = default_max_len(len(features))
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with torch.no_grad():
        enc = model.encode_batch([features])
        keys, mask = model.attention_keys(enc)
        state = model.initial_state(1)
        ids: list[int] = []
        prev = EOS
        for t in range(1, max_len + 1):
            logp, state, _ = model.step(enc, keys, mask, torch.tensor([prev]), state)
            tok = EOS if t == max_len else int(np.argmax(logp[0].numpy()))
            ids.append(tok)
            if tok == EOS:
                break
            prev = tok
    return ids


def beam_decode(model: ASRModel, features: np.ndarray, beam: int = 4, max_len: int | None = None) -> list[int]:
    return beam_search(model, [features], beam, None if max_len is None else [max_len])[0].ids


def _lex_ranks(seqs: list[tuple[int, ...]]) -> list[int]:
    order = sorted(range(len(seqs)), key=lambda i: seqs[i])
    ranks = [0] * len(seqs)
    for r, i in enumerate(order):
        ranks[i] = r
    return ranks


def beam_search(model: ASRModel, features, beam: int = 4, max_lens: list[int] | None = None) -> list[Hypothesis]:
    """Length-unnormalized beam search over a batch of utterances.

    Candidates are ranked by (total log-prob desc, parent ids lexicographic, step
    log-prob desc, token id). Walking down the ranking, ``EOS`` candidates are
    finished until ``beam`` live continuations have been kept. A hypothesis still
    live at ``max_len`` is closed with ``EOS`` (its probability included). Search for
    an utterance ends once its best finished score strictly exceeds every live score,
    which cannot change the result since log-probabilities never increase.
    Returns the best finished hypothesis (ties -> lexicographically smallest ids).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    features = _as_batch(features)
    B = len(features)
    if max_lens is None:
        max_lens = [default_max_len(len(f)) for f in features]
    if min(max_lens) < 1:
        raise ValueError("max_len must be >= 1")
    with torch.no_grad():
        enc_all = model.encode_batch(features)
        # live rows: (utterance, ids, score)
        live: list[tuple[int, tuple[int, ...], float]] = [(b, (), 0.0) for b in range(B)]
        rows = torch.arange(B)
        enc = enc_all.select(rows)
        keys, mask = model.attention_keys(enc)
        state = model.initial_state(B)
        prev = torch.full((B,), EOS, dtype=torch.int64)
        finished: list[list[tuple[float, tuple[int, ...]]]] = [[] for _ in range(B)]
        step = 0
        while live:
            step += 1
            logp, state, _ = model.step(enc, keys, mask, prev, state)
            logp = logp.double().numpy()
            by_utt: dict[int, list[int]] = {}
            for r, (b, _, _) in enumerate(live):
                by_utt.setdefault(b, []).append(r)
            new_live, parents, tokens = [], [], []
            for b, rs in by_utt.items():
                if step == max_lens[b]:
                    for r in rs:
                        finished[b].append((live[r][2] + logp[r, EOS], live[r][1] + (EOS,)))
                    continue
                ranks = _lex_ranks([live[r][1] for r in rs])
                step_lp = logp[rs]  # (n, V)
                total = np.array([live[r][2] for r in rs])[:, None] + step_lp
                n, V = step_lp.shape
                par = np.repeat(np.arange(n), V)
                tok = np.tile(np.arange(V), n)
                order = np.lexsort((tok, -step_lp.ravel(), np.asarray(ranks)[par], -total.ravel()))
                kept = []
                for k in order:
                    p, t = int(par[k]), int(tok[k])
                    if t == EOS:
                        finished[b].append((float(total[p, t]), live[rs[p]][1] + (EOS,)))
                    else:
                        kept.append((p, t))
                        if len(kept) == beam:
                            break
                if finished[b] and kept:
                    best_done = max(s for s, _ in finished[b])
                    if best_done > max(float(total[p, t]) for p, t in kept):
                        kept = []
                for p, t in kept:
                    r = rs[p]
                    new_live.append((b, live[r][1] + (t,), float(total[p, t])))
                    parents.append(r)
                    tokens.append(t)
            live = new_live
            if not live:
                break
            sel = torch.tensor(parents, dtype=torch.int64)
            state = state.select(sel)
            enc = enc.select(sel)
            keys, mask = keys.index_select(0, sel), mask.index_select(0, sel)
            prev = torch.tensor(tokens, dtype=torch.int64)
    results = []
    for b in range(B):
        score, ids = min(finished[b], key=lambda f: (-f[0], f[1]))
        results.append(Hypothesis(list(ids), score))
    return results


def batch_beam_decode(model: ASRModel, features: list[np.ndarray], beam: int = 4, batch_size: int = 64) -> list[list[int]]:
    out: list[list[int]] = []
    for i in range(0, len(features), batch_size):
        out.extend(h.ids for h in beam_search(model, features[i : i + batch_size], beam))
    return out
