import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from oracles import gradient_check

from chainmatch.asr import ASRConfig, ASRModel
from chainmatch.corpus import EOS, CorpusSpec, extract_speaker_embedding, generate_corpus
from chainmatch.tts import (
    FramePrediction,
    TTSConfig,
    TTSModel,
    TTSTrainConfig,
    frame_loss,
    padded_length,
    train_tts,
    tts_input,
    tts_supervised_loss,
    tts_teacher_forced,
    tts_unsupervised_loss,
)

TINY_TTS = TTSConfig(n_feats=6, embed_size=4, encoder_hidden=3, decoder_hidden=5, attention_size=4)


def _model(seed=0, dtype=torch.float64):
    return TTSModel(TINY_TTS, seed=seed).to(dtype)


def _speaker(rng):
    v = rng.normal(size=16)
    return v / np.linalg.norm(v)


@pytest.mark.parametrize("S, expected", [(10, 10), (11, 12), (1, 2), (2, 2)])
def test_output_length_is_even_padded(S, expected):
    rng = np.random.default_rng(0)
    pred = tts_teacher_forced(_model(), [3, 4, EOS], _speaker(rng), rng.normal(size=(S, 6)))
    assert padded_length(S) == expected
    assert pred.frames.shape == (1, expected, 6)
    assert pred.stop_logits.shape == (1, expected)
    assert ((pred.stop_probs >= 0) & (pred.stop_probs <= 1)).all()


def test_teacher_forced_deterministic():
    rng = np.random.default_rng(1)
    spk, ref = _speaker(rng), rng.normal(size=(9, 6))
    a = tts_teacher_forced(_model(3), [5, 6, EOS], spk, ref)
    b = tts_teacher_forced(_model(3), [5, 6, EOS], spk, ref)
    assert torch.equal(a.frames, b.frames) and torch.equal(a.stop_logits, b.stop_logits)


def test_rejects_empty_inputs():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        tts_teacher_forced(_model(), [], _speaker(rng), rng.normal(size=(4, 6)))
    with pytest.raises(ValueError):
        tts_supervised_loss(_model(), [], [], [])
    with pytest.raises(ValueError):
        TTSConfig(frames_per_step=3)


def test_tts_input_appends_single_eos():
    assert tts_input([3, 4]) == [3, 4, EOS]
    assert tts_input([3, 4, EOS]) == [3, 4, EOS]
    assert tts_input([]) == [EOS]


def _prediction(frames, stop_logits, n_real):
    frames = torch.as_tensor(np.asarray(frames, dtype=np.float64))
    n_real = torch.tensor(n_real)
    return FramePrediction(frames, torch.as_tensor(np.asarray(stop_logits, dtype=np.float64)), n_real, n_real + n_real % 2)


def test_hand_computed_loss():
    # two frames, one bin; every frame off by 0.5 and every stop prob at 0.8 or 0.2
    logit = math.log(0.8 / 0.2)
    pred = _prediction([[[0.5], [0.5]]], [[-logit, logit]], [2])
    loss = float(frame_loss(pred, [np.array([[1.0], [1.0]])]))
    assert loss == pytest.approx(0.25 - math.log(0.8), abs=1e-9)
    assert loss == pytest.approx(0.4731, abs=1e-4)


def test_hand_computed_single_frame_formula():
    # one real frame, one bin, no padding: x=1, x^=0.5, b=1, b^=0.8
    frames = torch.tensor([[[0.5]]], dtype=torch.float64)
    stop = torch.tensor([[math.log(0.8 / 0.2)]], dtype=torch.float64)
    pred = FramePrediction(frames, stop, torch.tensor([1]), torch.tensor([1]))
    loss = float(frame_loss(pred, [np.array([[1.0]])]))
    assert loss == pytest.approx(0.25 - math.log(0.8), abs=1e-12)
    assert loss == pytest.approx(0.4731, abs=1e-4)


def test_padding_frame_has_no_squared_error_and_stop_target_one():
    logit = math.log(0.8 / 0.2)
    # one real frame, padded to two; the padding prediction is wildly off but must not count
    pred = _prediction([[[1.0], [99.0]]], [[logit, logit]], [1])
    loss = float(frame_loss(pred, [np.array([[1.0]])]))
    assert loss == pytest.approx(-math.log(0.8), abs=1e-9)


def test_perfect_prediction_loss_near_zero():
    ref = np.random.default_rng(3).normal(size=(6, 2))
    stops = np.where(np.arange(6) >= 5, 40.0, -40.0)
    pred = _prediction([ref], [stops], [6])
    assert float(frame_loss(pred, [ref])) < 1e-12


def test_zero_logits_give_ln2_stop_term():
    ref = np.zeros((4, 3))
    pred = _prediction([ref], [np.zeros(4)], [4])
    assert float(frame_loss(pred, [ref])) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_is_nonnegative_and_batch_mean():
    rng = np.random.default_rng(4)
    model = _model(1)
    feats = [rng.normal(size=(n, 6)) for n in (5, 8, 3)]
    texts = [[3, 4], [5], [6, 7, 8]]
    spks = [_speaker(rng) for _ in feats]
    joint = float(tts_supervised_loss(model, feats, texts, spks))
    single = [float(tts_supervised_loss(model, [f], [t], [s])) for f, t, s in zip(feats, texts, spks)]
    assert joint >= 0 and all(v >= 0 for v in single)
    assert joint == pytest.approx(np.mean(single), abs=1e-9)


def test_unsupervised_equals_supervised_on_same_text():
    rng = np.random.default_rng(5)
    model = _model(2)
    feats, texts, spks = [rng.normal(size=(7, 6))], [[3, 9, 4]], [_speaker(rng)]
    sup = float(tts_supervised_loss(model, feats, texts, spks))
    assert float(tts_unsupervised_loss(model, feats, texts, spks)) == sup
    with pytest.raises(ValueError):
        tts_unsupervised_loss(model, feats, [None], spks)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    model = _model(4)
    feats = [rng.normal(size=(5, 6)), rng.normal(size=(8, 6))]
    texts, spks = [[3, 4], [7, 8, 9]], [_speaker(rng), _speaker(rng)]
    results = gradient_check(lambda: tts_supervised_loss(model, feats, texts, spks), model, n_coords=100)
    worst = max(results, key=lambda r: r[4])
    assert worst[4] <= 1e-3, worst


def test_combined_loss_gradient_is_additive():
    rng = np.random.default_rng(7)
    model = _model(5)
    lab = ([rng.normal(size=(6, 6))], [[3, 4]], [_speaker(rng)])
    unl = ([rng.normal(size=(9, 6))], [[10, 11, 12]], [_speaker(rng)])

    def grads(fn):
        model.zero_grad()
        fn().backward()
        return [p.grad.clone() for p in model.parameters()]

    g_lab = grads(lambda: tts_supervised_loss(model, *lab))
    g_unl = grads(lambda: tts_unsupervised_loss(model, *unl))
    g_sum = grads(lambda: tts_supervised_loss(model, *lab) + tts_unsupervised_loss(model, *unl))
    for a, b, s in zip(g_lab, g_unl, g_sum):
        assert torch.allclose(a + b, s, atol=1e-12)


def _tiny_corpus():
    spec = CorpusSpec(n_labeled=24, n_unlabeled=24, n_dev=8, n_test=8, n_feats=6, max_chars=4)
    return generate_corpus(spec, 0)


def test_training_improves_dev_loss_and_reuses_pseudo():
    corpus = _tiny_corpus()
    base = ASRModel(ASRConfig(n_feats=6, encoder_hidden=8, decoder_hidden=8, embed_size=4, attention_size=4), seed=0)
    history = []
    cfg = TTSTrainConfig(max_epochs=4, batch_size=8, beam=2)
    model, pseudo = train_tts(
        corpus.labeled, corpus.unlabeled, corpus.dev, base, replace(TINY_TTS, decoder_hidden=16), cfg,
        on_epoch=lambda *row: history.append(row[-1]),
    )
    assert set(pseudo) == {u.uid for u in corpus.unlabeled}
    assert len(history) >= 1 and min(history) < _initial_dev(corpus)
    again, reused = train_tts(
        corpus.labeled, corpus.unlabeled, corpus.dev, base, replace(TINY_TTS, decoder_hidden=16), cfg, pseudo=pseudo
    )
    assert reused is pseudo
    for a, b in zip(model.parameters(), again.parameters()):
        assert torch.equal(a, b)


def _initial_dev(corpus):
    from chainmatch.tts import tts_dev_loss

    return tts_dev_loss(TTSModel(replace(TINY_TTS, decoder_hidden=16), seed=0), corpus.dev)


def test_training_without_unlabeled_data():
    corpus = _tiny_corpus()
    base = ASRModel(ASRConfig(n_feats=6, encoder_hidden=8, decoder_hidden=8, embed_size=4, attention_size=4), seed=0)
    model, pseudo = train_tts(corpus.labeled, [], corpus.dev, base, TINY_TTS, TTSTrainConfig(max_epochs=1, batch_size=8))
    assert pseudo == {}
    spk = extract_speaker_embedding(corpus.dev[0].features)
    assert tts_teacher_forced(model, [3, EOS], spk, corpus.dev[0].features).frames.shape[2] == 6
