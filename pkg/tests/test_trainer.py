import math

import numpy as np
import pytest
import torch
from oracles import TINY_ASR, gradient_check, random_asr, random_features, zero_logit_asr

from chainmatch.asr import ASRModel, _shift, decode_step, encode, target_log_probs
from chainmatch.augment import AugmentContext, AugmentPolicy, ReconstructionCache
from chainmatch.corpus import EOS, CorpusSpec, generate_corpus
from chainmatch.schedule import PlateauSchedule
from chainmatch.trainer import (
    BLOCKS,
    ASRTrainConfig,
    ConsistencyTrainConfig,
    MetricLog,
    Scenario,
    consistency_loss,
    dev_accuracy,
    make_pseudo_labels,
    make_pseudo_transcript,
    total_loss,
    train_base,
    train_consistency,
)


def test_scenario_names_and_blocks():
    s = Scenario("dynamic", "weak_perturbed", "speech_chain", tau=0.7)
    assert s.block == "dynamic-weak_perturbed"
    assert s.name == "dynamic-weak_perturbed-speech_chain-tau0.7"
    assert len(BLOCKS) == 4 and len(set(BLOCKS)) == 4
    with pytest.raises(ValueError):
        Scenario(tau=1.5)
    with pytest.raises(ValueError):
        Scenario(transcript_mode="frozen")


def test_pseudo_labels_zero_logit_model():
    model = zero_logit_asr()
    labels, q = make_pseudo_labels(model, np.ones((8, 6)), [5, 6, EOS])
    assert labels == [0, 0, 0]
    assert np.allclose(q, 1 / 29, atol=1e-12)


def test_pseudo_labels_match_stepwise_decoding():
    rng = np.random.default_rng(0)
    for seed in range(10):
        model = random_asr(seed, sharpness=5.0)
        x = random_features(rng, int(rng.integers(1, 25)))
        y_tilde = [int(t) for t in rng.integers(1, 29, size=int(rng.integers(0, 5)))] + [EOS]
        labels, q = make_pseudo_labels(model, x, y_tilde)
        enc = encode(model, x)
        for t in range(len(y_tilde)):
            probs = decode_step(model, enc, [EOS] + y_tilde[:t])
            assert labels[t] == int(np.argmax(probs))
            assert q[t] == pytest.approx(probs.max(), abs=1e-9)
        assert ((q > 0) & (q <= 1)).all()


def test_pseudo_labels_batched_equal_single():
    rng = np.random.default_rng(1)
    model = random_asr(2, sharpness=4.0)
    xs = [random_features(rng, n) for n in (4, 17, 9)]
    ts = [[3, EOS], [4, 5, 6, EOS], [EOS]]
    labels, q = make_pseudo_labels(model, xs, ts)
    for x, t, lab, conf in zip(xs, ts, labels, q):
        l1, q1 = make_pseudo_labels(model, x, t)
        assert l1 == lab and np.allclose(q1, conf, atol=1e-12)
    with pytest.raises(ValueError):
        make_pseudo_labels(model, xs[:1], [[]])


def _half_model():
    # zero weights, bias ln 28 on token 3: p(3) = 28 / (28 + 28) = 0.5 everywhere
    model = zero_logit_asr()
    with torch.no_grad():
        model.output.bias[3] = math.log(28)
    return model


def test_consistency_hand_computed_case():
    model = _half_model()
    loss = consistency_loss(model, [np.ones((6, 6))], [[5, EOS]], [[3, 3]], [np.array([0.9, 0.6])], tau=0.7)
    assert float(loss) == pytest.approx(-0.5 * math.log(0.5), abs=1e-12)
    assert float(loss) == pytest.approx(0.3466, abs=1e-4)


def test_consistency_all_masked_is_exactly_zero_with_zero_gradients():
    model = random_asr(3, sharpness=3.0)
    rng = np.random.default_rng(2)
    xs = [random_features(rng, 10), random_features(rng, 5)]
    ts = [[4, 5, EOS], [6, EOS]]
    labels, q = make_pseudo_labels(model, xs, ts)
    model.zero_grad()
    loss = consistency_loss(model, xs, ts, labels, [np.zeros(len(t)) for t in ts], tau=0.5)
    loss.backward()
    assert float(loss) == 0.0
    for p in model.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    # tau = 1 can never fire, even at q = 1
    one = consistency_loss(model, xs, ts, labels, [np.ones(len(t)) for t in ts], tau=1.0)
    assert float(one) == 0.0


def test_tau_zero_fires_every_position():
    model = random_asr(4, sharpness=3.0)
    rng = np.random.default_rng(3)
    xs, ts = [random_features(rng, 12)], [[7, 8, 9, EOS]]
    labels, q = make_pseudo_labels(model, xs, ts)
    picked, _ = target_log_probs(model, xs, labels, [_shift(t) for t in ts])
    loss = consistency_loss(model, xs, ts, labels, q, tau=0.0)
    assert float(loss) == pytest.approx(-float(picked[0, :4].sum()) / 4, abs=1e-12)


def test_tau_monotonicity_and_masked_sum_oracle():
    model = random_asr(5, sharpness=3.0)
    rng = np.random.default_rng(4)
    xs = [random_features(rng, 14), random_features(rng, 7)]
    ts = [[3, 4, 5, 6, 7, EOS], [8, 9, EOS]]
    labels, _ = make_pseudo_labels(model, xs, ts)
    with torch.no_grad():
        picked, _ = target_log_probs(model, xs, labels, [_shift(t) for t in ts])
    picked = picked.numpy()
    for _ in range(100):
        q = [rng.uniform(size=len(t)) for t in ts]
        tau1, tau2 = np.sort(rng.uniform(size=2))
        sets = []
        for tau in (tau1, tau2):
            kept = [set(np.flatnonzero(qb > tau)) for qb in q]
            sets.append(kept)
            oracle = np.mean([-sum(picked[b, t] for t in kept[b]) / len(ts[b]) for b in range(2)])
            with torch.no_grad():
                value = float(consistency_loss(model, xs, ts, labels, q, tau))
            assert value == pytest.approx(oracle, abs=1e-9)
        assert all(high <= low for low, high in zip(*sets))


def test_consistency_rejects_misaligned_inputs():
    model = random_asr(0)
    with pytest.raises(ValueError):
        consistency_loss(model, [np.ones((4, 6))], [[3, EOS]], [[3]], [np.ones(2)], 0.5)
    with pytest.raises(ValueError):
        consistency_loss(model, [np.ones((4, 6))], [[3, EOS]], [[3, 3]], [np.ones(2)], 1.5)


def test_consistency_gradients_match_finite_differences():
    model = random_asr(6, sharpness=2.0)
    rng = np.random.default_rng(5)
    xs = [random_features(rng, 9), random_features(rng, 13)]
    ts = [[3, 4, EOS], [10, 11, 12, EOS]]
    labels, _ = make_pseudo_labels(model, xs, ts)
    q = [np.array([0.9, 0.2, 0.8]), np.array([0.95, 0.9, 0.1, 0.99])]
    results = gradient_check(lambda: consistency_loss(model, xs, ts, labels, q, 0.5), model, n_coords=100)
    worst = max(results, key=lambda r: r[4])
    assert worst[4] <= 1e-3, worst


def test_total_loss_additivity():
    rng = np.random.default_rng(6)
    for _ in range(100):
        sup, con, lam = rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 1)
        assert abs(total_loss(sup, con, lam) - (sup + lam * con)) <= 1e-9
    assert total_loss(2.0, 3.0) == pytest.approx(2.3, abs=1e-12)
    model = random_asr(7, sharpness=2.0)
    x = [random_features(rng, 8)]
    sup = consistency_loss(model, x, [[3, EOS]], [[3, 4]], [np.ones(2)], 0.0)
    con = consistency_loss(model, x, [[5, EOS]], [[6, 7]], [np.ones(2)], 0.0)
    grads = []
    for fn in (lambda: sup, lambda: con, lambda: total_loss(sup, con, 0.1)):
        model.zero_grad()
        fn().backward(retain_graph=True)
        grads.append([p.grad.clone() for p in model.parameters()])
    for a, b, s in zip(*grads):
        assert torch.allclose(a + 0.1 * b, s, atol=1e-12)


def test_pseudo_transcript_source_selection():
    rng = np.random.default_rng(7)
    teacher, student = random_asr(8, sharpness=6.0), random_asr(9, sharpness=6.0)
    x, weak = random_features(rng, 20), random_features(rng, 20)
    from chainmatch.asr import beam_decode

    cases = {
        ("static", "original"): beam_decode(teacher, x, 4),
        ("static", "weak_perturbed"): beam_decode(teacher, weak, 4),
        ("dynamic", "original"): beam_decode(student, x, 4),
        ("dynamic", "weak_perturbed"): beam_decode(student, weak, 4),
    }
    for (mode, inp), expected in cases.items():
        out = make_pseudo_transcript(x, Scenario(mode, inp, "weak_specaugment"), teacher, student, weak)
        assert out == expected
    with pytest.raises(ValueError):
        make_pseudo_transcript(x, Scenario("dynamic", "weak_perturbed"), teacher, student, None)


def test_dev_accuracy_oracles():
    corpus = generate_corpus(CorpusSpec(n_labeled=4, n_unlabeled=4, n_dev=10, n_test=2, n_feats=6), 0)
    # argmax ties resolve to id 0, so only the trailing EOS is ever right
    expected = len(corpus.dev) / sum(len(u.transcript) + 1 for u in corpus.dev)
    assert dev_accuracy(zero_logit_asr(), corpus.dev) == pytest.approx(expected, abs=1e-12)
    assert dev_accuracy(zero_logit_asr(), corpus.dev, batch_size=3) == pytest.approx(expected, abs=1e-12)


def test_plateau_schedule_floors_at_one_percent():
    for factor in (0.9, 0.8, 0.5):
        p = torch.nn.Parameter(torch.zeros(1))
        opt = torch.optim.SGD([p], lr=1.0)
        sched = PlateauSchedule(opt, mode="max", factor=factor, patience=1000)
        sched.step(0.5)
        for _ in range(200):
            sched.step(0.5)
        assert sched.lr == 0.01
        assert min(lr for _, _, lr in sched.state.history) == 0.01


def test_plateau_schedule_decays_once_per_bad_epoch():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([p], lr=1.0)
    sched = PlateauSchedule(opt, mode="max", factor=0.9, patience=3)
    assert sched.step(0.5)
    assert sched.lr == 1.0
    assert not sched.step(0.4)
    assert sched.lr == pytest.approx(0.9)
    assert sched.step(0.6) and sched.lr == pytest.approx(0.9)


def test_early_stopping_after_patience():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([p], lr=1.0)
    for patience in (1, 3, 5):
        sched = PlateauSchedule(opt, mode="min", factor=0.5, patience=patience)
        sched.step(1.0)
        for k in range(1, patience + 1):
            assert not sched.should_stop
            sched.step(2.0)
        assert sched.should_stop
        opt.param_groups[0]["lr"] = 1.0


def test_restore_best_state():
    model = torch.nn.Linear(2, 1)
    opt = torch.optim.SGD(model.parameters(), lr=1.0)
    sched = PlateauSchedule(opt, mode="max", factor=0.5)
    sched.step(0.9, model)
    best = {k: v.clone() for k, v in model.state_dict().items()}
    with torch.no_grad():
        model.weight.add_(1.0)
    sched.step(0.1, model)
    sched.restore_best(model)
    assert all(torch.equal(best[k], v) for k, v in model.state_dict().items())


@pytest.fixture(scope="module")
def tiny():
    spec = CorpusSpec(n_labeled=24, n_unlabeled=16, n_dev=8, n_test=8, n_feats=6, max_chars=4)
    return generate_corpus(spec, 1)


FAST = ASRTrainConfig(max_epochs=2, batch_size=8)
CONS = ConsistencyTrainConfig(max_epochs=2, batch_size=8, beam=2)
CTX = AugmentContext(weak=AugmentPolicy(1, 2, 1), strong=AugmentPolicy(2, 3, 2), seed=0)


def test_train_base_deterministic_and_logged(tiny, tmp_path):
    log = MetricLog(tmp_path / "metrics.log")
    a = train_base(tiny.labeled, tiny.dev, TINY_ASR, FAST, on_epoch=log)
    b = train_base(tiny.labeled, tiny.dev, TINY_ASR, FAST)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == len(a.schedule_history)
    epoch, split, metric, value = lines[0].split("\t")
    assert (epoch, split, metric) == ("1", "dev", "accuracy") and 0 <= float(value) <= 1
    with pytest.raises(ValueError):
        train_base([], tiny.dev, TINY_ASR, FAST)


def _capture():
    seen = []
    return seen, lambda step, pseudo, sup, con: seen.append((step, pseudo))


def test_static_transcripts_never_change(tiny):
    base = ASRModel(TINY_ASR, seed=0)
    seen, hook = _capture()
    train_consistency(
        Scenario("static", "weak_perturbed", "weak_specaugment", tau=0.3), tiny.labeled, tiny.unlabeled, tiny.dev,
        base, CTX, config=CONS, on_step=hook,
    )
    assert len(seen) == 4
    # labeled and unlabeled order differ per epoch, so compare by content across epochs
    first = sorted(map(tuple, seen[0][1].transcripts + seen[1][1].transcripts))
    second = sorted(map(tuple, seen[2][1].transcripts + seen[3][1].transcripts))
    assert first == second


def test_frozen_dynamic_student_matches_static_teacher(tiny):
    base = ASRModel(TINY_ASR, seed=0)
    frozen = ConsistencyTrainConfig(lr=0.0, max_epochs=1, batch_size=8, beam=2)
    runs = []
    for mode in ("static", "dynamic"):
        seen, hook = _capture()
        student = train_consistency(
            Scenario(mode, "original", "weak_specaugment"), tiny.labeled, tiny.unlabeled, tiny.dev, base, CTX,
            config=frozen, on_step=hook,
        )
        runs.append([p.transcripts for _, p in seen])
        for a, b in zip(student.parameters(), base.parameters()):
            assert torch.equal(a, b)
    assert runs[0] == runs[1]


def test_consistency_training_leaves_base_untouched(tiny):
    base = ASRModel(TINY_ASR, seed=0)
    before = [p.clone() for p in base.parameters()]
    student = train_consistency(
        Scenario("dynamic", "weak_perturbed", "weak_specaugment", tau=0.0), tiny.labeled, tiny.unlabeled, tiny.dev,
        base, CTX, config=CONS,
    )
    assert all(torch.equal(a, b) for a, b in zip(before, base.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(student.parameters(), base.parameters()))
    assert student.role == "student"


def test_tau_one_reduces_to_supervised_updates(tiny):
    base = ASRModel(TINY_ASR, seed=0)
    cons = []
    train_consistency(
        Scenario("dynamic", "weak_perturbed", "weak_specaugment", tau=1.0), tiny.labeled, tiny.unlabeled, tiny.dev,
        base, CTX, config=ConsistencyTrainConfig(max_epochs=1, batch_size=8, beam=2),
        on_step=lambda step, pseudo, sup, con: cons.append(con),
    )
    assert cons == [0.0, 0.0]


def test_speech_chain_without_cache_rejected(tiny):
    base = ASRModel(TINY_ASR, seed=0)
    with pytest.raises(ValueError):
        train_consistency(Scenario(), tiny.labeled, tiny.unlabeled, tiny.dev, base, AugmentContext(), config=CONS)
    with pytest.raises(ValueError):
        train_consistency(
            Scenario(), tiny.labeled, tiny.unlabeled, tiny.dev, base, AugmentContext(cache=ReconstructionCache()),
            config=CONS,
        )
    with pytest.raises(ValueError):
        ConsistencyTrainConfig(dynamic_refresh="never")


def test_train_base_min_epochs_delays_early_stopping(tiny):
    full = train_base(tiny.labeled, tiny.dev, TINY_ASR, ASRTrainConfig(max_epochs=5, min_epochs=5, patience=1, batch_size=8))
    assert len(full.schedule_history) == 5
    accs = [acc for _, acc, _ in full.schedule_history]
    first_bad = next((i + 1 for i in range(1, 5) if accs[i] <= max(accs[:i])), 5)
    early = train_base(tiny.labeled, tiny.dev, TINY_ASR, ASRTrainConfig(max_epochs=5, min_epochs=0, patience=1, batch_size=8))
    assert len(early.schedule_history) == first_bad
