import json

import numpy as np
import pytest

from eusa.attack import (
    AttackConfig,
    Perturbation,
    PerturbationError,
    attack_inputs,
    candidate_rng,
    gradient_saliency,
    greedy_sample,
    loss_and_grad,
    optimize_candidate,
    pgd_step,
    random_sample,
    run_eusa,
    sample_count,
)
from eusa.corpus import VideoSequence
from eusa.losses import TripleLossConfig


# ---------------------------------------------------------------- PGD


def test_pgd_step_examples():
    shape = (3, 64, 64)
    np.testing.assert_array_equal(pgd_step(np.zeros(shape), np.ones(shape), 0.9, 16), np.full(shape, 0.9))
    np.testing.assert_array_equal(pgd_step(np.full(shape, 15.5), np.ones(shape), 0.9, 16), np.full(shape, 16.0))
    d = np.random.default_rng(0).uniform(-16, 16, size=shape)
    np.testing.assert_array_equal(pgd_step(d, np.zeros(shape), 0.9, 16), d)
    with pytest.raises(ValueError):
        pgd_step(np.zeros(shape), np.zeros((3, 4, 4)), 0.9, 16)


def test_pgd_linf_invariant_over_many_steps(rng):
    d = np.zeros((3, 8, 8))
    for _ in range(40):
        d = pgd_step(d, rng.normal(size=d.shape), 0.9, 16.0)
        assert np.abs(d).max() <= 16.0


# ---------------------------------------------------------------- config + file format


@pytest.mark.parametrize(
    "kwargs", [{"step": 0.0}, {"step": 17.0}, {"rate": 0.0}, {"rate": 1.5}, {"k": 0},
               {"strategy": "best"}, {"epochs_per_candidate": 0}, {"workers": 0}],
)
def test_attack_config_validation(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_attack_config_defaults():
    c = AttackConfig()
    assert (c.epsilon, c.step, c.k, c.rate, c.epochs_per_candidate) == (16.0, 0.9, 50, 0.1, 1)
    assert "workers" not in c.to_dict()


def test_perturbation_round_trip(tmp_path, rng):
    p = Perturbation(rng.uniform(-16, 16, size=(3, 64, 64)), 16.0)
    payload = p.save(tmp_path / "d.eusp")
    assert payload[:4] == b"EUSP"
    back = Perturbation.load(tmp_path / "d.eusp")
    np.testing.assert_array_equal(back.values, p.values)
    assert back.epsilon == 16.0
    assert back.to_bytes() == payload


def test_perturbation_rejects_bad_input():
    good = Perturbation.zeros().to_bytes()
    with pytest.raises(PerturbationError):
        Perturbation.from_bytes(b"NOPE" + good[4:])
    with pytest.raises(PerturbationError):
        Perturbation.from_bytes(good[:-8])
    with pytest.raises(PerturbationError):
        Perturbation(np.zeros((3, 32, 32)))


# ---------------------------------------------------------------- sampling


def test_sample_count():
    assert sample_count(10, 0.1) == 1
    assert sample_count(10, 0.3) == 3
    assert sample_count(4, 0.5) == 2
    assert sample_count(7, 1.0) == 7
    assert sample_count(10, 0.01) == 1
    with pytest.raises(ValueError):
        sample_count(10, 0.0)


def _named(n):
    return [VideoSequence(id=i, frames=np.zeros((2, 1, 1, 3), np.uint8), gt_boxes=np.zeros((2, 4))) for i in range(n)]


def test_greedy_sample_hand_example():
    videos = _named(4)
    chosen, _ = greedy_sample(None, videos, 0.5, saliencies=[0.5, 2.0, 1.0, 0.1])
    assert [v.id for v in chosen] == [1, 2]
    chosen, _ = greedy_sample(None, videos, 1.0, saliencies=[0.5, 2.0, 1.0, 0.1])
    assert [v.id for v in chosen] == [1, 2, 0, 3]


def test_greedy_sample_ties_by_index():
    chosen, _ = greedy_sample(None, _named(6), 0.5, saliencies=[1.0] * 6)
    assert [v.id for v in chosen] == [0, 1, 2]


def test_greedy_sample_errors():
    with pytest.raises(ValueError):
        greedy_sample(None, [], 0.5, saliencies=[])
    with pytest.raises(ValueError):
        greedy_sample(None, _named(3), 0.0, saliencies=[1, 2, 3])


def test_greedy_monotone_in_rate(tiny_model, small_corpus):
    videos = small_corpus.videos
    _, sal = greedy_sample(tiny_model, videos, 1.0)
    prev = set()
    for r in (0.1, 0.3, 0.5, 1.0):
        ids = {v.id for v in greedy_sample(tiny_model, videos, r, saliencies=sal)[0]}
        assert prev <= ids
        prev = ids


def test_random_sample_deterministic_without_replacement():
    videos = _named(10)
    a = [v.id for v in random_sample(videos, 0.5, seed=3)]
    assert a == [v.id for v in random_sample(videos, 0.5, seed=3)]
    assert len(set(a)) == 5
    assert a != [v.id for v in random_sample(videos, 0.5, seed=4)]


def test_saliency_properties(tiny_model, tiny_video):
    s = gradient_saliency(tiny_model, tiny_video)
    assert s >= 0
    assert gradient_saliency(tiny_model, tiny_video) == s
    single = VideoSequence(id=9, frames=tiny_video.frames[:1], gt_boxes=tiny_video.gt_boxes[:1])
    with pytest.raises(ValueError):
        gradient_saliency(tiny_model, single)


def test_saliency_of_constant_video(tiny_model, tiny_video):
    flat = VideoSequence(id=9, frames=np.full_like(tiny_video.frames, 128), gt_boxes=tiny_video.gt_boxes)
    s = gradient_saliency(tiny_model, flat)
    # the same quantity evaluated directly on the constant crops
    z_feat, _ = attack_inputs(tiny_model, flat, 1)
    x1 = np.full((3, 64, 64), 128.0)
    _, g = loss_and_grad(tiny_model, z_feat, x1, np.zeros_like(x1), TripleLossConfig())
    assert abs(s - float(np.mean(np.abs(g)))) < 1e-9


# ---------------------------------------------------------------- candidates


def test_single_step_candidate_is_one_sign_step(tiny_model, tiny_video):
    cfg = AttackConfig(k=1, rate=1.0)
    res = optimize_candidate(tiny_model, [tiny_video], cfg, candidate_rng(0, 0))
    assert set(np.unique(res.delta)) <= {-0.9, 0.0, 0.9}
    assert len(res.steps) == 1


def test_candidate_loss_bookkeeping(tiny_model, small_corpus):
    cfg = AttackConfig(k=1, rate=1.0, epochs_per_candidate=2)
    res = optimize_candidate(tiny_model, small_corpus.videos, cfg, candidate_rng(5, 0))
    assert len(res.steps) == 2 * len(small_corpus.videos)
    assert res.loss == sum(s[2] for s in res.steps)
    assert np.abs(res.delta).max() <= cfg.epsilon
    # replaying the recorded frames reproduces each recorded loss
    by_id = {v.id: v for v in small_corpus.videos}
    delta = np.zeros((3, 64, 64))
    for vid, frame, loss in res.steps:
        z_feat, x = attack_inputs(tiny_model, by_id[vid], frame)
        replay, grad = loss_and_grad(tiny_model, z_feat, x, delta, cfg.loss)
        assert replay == loss
        delta = pgd_step(delta, grad, cfg.step, cfg.epsilon)
    np.testing.assert_array_equal(delta, res.delta)


def test_empty_ordering_rejected(tiny_model):
    with pytest.raises(ValueError):
        optimize_candidate(tiny_model, [], AttackConfig(), candidate_rng(0, 0))


# ---------------------------------------------------------------- full attack


@pytest.fixture(scope="module")
def attack_run(tiny_model, small_corpus):
    cfg = AttackConfig(k=3, rate=1.0, epochs_per_candidate=2, seed=7)
    return cfg, run_eusa(tiny_model, small_corpus.videos, cfg)


def test_run_eusa_selects_argmax(attack_run):
    cfg, (pert, report) = attack_run
    losses = report.candidate_losses
    assert len(losses) == cfg.k
    assert report.selected_index == int(np.argmax(losses))
    assert all(losses[report.selected_index] >= l for l in losses)
    assert pert.linf <= cfg.epsilon and report.linf == pert.linf


def test_run_eusa_returned_delta_is_selected_candidate(attack_run, tiny_model, small_corpus):
    cfg, (pert, report) = attack_run
    from eusa.attack import _shuffle

    by_id = {v.id: v for v in small_corpus.videos}
    selected = [by_id[i] for i in report.sampled_video_ids]
    ordering, rng = _shuffle(selected, report.selected_index, cfg.seed)
    res = optimize_candidate(tiny_model, ordering, cfg, rng, index=report.selected_index)
    np.testing.assert_array_equal(res.delta, pert.values)
    assert res.loss == report.candidate_losses[report.selected_index]


def test_run_eusa_k1(tiny_model, small_corpus):
    cfg = AttackConfig(k=1, rate=0.5, seed=1)
    pert, report = run_eusa(tiny_model, small_corpus.videos, cfg)
    assert report.selected_index == 0 and len(report.candidate_losses) == 1
    assert len(report.sampled_video_ids) == 2


def test_run_eusa_deterministic_across_workers(attack_run, tiny_model, small_corpus, tmp_path):
    cfg, (pert, report) = attack_run
    par = AttackConfig(k=3, rate=1.0, epochs_per_candidate=2, seed=7, workers=2)
    pert2, report2 = run_eusa(tiny_model, small_corpus.videos, par)
    assert pert2.to_bytes() == pert.to_bytes()
    assert report2.to_json() == report.to_json()
    doc = json.loads(report.to_json())
    assert doc["selected_loss"] == max(doc["candidate_losses"])


def test_random_strategy_reports_no_saliency(tiny_model, small_corpus):
    cfg = AttackConfig(k=1, rate=0.5, strategy="random", seed=2)
    _, report = run_eusa(tiny_model, small_corpus.videos, cfg)
    assert report.saliencies == {}
    assert len(report.sampled_video_ids) == 2
