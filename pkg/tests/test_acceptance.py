"""Acceptance criteria C1..C8.

Each test records a PASS/FAIL line (printed in the terminal summary) before asserting.
The tracker under attack is trained once on an independent 80-video corpus and cached
in the pytest cache, keyed by the training settings and the relevant source files.
"""
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from eusa import attack as atk
from eusa import corpus as corpus_mod
from eusa import diffnum as dn
from eusa.attack import AttackConfig, run_eusa
from eusa.cli import main as cli_main
from eusa.corpus import CorpusConfig, generate_corpus, save_corpus
from eusa.diffnum import Tensor
from eusa.eval import metrics as M
from eusa.eval.report import evaluate
from eusa.losses import TripleLossConfig, triple_loss
from eusa.tracker import TrackerModel, extract_search_region, extract_template, train_toy_tracker
from eusa.tracker import model as model_mod
from eusa.tracker import train as train_mod
from eusa.tracker.tracking import FAILURE, INIT, OTB, SKIPPED, TRACKED, VOT, TrackResult, apply_perturbation
from eusa.tracker.train import TrainConfig, TrainHistory

from test_diffnum import _op_cases, analytic_grads, numeric_grads, rel_err

TRAIN_CORPUS = CorpusConfig(n_videos=80, seed=1000)
ATTACK_EPOCHS = 10  # epochs_per_candidate for every acceptance attack
SEEDS3 = (0, 1, 2)
SEEDS5 = (0, 1, 2, 3, 4)


# ------------------------------------------------------------------ fixtures


def _fingerprint() -> str:
    h = hashlib.sha256()
    h.update(json.dumps([TrainConfig().to_dict(), TRAIN_CORPUS.to_dict()], sort_keys=True).encode())
    for mod in (dn, corpus_mod, model_mod, train_mod):
        h.update(Path(mod.__file__).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def tracker(request):
    cache = request.config.cache.mkdir("eusa-acceptance")
    path = cache / f"tracker-{_fingerprint()}.eusm"
    if path.exists():
        return TrackerModel.load(path)
    t0 = time.perf_counter()
    model = train_toy_tracker(generate_corpus(TRAIN_CORPUS).videos, config=TrainConfig())
    print(f"trained acceptance tracker in {time.perf_counter() - t0:.0f}s")
    model.save(path)
    return model


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(CorpusConfig())


class Lab:
    """Memoised attacks and evaluations shared by the criteria."""

    def __init__(self, model, corpus):
        self.model, self.corpus = model, corpus
        self.attacks, self.evals, self.seconds = {}, {}, {}

    def attack(self, seed, rate=0.5, strategy="greedy", loss="fcd", k=8):
        key = (seed, rate, strategy, loss, k)
        if key not in self.attacks:
            cfg = AttackConfig(k=k, rate=rate, strategy=strategy, seed=seed,
                               epochs_per_candidate=ATTACK_EPOCHS,
                               loss=TripleLossConfig(components=tuple(loss)))
            t0 = time.perf_counter()
            self.attacks[key] = run_eusa(self.model, self.corpus.train, cfg)
            self.seconds[key] = time.perf_counter() - t0
        return self.attacks[key]

    def score(self, key=None, policy=OTB):
        ekey = (key, policy)
        if ekey not in self.evals:
            delta = None if key is None else self.attack(*key)[0]
            self.evals[ekey] = evaluate(self.model, self.corpus.holdout, delta, policy=policy).aggregate
        return self.evals[ekey]


@pytest.fixture(scope="session")
def lab(tracker, corpus):
    return Lab(tracker, corpus)


# ------------------------------------------------------------------ tracker sanity


def test_training_loss_decreases_over_first_three_epochs(corpus):
    history = TrainHistory()
    # the first three epochs of the default schedule: no decay step falls inside them
    cfg = TrainConfig(epochs=3, lr_decay_at=(1.0,))
    train_toy_tracker(corpus.videos, config=cfg, history=history)
    a, b, c = history.epoch_loss
    assert a > b > c, history.epoch_loss


def test_trained_tracker_beats_untrained(lab):
    untrained = evaluate(TrackerModel.init(seed=0), lab.corpus.holdout).aggregate["success_auc"]
    assert lab.score()["success_auc"] > untrained


# ------------------------------------------------------------------ C1


def test_c1_gradient_fidelity(tiny_model, tiny_video, verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, build, factory in _op_cases():
        errs = []
        for trial in range(20):
            arrays = factory(np.random.default_rng(5000 + trial))
            for a, n in zip(analytic_grads(build, arrays), numeric_grads(build, arrays)):
                errs.append(rel_err(a, n))
        worst[name] = max(errs)

    z, _ = extract_template(tiny_video.frames[0], tiny_video.gt_boxes[0])
    zf = tiny_model.encode(Tensor(z))
    loss_errs = []
    for trial in range(20):
        rng = np.random.default_rng(6000 + trial)
        frame = 1 + trial % (len(tiny_video) - 1)
        x, _ = extract_search_region(tiny_video.frames[frame], tiny_video.gt_boxes[frame])
        delta = rng.uniform(-8, 8, size=x.shape)
        cfg = TripleLossConfig(margin=-1.0)
        _, grad = atk.loss_and_grad(tiny_model, zf, x, delta, cfg)
        idx = rng.choice(delta.size, size=6, replace=False)

        def f(d):
            fc = tiny_model.encode(Tensor(x))
            fa = tiny_model.encode(Tensor(np.clip(x + d, 0, 255)))
            cls, reg = tiny_model.forward(zf, fa)
            return triple_loss(fc, fa, cls, reg, cfg).item()

        num = dn.gradcheck_numeric(f, delta, h=1e-4, indices=idx)
        loss_errs.append(rel_err(grad.reshape(-1)[idx], num))
    worst["triple_loss"] = max(loss_errs)
    elapsed = time.perf_counter() - t0

    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 60
    verdict("C1 gradient fidelity", ok,
            f"{len(worst)} checks x 20 trials, worst rel err {max(worst.values()):.1e}, {elapsed:.0f}s")
    assert not bad, bad
    assert elapsed < 60


# ------------------------------------------------------------------ C8


def _vot(entries):
    status = [s for s, _ in entries]
    ious = np.array([v for _, v in entries], dtype=np.float64)
    n = len(entries)
    gt = np.tile([60.0, 60.0, 20.0, 20.0], (n, 1))
    return TrackResult(video_id=0, policy=VOT, boxes=gt.copy(), gt_boxes=gt, ious=ious, status=status)


def test_c8_metric_oracles(verdict):
    checks = {}
    checks["iou"] = abs(M.iou([0.5, 0.5, 1, 1], [1.0, 0.5, 1, 1]) - 1 / 3) <= 1e-9

    n = 11
    gt = np.tile([60.0, 60.0, 20.0, 20.0], (n, 1))
    boxes = gt.copy()
    boxes[:, 0] += 10.0
    constant = TrackResult(video_id=0, policy=OTB, boxes=boxes, gt_boxes=gt, ious=M.iou(boxes, gt),
                           status=[INIT] + [TRACKED] * (n - 1))
    curve = M.precision_curve(constant)
    checks["precision_curve"] = np.array_equal(curve, (np.arange(51) >= 10).astype(float))

    ious = np.concatenate([[1.0], np.random.default_rng(8).uniform(size=40)])
    res = TrackResult(video_id=0, policy=OTB, boxes=gt[:1].repeat(41, 0), gt_boxes=gt[:1].repeat(41, 0),
                      ious=ious, status=[INIT] + [TRACKED] * 40)
    brute = np.mean([np.mean([v > i / 20 for v in ious[1:]]) for i in range(21)])
    checks["success_auc"] = abs(M.success_auc(res) - brute) <= 1e-9

    # fail at frame 12, skip 5, re-init at 18, then 21 frames at 0.6
    b = _vot([(INIT, 1.0)] + [(TRACKED, 0.5)] * 11 + [(FAILURE, 0.0)] + [(SKIPPED, 0.0)] * 5
             + [(INIT, 1.0)] + [(TRACKED, 0.6)] * 21)
    vm = M.vot_metrics(b)
    # runs: [0.5]*11 + [0] (failed) and [0.6]*21
    phi = [np.mean([0.5 if L <= 11 else 5.5 / L] + ([0.6] if L <= 21 else [])) for L in range(10, 31)]
    checks["vot_metrics"] = (
        abs(vm.accuracy - (11 * 0.5 + 11 * 0.6) / 22) <= 1e-9
        and vm.robustness == 25 / 40
        and vm.failures == 1
        and abs(vm.eao - np.mean(phi)) <= 1e-9
    )
    bad = sorted(k for k, v in checks.items() if not v)
    verdict("C8 metric oracles", not bad, f"{len(checks) - len(bad)}/{len(checks)} oracles match")
    assert not bad, bad


# ------------------------------------------------------------------ C7


def test_c7_selection_and_determinism(lab, tmp_path, verdict):
    delta, rep = lab.attack(0)
    losses = np.asarray(rep.candidate_losses)
    argmax_ok = rep.selected_index == int(np.flatnonzero(losses == losses.max())[0])
    # replay the selected candidate alone and compare bytes
    cfg = AttackConfig(k=8, rate=0.5, seed=0, epochs_per_candidate=ATTACK_EPOCHS)
    selected, _ = atk.select_sample(lab.model, lab.corpus.train, cfg)
    ordering, rng = atk._shuffle(selected, rep.selected_index, cfg.seed)
    replay = atk.optimize_candidate(lab.model, ordering, cfg, rng, index=rep.selected_index)
    replay_ok = np.array_equal(replay.delta, delta.values) and replay.loss == losses[rep.selected_index]

    corpus_dir = save_corpus(lab.corpus, tmp_path / "corpus")
    model_path = tmp_path / "model.eusm"
    lab.model.save(model_path)
    trees = {}
    for workers in (1, 2):
        out = tmp_path / f"w{workers}"
        common = ["--corpus", str(corpus_dir), "--model", str(model_path), "--seed", "7"]
        assert cli_main(["attack", *common, "--out", str(out / "attack"), "--k", "4", "--rate", "0.3",
                         "--epochs-per-candidate", "2", "--workers", str(workers)]) == 0
        # same input path for both evals, so the manifests can match byte for byte
        shared = tmp_path / "delta.eusp"
        shared.write_bytes((out / "attack" / "perturbation.eusp").read_bytes())
        assert cli_main(["eval", *common, "--out", str(out / "eval"), "--policy", "vot",
                         "--perturbation", str(shared), "--workers", str(workers)]) == 0
        trees[workers] = {p.relative_to(out).as_posix(): p.read_bytes()
                          for p in sorted(out.rglob("*")) if p.is_file()}
    same = trees[1] == trees[2]
    has_files = {"attack/perturbation.eusp", "attack/attack_report.json", "eval/report.json"} <= set(trees[1])
    ok = argmax_ok and replay_ok and same and has_files
    verdict("C7 selection and determinism", ok,
            f"argmax={argmax_ok} replay={replay_ok} workers1==workers2 over {len(trees[1])} files={same}")
    assert argmax_ok and replay_ok
    assert has_files and same


# ------------------------------------------------------------------ C3


def test_c3_universality(lab, verdict):
    clean = lab.score()["success_auc"]
    t0 = time.perf_counter()
    attacked = lab.score((0,))["success_auc"]
    elapsed = time.perf_counter() - t0
    if (0, 0.5, "greedy", "fcd", 8) in lab.seconds and elapsed < lab.seconds[(0, 0.5, "greedy", "fcd", 8)]:
        elapsed += lab.seconds[(0, 0.5, "greedy", "fcd", 8)]  # attack ran earlier, inside another criterion
    drop = 1.0 - attacked / clean
    ok = clean >= 45.0 and drop >= 0.40 and elapsed < 600
    verdict("C3 universality", ok,
            f"clean AUC {clean:.1f}, attacked {attacked:.1f}, relative drop {100 * drop:.1f}% "
            f"(need >= 40%), attack+eval {elapsed:.0f}s")
    assert clean >= 45.0, f"clean holdout success AUC {clean:.2f} < 45"
    assert elapsed < 600
    assert drop >= 0.40, f"relative drop {drop:.3f} < 0.40"


# ------------------------------------------------------------------ C4


def test_c4_reinit_resistance(lab, verdict):
    clean = lab.score(policy=VOT)
    attacked = [lab.score((s,), VOT) for s in SEEDS3]
    rob = float(np.mean([a["robustness"] for a in attacked]))
    eao = float(np.mean([a["eao"] for a in attacked]))
    ok_rob = rob >= 3 * clean["robustness"]
    ok_eao = eao <= 0.5 * clean["eao"]
    verdict("C4 re-initialization resistance", ok_rob and ok_eao,
            f"robustness {clean['robustness']:.3f} -> {rob:.3f} (need >= 3x), "
            f"EAO {clean['eao']:.3f} -> {eao:.3f} (need <= 0.5x)")
    assert ok_rob, (clean["robustness"], rob)
    assert ok_eao, (clean["eao"], eao)


# ------------------------------------------------------------------ C5


def test_c5_greedy_vs_random(lab, verdict):
    greedy = np.mean([lab.score((s, 0.1, "greedy"))["precision"] for s in SEEDS5])
    random = np.mean([lab.score((s, 0.1, "random"))["precision"] for s in SEEDS5])
    ok = greedy <= random + 1.0
    verdict("C5 greedy-gradient sampling", ok,
            f"attacked precision greedy {greedy:.2f} vs random {random:.2f} at r=0.1 (need greedy <= random + 1)")
    assert ok, (greedy, random)


# ------------------------------------------------------------------ C6


def test_c6_triple_loss_ablation(lab, verdict):
    clean = lab.score()["success_auc"]

    def mean_auc(loss):
        return float(np.mean([lab.score((s, 0.5, "greedy", loss))["success_auc"] for s in SEEDS3]))

    full = mean_auc("fcd")
    singles = {c: mean_auc(c) for c in "fcd"}
    full_ok = all(full <= v + 2.0 for v in singles.values())
    degrade = {c: 1.0 - v / clean for c, v in singles.items()}
    degrade_ok = all(d >= 0.15 for d in degrade.values())
    detail = ", ".join(f"{c}: {singles[c]:.1f} ({100 * degrade[c]:+.1f}% drop)" for c in "fcd")
    verdict("C6 triple-loss ablation", full_ok and degrade_ok,
            f"clean {clean:.1f}, full {full:.1f}, {detail} (need full <= single + 2, each drop >= 15%)")
    assert full_ok, (full, singles)
    assert degrade_ok, degrade


# ------------------------------------------------------------------ C2 (runs last: sees every attack above)


def test_c2_constraint_soundness(lab, verdict):
    if not lab.attacks:
        lab.attack(0)
    worst_linf, lo, hi = 0.0, np.inf, -np.inf
    crops = [extract_search_region(v.frames[t], v.gt_boxes[t])[0]
             for v in lab.corpus.videos for t in (0, len(v) // 2, len(v) - 1)]
    for delta, rep in lab.attacks.values():
        worst_linf = max(worst_linf, delta.linf, rep.linf)
        for x in crops:
            y = apply_perturbation(x, delta.values)
            lo, hi = min(lo, y.min()), max(hi, y.max())
    ok = worst_linf <= 16.0 and lo >= 0.0 and hi <= 255.0
    verdict("C2 constraint soundness", ok,
            f"{len(lab.attacks)} attack runs, max |delta| {worst_linf:.3f}, perturbed pixels in [{lo:.1f}, {hi:.1f}]")
    assert worst_linf <= 16.0
    assert 0.0 <= lo and hi <= 255.0
