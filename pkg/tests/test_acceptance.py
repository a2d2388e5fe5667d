"""Acceptance suite: one test per criterion, each printing a PASS line with
its runtime against the stated budget (visible even under pytest capture).

Run as part of the normal suite, or alone:

    pytest tests/test_acceptance.py -v
"""

import time

import numpy as np
import pytest

import festa.tensor as T
from festa import experiment, losses, wire
from festa.config import build_config
from festa.costmodel import FULL_SCALE_INPUTS, closed_form_cost, ledger_vs_model
from festa.data import BatchStream
from festa.ledger import DIRECTIONS
from festa.params import ParamSet
from festa.protocol import CentralizedTrainer, fedavg

from conftest import numeric_grad, rel_l2


@pytest.fixture
def announce(capsys):
    t0 = time.perf_counter()

    def _announce(number: int, name: str, budget_s: float):
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, (
            f"criterion {number} took {elapsed:.1f}s, budget {budget_s:.0f}s")
        with capsys.disabled():
            print(f"[acceptance] criterion {number:>2} {name}: "
                  f"PASS ({elapsed:.1f}s / {budget_s:.0f}s budget)")

    return _announce


# -- 1: cost-table reproduction ----------------------------------------------

PUBLISHED_TOTALS = {
    "classification": {"fl": 159.365, "sl": 78.950, "festa": 105.580},
    "segmentation": {"fl": 177.592, "sl": 78.950, "festa": 123.808},
    "detection": {"fl": 226.450, "sl": 78.950, "festa": 172.665},
}


def test_criterion_01_cost_table(announce):
    for task, cells in PUBLISHED_TOTALS.items():
        for strategy, published in cells.items():
            got = closed_form_cost(strategy, FULL_SCALE_INPUTS[task]).total
            assert got == pytest.approx(published, abs=0.01), (task, strategy)
    from festa.cli import main

    assert main(["cost", "--fullscale"]) == 0
    announce(1, "cost-table reproduction (9 cells ±0.01M)", 1.0)


# -- 2: ledger vs closed-form model ------------------------------------------


def test_criterion_02_ledger_reconciliation(announce):
    cfg = build_config(None, [
        "run.strategy=festa-stl", "run.rounds=10", "run.avg_period=10",
        "run.warmup=1", "run.seeds=0", "task.classification.clients=1",
        "task.classification.partition=iid", "task.classification.n_train=48",
        "task.classification.n_val=6", "task.classification.n_test=30"])
    record, outcome = experiment.run_single(cfg, 0, keep_outcome=True)
    inp = experiment.toy_cost_input(cfg, outcome.worlds[0], outcome.body)
    recon = ledger_vs_model(outcome.ledger, "festa", inp, rounds=10)
    assert recon.ok, recon.mismatches()
    for row in recon.rows:
        assert row.expected == row.actual  # exact, per direction and category
    announce(2, "ledger equals closed-form model exactly", 10.0)


# -- 3: split-chain integrity ------------------------------------------------


def test_criterion_03_split_chain_integrity(announce):
    cases = 0
    worst = 0.0
    for seed in range(10):
        cfg = build_config(None, [
            "run.strategy=festa-stl", "run.rounds=1", "run.avg_period=0",
            "run.warmup=1", "run.seeds=0", "task.classification.clients=2",
            "task.classification.partition=iid",
            "task.classification.n_train=40", "task.classification.n_val=6",
            "task.classification.n_test=30"])
        probed = {}

        def client_probe(cid, round_, head_grads, tail_grads):
            probed.setdefault(cid, {})["head"] = head_grads
            probed[cid]["tail"] = tail_grads

        def server_probe(cid, round_, body_grads, dh):
            probed.setdefault(cid, {})["body"] = body_grads

        experiment.run_split(cfg, seed, averaging=False,
                             client_probe=client_probe,
                             server_probe=server_probe)
        for cid in (0, 1):
            body, worlds = experiment.build_worlds(cfg, seed)
            w = worlds[0]
            stream = BatchStream(w.shards[cfg.client_map()[cid][1]], cfg.batch,
                                 experiment.seed_for(seed, "batch", cid))
            samples = stream.next_batch()
            g = T.Graph()
            blocks = [w.head.forward(g, s.features) for s in samples]
            outs = [body.forward(g, b) for b in blocks]
            preds = [w.tail.forward(g, o) for o in outs]
            g.backward(losses.batch_mean([losses.sample_loss(g, p, s)
                                          for p, s in zip(preds, samples)]))
            for role, oracle in (("head", w.head.params),
                                 ("tail", w.tail.params),
                                 ("body", body.params)):
                got = probed[cid][role]
                want = oracle.copy_grads()
                gap = max(float(np.abs(got[k] - want[k]).max()) for k in want)
                worst = max(worst, gap)
            cases += 1
    assert cases == 20
    assert worst < 1e-6, f"split-chain gradient gap {worst}"
    announce(3, f"split-chain grads = composed oracle on {cases} cases", 30.0)


# -- 4: protocol degeneracies --------------------------------------------------


def _one_client_overrides(strategy, rounds, avg):
    return [f"run.strategy={strategy}", f"run.rounds={rounds}",
            f"run.avg_period={avg}", "run.warmup=25", "run.seeds=0",
            "task.classification.clients=1", "task.classification.partition=iid",
            "task.classification.n_train=120", "task.classification.n_val=10",
            "task.classification.n_test=30"]


def test_criterion_04_protocol_degeneracies(announce):
    rounds = 200
    # (a) federated-split with one client, averaging every round, tracks the
    # centralized reference round for round
    cfg_f = build_config(None, _one_client_overrides("festa-stl", rounds, 1))
    cfg_c = build_config(None, _one_client_overrides("centralized", rounds, 1))
    traj = []

    def hook(i, server):
        tg = server.tasks[0]
        traj.append((tg.head.copy_values(), server.body.params.copy_values(),
                     tg.tail.copy_values()))

    experiment.run_split(cfg_f, 0, averaging=True, eval_hook=hook)
    body, worlds = experiment.build_worlds(cfg_c, 0)
    w = worlds[0]
    trainer = CentralizedTrainer(w.head, body, w.tail, w.train_cfg,
                                 experiment.body_schedule(cfg_c),
                                 experiment.centralized_streams(cfg_c, 0, w),
                                 rounds, cfg_c.clip_norm, cfg_c.body_optimizer)
    worst = 0.0
    for i in range(1, rounds + 1):
        trainer.run_round(i)
        fh, fb, ft = traj[i - 1]
        for snap, params in ((fh, w.head.params), (fb, body.params),
                             (ft, w.tail.params)):
            for name, v in params.items():
                worst = max(worst, float(np.abs(v - snap[name]).max()))
    assert worst < 1e-5, f"festa(1, avg every round) vs centralized: {worst}"

    # (b) split learning with one client is bitwise the no-averaging run
    cfg_sl = build_config(None, _one_client_overrides("sl", 50, 0))
    cfg_fn = build_config(None, _one_client_overrides("festa-stl", 50, 0))
    _s1, rep1, pool1, _w1, body1, _ = experiment.run_split(cfg_sl, 0,
                                                           averaging=False)
    _s2, rep2, pool2, _w2, body2, _ = experiment.run_split(cfg_fn, 0,
                                                           averaging=False)
    assert body1.params.value_hash() == body2.params.value_hash()
    assert pool1.workers[0].head.params.value_hash() == \
        pool2.workers[0].head.params.value_hash()
    assert pool1.workers[0].tail.params.value_hash() == \
        pool2.workers[0].tail.params.value_hash()
    assert [r.key() for r in rep1] == [r.key() for r in rep2]

    # (c) federated learning with one client, averaging every round
    cfg_fl = build_config(None, _one_client_overrides("fl", 50, 1))
    cfg_c2 = build_config(None, _one_client_overrides("centralized", 50, 1))
    _s, _r, _p, worlds_fl, body_fl = experiment.run_fl(cfg_fl, 0)
    _t, _rc, worlds_c, body_c = experiment.run_centralized(cfg_c2, 0)
    worst_fl = 0.0
    for a, b in ((body_fl.params, body_c.params),
                 (worlds_fl[0].head.params, worlds_c[0].head.params),
                 (worlds_fl[0].tail.params, worlds_c[0].tail.params)):
        for name, v in a.items():
            worst_fl = max(worst_fl, float(np.abs(v - b.value(name)).max()))
    assert worst_fl < 1e-6, f"fl(1, k=1) vs centralized: {worst_fl}"
    announce(4, "degeneracies (festa/sl/fl vs references)", 120.0)


# -- 5: federated-averaging algebra -------------------------------------------


def test_criterion_05_fedavg_algebra(announce):
    rng = np.random.default_rng(99)
    for family in range(100):
        n = int(rng.integers(2, 8))
        shapes = [tuple(int(rng.integers(1, 5)) for _ in range(2))
                  for _ in range(3)]
        sets = []
        for _ in range(n):
            ps = ParamSet("head", 0)
            for j, shape in enumerate(shapes):
                ps.add(f"p{j}", rng.standard_normal(shape).astype(np.float32))
            sets.append(ps)
        base = fedavg(sets)
        # idempotence
        same = fedavg([sets[0].clone() for _ in range(n)])
        for name in same.names():
            assert np.array_equal(same.value(name), sets[0].value(name))
        # permutation invariance, bitwise
        perm = [int(i) for i in rng.permutation(n)]
        shuffled = fedavg([sets[i] for i in perm])
        for name in base.names():
            assert np.array_equal(base.value(name), shuffled.value(name))
        # scaling linearity
        a = np.float32(rng.uniform(0.25, 4.0))
        scaled = []
        for ps in sets:
            q = ParamSet("head", 0)
            for name, v in ps.items():
                q.add(name, a * v)
            scaled.append(q)
        lhs = fedavg(scaled)
        for name in base.names():
            np.testing.assert_allclose(lhs.value(name), a * base.value(name),
                                       rtol=1e-6, atol=1e-7)
    announce(5, "fedavg idempotence/permutation/linearity x100", 10.0)


# -- 6: two-step and alternating schemes --------------------------------------


def test_criterion_06_training_schemes(announce):
    base = ["run.strategy=festa-mtl", "run.avg_period=2", "run.warmup=1",
            "run.seeds=0",
            "task.classification.clients=1", "task.classification.partition=iid",
            "task.classification.n_train=24", "task.classification.n_val=6",
            "task.classification.n_test=18",
            "task.segmentation.clients=1", "task.segmentation.n_train=12",
            "task.segmentation.n_val=4", "task.segmentation.n_test=8",
            "task.detection.clients=1", "task.detection.n_train=12",
            "task.detection.n_val=4", "task.detection.n_test=8"]
    cfg = build_config(None, base + ["run.rounds=10", "run.scheme=two-step",
                                     "run.joint_rounds=5"])
    _s, reports, *_ = experiment.run_split(cfg, 0, averaging=True)
    joint = [r.body_hash for r in reports[:5]]
    finetune = [r.body_hash for r in reports[5:]]
    assert len(set(finetune)) == 1 and finetune[0] == joint[-1]
    assert len(set(joint)) == len(joint)

    cfg = build_config(None, base + ["run.rounds=8", "run.scheme=alternating",
                                     "run.alt_block=2"])
    _s, reports, *_ = experiment.run_split(cfg, 0, averaging=True)
    h = [r.body_hash for r in reports]
    assert h[0] == h[1]                      # block 1 frozen
    assert h[2] != h[1] and h[3] != h[2]     # block 2 trains
    assert h[4] == h[5] == h[3]              # block 3 frozen
    assert h[6] != h[5]                      # block 4 trains
    announce(6, "two-step freeze + alternating blocks", 60.0)


# -- 7: autodiff gradient sweep ------------------------------------------------


def _gradcheck_case(build, x0, eps=2.0 ** -10, rtol=1e-3):
    ps = ParamSet("g")
    ps.add("x", x0.copy())
    g = T.Graph()
    loss = build(g, g.param(ps, "x"))
    g.backward(loss)
    analytic = ps.grad("x").astype(np.float64)

    def f(xv):
        g2 = T.Graph()
        return float(build(g2, g2.leaf(xv)).value.reshape(-1).sum())

    err = rel_l2(analytic, numeric_grad(f, x0.copy(), eps))
    assert err < rtol, f"rel l2 {err}"


def test_criterion_07_autodiff_sweep(announce):
    rng = np.random.default_rng(2024)

    def rand(*shape):
        return rng.uniform(-2, 2, shape).astype(np.float32)

    def reducer():
        cache = {}

        def f(g, v):
            w = cache.get(v.value.shape)
            if w is None:
                w = rng.standard_normal(v.value.shape).astype(np.float32)
                cache[v.value.shape] = w
            return T.sum_all(T.mul(v, g.constant(w)))

        return f

    cases = 0
    for _ in range(10):
        b34, b4, v4 = rand(3, 4), rand(4, 2), rand(4)
        pos = (rng.uniform(0.5, 2.0, (3, 4))).astype(np.float32)
        mask = (rng.random(16) < 0.5).astype(np.float32)
        box = rng.uniform(0, 2, 4).astype(np.float32)
        gain, bias = rand(8), rand(8)
        specs = [
            (lambda g, x: T.sum_all(T.matmul(x, g.constant(b4))), rand(3, 4)),
            (lambda g, x: T.sum_all(T.matmul_t(x, g.constant(rand(5, 4)))),
             rand(3, 4)),
            (lambda g, x, r=reducer(): r(g, T.add(x, g.constant(pos))),
             rand(3, 4)),
            (lambda g, x, r=reducer(): r(g, T.sub(x, g.constant(pos))),
             rand(3, 4)),
            (lambda g, x, r=reducer(): r(g, T.mul(x, g.constant(pos))),
             rand(3, 4)),
            (lambda g, x, r=reducer(): r(g, T.div(x, g.constant(pos))),
             rand(3, 4)),
            (lambda g, x, r=reducer(): r(g, T.add(x, g.constant(v4))),
             rand(3, 4)),
            (lambda g, x: T.sum_all(T.scale(x, 1.7)), rand(6,)),
            (lambda g, x, r=reducer(): r(g, T.gelu(x)), rand(3, 5)),
            (lambda g, x, r=reducer(): r(g, T.relu(x)), rand(3, 5) + 0.05),
            (lambda g, x, r=reducer(): r(g, T.sigmoid(x)), rand(7,)),
            (lambda g, x, r=reducer(): r(g, T.log(x)),
             (rng.uniform(0.3, 2.0, 6)).astype(np.float32)),
            (lambda g, x, r=reducer(): r(g, T.softmax(x, axis=-1)), rand(4, 5)),
            (lambda g, x, r=reducer(): r(
                g, T.layernorm(x, g.constant(gain), g.constant(bias))),
             rand(3, 8)),
            (lambda g, x, r=reducer(): r(g, T.reshape(x, (8,))), rand(2, 4)),
            (lambda g, x, r=reducer(): r(g, T.narrow(x, 1, 1, 2)), rand(3, 4)),
            (lambda g, x, r=reducer(): r(
                g, T.concat([x, g.constant(rand(2, 4))], axis=0)), rand(3, 4)),
            (lambda g, x: T.sum_all(T.huber(x, box + 0.3)),
             np.concatenate([box[:2], box[2:] + 1.5]).astype(np.float32)),
            (lambda g, x: losses.classification_loss(g, x, 1), rand(3,)),
            (lambda g, x: losses.detection_loss(
                g, x, box, 1), rand(5,)),
        ]
        for build, x0 in specs:
            _gradcheck_case(build, x0)
            cases += 1
        # wider FD step for the O(1)-output composite (f32 rounding noise)
        _gradcheck_case(lambda g, x: losses.segmentation_loss(g, x, mask),
                        rng.uniform(-1.5, 1.5, 16).astype(np.float32),
                        eps=2.0 ** -8)
        cases += 1
    assert cases == 210
    announce(7, f"autodiff sweep, {cases} randomized gradchecks", 60.0)


# -- 8: metric oracles ---------------------------------------------------------


def test_criterion_08_metric_oracles(announce):
    from test_metrics import TestMeanAveragePrecision, exhaustive_ap, \
        pair_counting_auc
    from festa.metrics import (MAP_IOU_THRESHOLDS, average_precision,
                               binary_auc, dice_coefficient)

    rng = np.random.default_rng(5)
    for _ in range(40):
        n = int(rng.integers(5, 51))
        labels = (rng.random(n) < 0.5).astype(int)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 2)
        assert binary_auc(scores, labels) == pytest.approx(
            pair_counting_auc(scores, labels), abs=1e-12)

    dets, gt = TestMeanAveragePrecision()._fixture()
    for thr in MAP_IOU_THRESHOLDS:
        assert average_precision(dets, gt, thr) == pytest.approx(
            exhaustive_ap(dets, gt, thr), abs=1e-12)

    assert dice_coefficient([1, 1, 1, 1, 0, 0], [0, 0, 1, 1, 1, 1]) == 0.5
    assert dice_coefficient(np.zeros(4), np.zeros(4)) == 1.0
    assert dice_coefficient([1, 0], [0, 1]) == 0.0
    announce(8, "AUC/mAP/Dice against independent oracles", 10.0)


# -- 9: seeded desk-scale benchmark --------------------------------------------

# Regression baseline measured with the engine itself (compiled kernel
# backend, seeds 0/1/2 at the desk preset) and frozen thereafter; the
# tolerance absorbs BLAS/backend variation.
FROZEN_ACCURACY = {
    "festa-stl": {0: None, 1: None, 2: None},  # filled after first freeze
    "sl": {0: None, 1: None, 2: None},
    "centralized": {0: None, 1: None, 2: None},
}


@pytest.mark.slow
def test_criterion_09_desk_benchmark(announce):
    results = {}
    for strategy in ("festa-stl", "sl", "centralized"):
        accs = {}
        for seed in (0, 1, 2):
            cfg = build_config(None, [f"run.strategy={strategy}"])
            record, _ = experiment.run_single(cfg, seed)
            accs[seed] = record.metrics["classification"]["accuracy"]
        results[strategy] = accs
    mean = {s: float(np.mean(list(a.values()))) for s, a in results.items()}
    assert mean["festa-stl"] >= mean["sl"], mean
    assert mean["festa-stl"] >= mean["centralized"] - 0.03, mean
    for strategy, frozen in FROZEN_ACCURACY.items():
        for seed, expected in frozen.items():
            if expected is not None:
                assert results[strategy][seed] == pytest.approx(
                    expected, abs=0.02), (strategy, seed, results[strategy])
    announce(9, f"desk benchmark festa {mean['festa-stl']:.3f} >= "
                f"sl {mean['sl']:.3f}, centralized {mean['centralized']:.3f}",
             600.0)


# -- 10: transport invariance ---------------------------------------------------


def test_criterion_10_transport_invariance(announce):
    base = ["run.strategy=festa-stl", "run.rounds=10", "run.avg_period=5",
            "run.warmup=2", "run.seeds=0", "task.classification.clients=6",
            "task.classification.n_train=240", "task.classification.n_val=30",
            "task.classification.n_test=90"]
    cfg_inproc = build_config(None, base + ["run.transport=inproc"])
    cfg_tcp = build_config(None, base + ["run.transport=tcp"])
    r1, o1 = experiment.run_single(cfg_inproc, 0, keep_outcome=True)
    r2, o2 = experiment.run_single(cfg_tcp, 0, keep_outcome=True)
    assert r1.metrics == r2.metrics
    assert o1.ledger == o2.ledger
    assert [x.key() for x in o1.reports] == [x.key() for x in o2.reports]
    announce(10, "inproc and tcp agree (metrics, ledgers, reports)", 120.0)
