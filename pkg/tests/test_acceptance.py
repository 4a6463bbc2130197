"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with its measured value, then
asserts. Run with ``pytest tests/test_acceptance.py -v -s`` (the lines are
printed with capture disabled, so ``-s`` is optional).
"""

import math
import time

import numpy as np
import pytest

from avit import tensor as T
from avit.data import default_domains, generate_domain
from avit.gradcheck import run_gradcheck
from avit.losses import balanced_ce, module_cosine
from avit.metrics import auc, auc_numerator, eer_hter, roc, tpr_at_fpr
from avit.model import AdaptiveViT, FwtLayer, ModelConfig, ablate_adapters, count_params
from avit.pipeline import StageConfig, leave_one_out, report_csv
from avit.rng import stream
from avit.tensor import Tensor

from test_metrics import oracle_auc, oracle_eer, oracle_roc, oracle_tpr

SEEDS = (0, 1, 2)
FINETUNE_ITERS = 800
CHECKPOINT_EVERY = 50
ENSEMBLE, FULL = "vit_ensemble_adapter_fwt", "vit_full"


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}: {detail}")
    assert ok, detail


def stage(seed):
    return StageConfig(finetune_iters=FINETUNE_ITERS, checkpoint_every=CHECKPOINT_EVERY, seed=seed)


@pytest.fixture(scope="module")
def domains():
    return [generate_domain(s, 200, seed=7) for s in default_domains()]


@pytest.fixture(scope="module")
def protocol(domains):
    """Leave-one-out runs keyed by (variant, shots, seed), plus total wall time."""
    with T.precision("f32"):
        start = time.perf_counter()
        runs = {}
        for seed in SEEDS:
            for variant, shots in [(ENSEMBLE, 5), (ENSEMBLE, 0), (FULL, 5)]:
                runs[variant, shots, seed] = leave_one_out(domains, shots, ModelConfig.desk(), stage(seed), variant)
        return runs, time.perf_counter() - start


def test_criterion_01_parameter_accounting(capsys):
    start = time.perf_counter()
    cfg = ModelConfig.paper()
    delta = count_params(cfg, ("adapters",))
    backbone = count_params(cfg, ("backbone", "head"))
    elapsed = time.perf_counter() - start
    ok = delta == 2 * 12 * 2 * (2 * 768 * 64 + 64 + 768) == 4_758_528 \
        and abs(backbone - 86.39e6) <= 0.01 * 86.39e6 and elapsed < 1
    verdict(capsys, 1, "parameter accounting", ok,
            f"adapter delta {delta}, backbone {backbone} ({backbone / 86.39e6 - 1:+.3%} vs 86.39M), {elapsed:.2f}s")


def test_criterion_02_gradient_fidelity(capsys):
    start = time.perf_counter()
    results = run_gradcheck(ModelConfig.desk(), seed=0, tol=1e-4)
    elapsed = time.perf_counter() - start
    groups = {g: r.max_rel_err for g, r in results.items()}
    ok = all(r.checked > 0 and not r.failures for r in results.values()) and elapsed < 120
    verdict(capsys, 2, "gradient fidelity (f64, tol 1e-4)", ok,
            ", ".join(f"{g} {e:.1e}" for g, e in groups.items()) + f", {elapsed:.1f}s")


def test_criterion_03_identity_at_init(capsys):
    start = time.perf_counter()
    x = np.random.default_rng(0).random((4, 3, 32, 32))
    with T.precision("f32"):
        model = AdaptiveViT(ModelConfig.desk(), seed=0)
        fresh = model(x).data.copy()
        ablate_adapters(model, 1, model.cfg.depth)
        exact = fresh.tobytes() == model(x).data.tobytes()
    with T.precision("f64"):
        model = AdaptiveViT(ModelConfig.desk(), seed=0)
        for layer in model.fwt_layers():
            layer.w_alpha.data[:] = -40.0
            layer.w_beta.data[:] = -40.0
        model.set_fwt_active(True)
        gap = float(np.abs(model(x, mode="train", rng=stream(0, "fwt")).data - model(x).data).max())
    elapsed = time.perf_counter() - start
    ok = exact and gap <= 1e-5 and elapsed < 10
    verdict(capsys, 3, "identity at init", ok,
            f"fresh vs ablated bit-exact {exact}, W=-40 max gap {gap:.1e}, {elapsed:.1f}s")


def test_criterion_04_metric_oracles(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = done = 0
    while done < 1000:
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, n).tolist()
        if not 0 < sum(y) < n:
            continue
        s = (rng.integers(0, 7, n) / 6).tolist()
        curve = roc(s, y)
        eer, thr = oracle_eer(s, y)
        r = eer_hter(s, y)
        same = [(t, f, p) for t, f, p in curve] == [(t, float(f), float(p)) for t, f, p in oracle_roc(s, y)]
        same &= auc(curve) == float(oracle_auc(s, y))
        same &= r.eer == float(eer) and r.hter == float(eer) and r.threshold == thr
        same &= all(tpr_at_fpr(curve, q) == float(oracle_tpr(s, y, q)) for q in (0.01, 0.1, 0.5))
        mismatches += not same
        done += 1
    hand = roc([0.9, 0.8, 0.4, 0.7, 0.3, 0.1], [1, 1, 1, 0, 0, 0])
    exact = auc_numerator(hand) * 9 == 8 * 2 * 9
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and exact and elapsed < 30
    verdict(capsys, 4, "metric oracles", ok,
            f"{mismatches} mismatches over {done} instances, hand-case AUC {auc(hand):.6f} (8/9), {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_05_few_shot_gain(capsys, protocol):
    runs, elapsed = protocol
    gains = [five.final.auc - zero.final.auc for seed in SEEDS
             for five, zero in zip(runs[ENSEMBLE, 5, seed], runs[ENSEMBLE, 0, seed])]
    mean = float(np.mean(gains))
    ok = mean >= 0.03 and elapsed < 30 * 60
    verdict(capsys, 5, "0-shot to 5-shot AUC gain", ok,
            f"mean gain {mean:+.4f} over {len(gains)} runs (min {min(gains):+.3f}, max {max(gains):+.3f}), "
            f"protocol {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_06_stability(capsys, protocol):
    runs, _ = protocol
    pairs = [(e.target, seed, e.stability[1], f.stability[1]) for seed in SEEDS
             for e, f in zip(runs[ENSEMBLE, 5, seed], runs[FULL, 5, seed])]
    wins = sum(ens <= full for _, _, ens, full in pairs)
    detail = " ".join(f"{t}/s{s}:{e:.4f}{'<=' if e <= f else '>'}{f:.4f}" for t, s, e, f in pairs)
    verdict(capsys, 6, "last-8-checkpoint AUC std, ensemble <= full", wins >= 8,
            f"{wins}/{len(pairs)} runs [{detail}]")


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="per-target majority is stricter than the 8-of-12 criterion")
def test_stability_majority_per_target(protocol):
    runs, _ = protocol
    for i in range(4):
        wins = sum(runs[ENSEMBLE, 5, s][i].stability[1] <= runs[FULL, 5, s][i].stability[1] for s in SEEDS)
        assert wins >= 2, runs[ENSEMBLE, 5, 0][i].target


def test_criterion_07_ce_closed_form(capsys):
    start = time.perf_counter()
    worst = 0.0
    with T.precision("f64"):
        for b in (2, 4, 8):
            for n in (1, 2, 3):
                labels = np.tile(np.r_[np.ones(b), np.zeros(b)], n + 1).astype(int)
                domains = np.repeat([f"d{i}" for i in range(n + 1)], 2 * b)
                loss, _ = balanced_ce(np.full(len(labels), 0.5), labels, domains)
                worst = max(worst, abs(loss.item() - 2 * math.log(2)))
    elapsed = time.perf_counter() - start
    verdict(capsys, 7, "all-0.5 cross-entropy equals 2 ln 2", worst <= 1e-6 and elapsed < 1,
            f"max deviation {worst:.1e} over B in {{2,4,8}}, N in {{1,2,3}}, {elapsed:.3f}s")


def test_criterion_08_fwt_distribution(capsys):
    start = time.perf_counter()
    errors = {}
    with T.precision("f64"):
        for w in (-1.0, 0.0, 0.3, 0.5, 2.0):
            layer = FwtLayer(1, w, w)
            layer.active = True
            out = layer(Tensor(np.ones((100_000, 1, 1))), rng=stream(0, "fwt-std", str(w))).data.reshape(-1)
            sp = math.log1p(math.exp(w))
            alpha = out - 1 - sp * layer.last_noise[1].reshape(-1)
            errors[w] = abs(alpha.std() / sp - 1)
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 0.02 and elapsed < 10
    verdict(capsys, 8, "FWT alpha std equals softplus(W)", ok,
            ", ".join(f"W={w:g}: {e:.2%}" for w, e in errors.items()) + f", {elapsed:.2f}s")


def test_criterion_09_cosine_cases(capsys):
    start = time.perf_counter()
    with T.precision("f64"):
        h = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)))
        same = module_cosine([h, h]).item()
        a, b = np.zeros((1, 3, 4)), np.zeros((1, 3, 4))
        a[..., :2] = np.random.default_rng(1).normal(size=(1, 3, 2))
        b[..., 2:] = np.random.default_rng(2).normal(size=(1, 3, 2))
        orth = module_cosine([Tensor(a), Tensor(b)]).item()
        p, q = np.zeros((1, 2, 4)), np.zeros((1, 2, 4))
        p[..., 0] = [1.0, 2.0]
        q[..., 3] = [3.0, -1.0]
        k3 = module_cosine([Tensor(p), Tensor(p), Tensor(q)]).item()
    elapsed = time.perf_counter() - start
    ok = abs(same - 1) <= 1e-6 and abs(orth) <= 1e-6 and abs(k3 - 1) <= 1e-6 and elapsed < 1
    verdict(capsys, 9, "cosine loss analytic cases", ok,
            f"identical {same:.7f}, orthogonal {orth:.1e}, K=3 {k3:.7f}, {elapsed:.3f}s")


@pytest.mark.slow
def test_criterion_10_reproducibility(capsys, protocol, domains):
    runs, _ = protocol
    first = report_csv(runs[ENSEMBLE, 5, 0])
    with T.precision("f32"):
        second = report_csv(leave_one_out(domains, 5, ModelConfig.desk(), stage(0), ENSEMBLE))
    same = first.encode() == second.encode()
    verdict(capsys, 10, "protocol report CSV is byte-identical on rerun (f32)", same,
            f"{len(first.encode())} bytes, identical {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
