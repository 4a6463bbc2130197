import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avit import tensor as T
from avit.errors import UsageError
from avit.losses import balanced_ce, combine, cosine_diversity, cosine_sq_mean, module_cosine, stage_loss
from avit.tensor import Tensor

from conftest import max_rel_err, numeric_grad


def layout(b, n_domains):
    """Labels/domains for ``n_domains`` blocks of ``b`` live then ``b`` spoof."""
    labels = np.tile(np.r_[np.ones(b), np.zeros(b)], n_domains).astype(int)
    domains = np.repeat([f"d{i}" for i in range(n_domains)], 2 * b)
    return labels, domains


def loop_ce(p, labels, domains):
    """Direct double-sum evaluation, used as an oracle."""
    blocks = sorted(set(domains))
    b = int(np.sum((labels == 1) & (domains == blocks[0])))
    total = 0.0
    for d in blocks:
        for pi, yi, di in zip(p, labels, domains):
            if di == d:
                q = min(max(pi, 1e-7), 1 - 1e-7)
                total += math.log(q) if yi == 1 else math.log(1 - q)
    return -total / (b * len(blocks))


class TestBalancedCE:
    @pytest.mark.parametrize("b", [2, 4, 8])
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_half_probabilities(self, b, n, f64):
        labels, domains = layout(b, n + 1)
        loss, _ = balanced_ce(np.full(labels.size, 0.5), labels, domains)
        assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_confident_correct_near_zero(self, f64):
        labels, domains = layout(3, 2)
        p = np.where(labels == 1, 1 - 1e-9, 1e-9)
        assert balanced_ce(p, labels, domains)[0].item() < 1e-6

    def test_hand_case(self, f64):
        # source r=0.9, f=0.2; target r=0.8, f=0.1
        loss, per = balanced_ce(np.array([0.9, 0.2, 0.8, 0.1]), [1, 0, 1, 0], ["s", "s", "t", "t"])
        expect = -(math.log(0.9) + math.log(0.8) + math.log(0.8) + math.log(0.9)) / 2
        assert loss.item() == pytest.approx(expect, abs=1e-12)
        assert loss.item() == pytest.approx(0.3285, abs=1e-4)
        assert per.mean() == pytest.approx(loss.item())

    def test_unbalanced_rejected(self):
        with pytest.raises(UsageError, match="live=2"):
            balanced_ce(np.full(5, 0.5), [1, 1, 0, 1, 0], ["a", "a", "a", "b", "b"])

    def test_gradient(self, f64):
        rng = np.random.default_rng(0)
        labels, domains = layout(2, 3)
        z = Tensor(rng.normal(size=labels.size), requires_grad=True)
        loss = lambda: balanced_ce(T.softmax(T.stack([z * 0.0, z], axis=-1), -1)[:, 1], labels, domains)[0]
        loss().backward()
        assert max_rel_err(z.grad, numeric_grad(lambda: loss().item(), z.data)) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_matches_loop_oracle(self, b, nd, seed):
        labels, domains = layout(b, nd)
        p = np.random.default_rng(seed).random(labels.size)
        with T.precision("f64"):
            loss, per = balanced_ce(p, labels, domains)
        assert loss.item() == pytest.approx(loop_ce(p, labels, domains), rel=1e-12)
        assert per.mean() == pytest.approx(loss.item(), rel=1e-12)


class TestCosine:
    def test_identical_pair(self, f64):
        h = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)))
        assert module_cosine([h, h]).item() == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_pair(self, f64):
        a = np.zeros((1, 3, 4))
        b = np.zeros((1, 3, 4))
        a[..., :2] = np.random.default_rng(1).normal(size=(1, 3, 2))
        b[..., 2:] = np.random.default_rng(2).normal(size=(1, 3, 2))
        assert module_cosine([Tensor(a), Tensor(b)]).item() == pytest.approx(0.0, abs=1e-6)

    def test_k3_two_equal_one_orthogonal(self, f64):
        a = np.zeros((1, 2, 4))
        a[..., 0] = [1.0, 2.0]
        c = np.zeros((1, 2, 4))
        c[..., 3] = [3.0, -1.0]
        assert module_cosine([Tensor(a), Tensor(a), Tensor(c)]).item() == pytest.approx(1.0, abs=1e-6)

    def test_zero_norm_token_contributes_zero(self, f64):
        a = np.ones((1, 2, 3))
        a[0, 1] = 0.0
        assert cosine_sq_mean(Tensor(a), Tensor(np.ones((1, 2, 3)))).item() == pytest.approx(0.5)

    def test_k1_is_zero(self, f64):
        assert cosine_diversity([[Tensor(np.ones((1, 2, 3)))]]).item() == 0.0
        assert cosine_diversity([]).item() == 0.0

    def test_mean_over_modules(self, f64):
        h = Tensor(np.ones((1, 2, 3)))
        o = np.zeros((1, 2, 3))
        o[..., 0], o2 = 1.0, np.zeros((1, 2, 3))
        o2[..., 1] = 1.0
        assert cosine_diversity([[h, h], [Tensor(o), Tensor(o2)]]).item() == pytest.approx(0.5)

    def test_gradient(self, f64):
        rng = np.random.default_rng(3)
        xs = [Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True) for _ in range(3)]
        loss = lambda: cosine_diversity([xs[:2], xs])
        loss().backward()
        for x in xs:
            assert max_rel_err(x.grad, numeric_grad(lambda: loss().item(), x.data)) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(0.1, 10))
    def test_scale_invariant_and_bounded(self, seed, s1, s2):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))
        with T.precision("f64"):
            v = cosine_sq_mean(Tensor(a), Tensor(b)).item()
            w = cosine_sq_mean(Tensor(s1 * a), Tensor(-s2 * b)).item()
        assert 0.0 <= v <= 1.0
        assert w == pytest.approx(v, rel=1e-9)


class TestStageRule:
    def test_pretrain_ignores_cos(self):
        assert combine("pretrain", 0.7, 0.3) == 0.7

    def test_finetune_adds_cos(self):
        assert combine("finetune", 0.7, 0.3) == pytest.approx(1.0)

    def test_finetune_k1(self, f64):
        ce = Tensor(0.7)
        assert combine("finetune", ce, cosine_diversity([])).item() == pytest.approx(0.7)

    def test_breakdown(self):
        lb = stage_loss("finetune", 0.7, 0.3, 1.0, [0.6, 0.8])
        assert lb.total == pytest.approx(1.0) and lb.per_domain_ce == [0.6, 0.8]

    def test_unknown_stage(self):
        with pytest.raises(UsageError):
            combine("warmup", 1.0, 0.0)
