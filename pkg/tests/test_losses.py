"""Focal loss values, identities, and the loss decomposition."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainplan.engine import Tensor, using_dtype
from chainplan.losses import (
    LossConfig,
    LossError,
    clamp_warnings,
    focal_loss,
    loss_chain,
    loss_subchains,
    loss_total,
    state_regression_loss,
)
from chainplan.model import Planner, PlannerConfig, PlannerOutput


@pytest.fixture(autouse=True)
def f64():
    with using_dtype("f64"):
        yield


def rows(vals):
    return Tensor(np.asarray(vals, dtype=np.float64))


def random_distributions(rng, n, k):
    z = rng.uniform(0.05, 1.0, size=(n, k))
    return z / z.sum(axis=1, keepdims=True)


class TestFocalValues:
    def test_gamma0_uniform_row(self):
        loss = focal_loss(rows([[0.25, 0.25, 0.25, 0.25]]), [0], gamma=0.0)
        assert loss.item() == pytest.approx(-math.log(0.25), abs=1e-12)
        assert loss.item() == pytest.approx(1.3863, abs=1e-4)

    def test_gamma2_confident_row(self):
        loss = focal_loss(rows([[0.9, 0.1]]), [0], gamma=2.0)
        assert loss.item() == pytest.approx(0.01 * -math.log(0.9), abs=1e-15)
        assert loss.item() == pytest.approx(1.054e-3, abs=1e-6)

    def test_perfect_prediction_is_zero(self):
        for gamma in (0.0, 1.0, 1.5, 2.0):
            loss = focal_loss(rows([[1.0, 0.0, 0.0]]), [0], gamma=gamma)
            assert loss.item() == 0.0

    def test_zero_probability_clamps_and_counts(self):
        clamp_warnings.reset()
        loss = focal_loss(rows([[0.0, 1.0]]), [0], gamma=0.0)
        assert clamp_warnings.count == 1
        assert loss.item() == pytest.approx(-math.log(1e-12))

    def test_negative_gamma_rejected(self):
        with pytest.raises(LossError):
            focal_loss(rows([[1.0]]), [0], gamma=-1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(LossError):
            focal_loss(rows([[0.5, 0.5]]), [0, 1], gamma=0.0)


class TestFocalIdentities:
    def test_gamma0_equals_cross_entropy_on_100_rows(self):
        rng = np.random.default_rng(0)
        p = random_distributions(rng, 100, 6)
        targets = rng.integers(0, 6, size=100)
        got = focal_loss(Tensor(p), targets, gamma=0.0).item()
        want = float(np.mean([-math.log(p[i, t]) for i, t in enumerate(targets)]))
        assert abs(got - want) < 1e-12

    @given(st.floats(0.01, 0.99), st.floats(0.0, 3.0))
    @settings(max_examples=80, deadline=None)
    def test_nonnegative_and_below_cross_entropy(self, p_target, gamma):
        row = rows([[p_target, 1.0 - p_target]])
        fl = focal_loss(row, [0], gamma=gamma).item()
        ce = focal_loss(row, [0], gamma=0.0).item()
        assert fl >= 0.0
        assert fl <= ce + 1e-12

    @given(st.floats(0.05, 0.90), st.floats(0.0, 3.0))
    @settings(max_examples=60, deadline=None)
    def test_strictly_decreasing_in_p_target(self, p, gamma):
        lo = focal_loss(rows([[p, 1 - p]]), [0], gamma=gamma).item()
        hi = focal_loss(rows([[p + 0.05, 1 - p - 0.05]]), [0], gamma=gamma).item()
        assert hi < lo


def _tiny_model(t=5, decouple=True):
    cfg = PlannerConfig(horizon=t, n_actions=9, feature_dim=8, d_model=16,
                        n_heads=2, memory_size=4, feedforward_dim=32,
                        decouple=decouple)
    return Planner(cfg, seed=0)


def _fake_io(model, b=4, seed=0):
    rng = np.random.default_rng(seed)
    from chainplan.model import Batch
    batch = Batch(v_start=Tensor(rng.normal(size=(b, 3, 8))),
                  v_goal=Tensor(rng.normal(size=(b, 3, 8))),
                  actions=rng.integers(0, 9, size=(b, model.config.horizon)))
    return model.forward(batch), batch.actions


class TestLossComposition:
    def test_subchain_sum_has_t_minus_2_terms(self):
        model = _tiny_model(4)
        out, targets = _fake_io(model)
        total = loss_subchains(out, targets, gamma=0.0).item()
        parts = 0.0
        from chainplan.engine import softmax, take
        for logits, pos in zip(out.per_decoder, [(1, 2, 4), (1, 3, 4)]):
            idx = [p - 1 for p in pos]
            probs = softmax(take(logits, idx, axis=1), axis=-1)
            parts += focal_loss(probs, targets[:, idx], gamma=0.0).item()
        assert total == pytest.approx(parts, abs=1e-12)

    def test_total_is_sum_of_terms(self):
        model = _tiny_model(5)
        out, targets = _fake_io(model)
        cfg = LossConfig(gamma=1.5)
        breakdown = loss_total(out, targets, cfg, decouple=True)
        l_n = loss_subchains(out, targets, 1.5).item()
        l_t = loss_chain(out.final, targets, 1.5).item()
        assert breakdown.total.item() == pytest.approx(l_n + l_t, abs=1e-12)

    def test_t3_uses_chain_loss_only(self):
        model = _tiny_model(3)
        out, targets = _fake_io(model)
        breakdown = loss_total(out, targets, LossConfig(gamma=0.5), decouple=True)
        assert breakdown.subchains is None
        assert breakdown.total.item() == breakdown.chain.item()

    def test_subchains_rejected_for_t3(self):
        model = _tiny_model(3)
        out, targets = _fake_io(model)
        with pytest.raises(LossError):
            loss_subchains(out, targets, 0.0)

    def test_perfect_decoders_give_zero_subchain_loss(self):
        t, n_a = 4, 9
        targets = np.array([[1, 2, 3, 4]])
        big = np.full((1, t, n_a), -100.0)
        for pos, cls in enumerate(targets[0]):
            big[0, pos, cls] = 100.0
        out = PlannerOutput(per_decoder=[Tensor(big), Tensor(big)],
                            final=Tensor(big))
        assert loss_subchains(out, targets, gamma=1.0).item() == \
            pytest.approx(0.0, abs=1e-12)
        assert loss_total(out, targets, LossConfig(gamma=1.0),
                          decouple=True).total.item() == pytest.approx(0.0, abs=1e-12)

    def test_decoder_loss_separation(self):
        # a sub-chain term must not send gradient to other decoders
        from chainplan.engine import Tape, backprop
        model = _tiny_model(5)
        from chainplan.model import Batch
        rng = np.random.default_rng(3)
        batch = Batch(v_start=Tensor(rng.normal(size=(2, 3, 8))),
                      v_goal=Tensor(rng.normal(size=(2, 3, 8))),
                      actions=rng.integers(0, 9, size=(2, 5)))
        params = model.parameters()
        with Tape() as tape:
            out = model.forward(batch)
            from chainplan.engine import softmax, take
            idx = [0, 1, 4]  # decoder 1's sub-chain {1, 2, 5}
            probs = softmax(take(out.per_decoder[0], idx, axis=1), axis=-1)
            term = focal_loss(probs, batch.actions[:, idx], 0.0)
        grads = backprop(tape, term, params)
        dec2_names = {p.name for p in model.decoders[1].parameters()}
        for name, g in grads.items():
            if name in dec2_names:
                assert not g.numpy().any(), name

    def test_restricted_positions_loss(self):
        model = _tiny_model(5, decouple=False)
        out, targets = _fake_io(model)
        cfg = LossConfig(gamma=0.0, positions=(1, 3, 5))
        breakdown = loss_total(out, targets, cfg, decouple=False)
        idx = [0, 2, 4]
        from chainplan.engine import softmax, take
        probs = softmax(take(out.final, idx, axis=1), axis=-1)
        want = focal_loss(probs, targets[:, idx], 0.0).item()
        assert breakdown.total.item() == pytest.approx(want, abs=1e-12)

    def test_state_regression_zero_at_truth(self):
        truth = np.random.default_rng(0).normal(size=(2, 4, 8))
        assert state_regression_loss(Tensor(truth), truth).item() == 0.0
