"""Model construction, forward pass, selectors, snapshots, EMA, restore."""

import numpy as np
import pytest

from driftadapt.autograd import Tensor, backward, masked_mean_entropy_loss
from driftadapt.errors import ConfigError, ShapeError
from driftadapt.model import (
    Model,
    ModelSpec,
    ParamSelector,
    build_model,
    ema_update,
    forward_segment,
    restore,
    select_trainable,
    snapshot,
    stochastic_restore,
)
from driftadapt.rng import stream

# frozen from tests/oracle_param_counts.py (plain fan-in arithmetic)
SELECTOR_COUNTS = {
    ("backbone", "bn-affine-only"): 224,
    ("head", "bn-affine-only"): 64,
    ("both", "bn-affine-only"): 288,
    ("backbone", "all-weights"): 23696,
    ("head", "all-weights"): 18958,
    ("both", "all-weights"): 42654,
}

EXPECTED_NAMES = [
    "backbone.block0.conv.weight", "backbone.block0.bn.scale", "backbone.block0.bn.shift",
    "backbone.block1.conv.weight", "backbone.block1.bn.scale", "backbone.block1.bn.shift",
    "backbone.block2.conv.weight", "backbone.block2.bn.scale", "backbone.block2.bn.shift",
    "head.block0.conv.weight", "head.block0.bn.scale", "head.block0.bn.shift",
    "head.classifier.weight", "head.classifier.bias",
]


@pytest.fixture(scope="module")
def model():
    return build_model(ModelSpec(), seed=7)


def small_image(seed=0, n=1):
    rng = stream(seed, 99)
    return Tensor(rng.random((n, 3, 32, 32), dtype=np.float32))


class TestBuild:
    def test_param_names(self, model):
        assert model.store.names() == EXPECTED_NAMES

    def test_total_param_count(self, model):
        assert model.store.num_values() == 42654

    def test_same_seed_is_bitwise_identical(self):
        a = build_model(ModelSpec(), seed=3)
        b = build_model(ModelSpec(), seed=3)
        for p in a.store:
            assert np.array_equal(p.tensor.data, b.store[p.name].tensor.data)

    def test_different_seed_differs(self):
        a = build_model(ModelSpec(), seed=3)
        b = build_model(ModelSpec(), seed=4)
        assert not np.array_equal(a.param("backbone.block0.conv.weight").data,
                                  b.param("backbone.block0.conv.weight").data)

    def test_downsample_factor(self):
        assert ModelSpec().downsample == 4

    def test_bad_spec_rejected(self):
        with pytest.raises(ConfigError):
            ModelSpec(backbone_widths=(16, 32), backbone_strides=(1, 2, 2))
        with pytest.raises(ConfigError):
            ModelSpec(num_classes=1)

    def test_fingerprint_distinguishes_specs(self):
        assert ModelSpec().fingerprint() != ModelSpec(head_widths=(16,)).fingerprint()


class TestSelectors:
    @pytest.mark.parametrize("region,scope", sorted(SELECTOR_COUNTS))
    def test_counts_match_oracle(self, model, region, scope):
        n = select_trainable(model, ParamSelector(region, scope))
        assert n == SELECTOR_COUNTS[(region, scope)]

    def test_exactly_selected_params_trainable(self, model):
        sel = ParamSelector("backbone", "bn-affine-only")
        select_trainable(model, sel)
        for p in model.store:
            assert p.trainable == sel.matches(p.name)
            assert p.tensor.requires_grad == p.trainable

    def test_regions_partition_the_store(self, model):
        back = {p.name for p in model.store
                if ParamSelector("backbone", "all-weights").matches(p.name)}
        head = {p.name for p in model.store
                if ParamSelector("head", "all-weights").matches(p.name)}
        assert back.isdisjoint(head)
        assert back | head == set(EXPECTED_NAMES)

    def test_bad_selector_rejected(self):
        with pytest.raises(ConfigError):
            ParamSelector("neck", "all-weights")
        with pytest.raises(ConfigError):
            ParamSelector("both", "everything")


class TestForward:
    def test_output_shape(self, model):
        out = forward_segment(model, small_image())
        assert out.data.shape == (1, 14, 32, 32)
        assert out.data.dtype == np.float32

    def test_batch_of_two(self, model):
        out = forward_segment(model, small_image(n=2))
        assert out.data.shape == (2, 14, 32, 32)

    def test_deterministic(self, model):
        a = forward_segment(model, small_image()).data
        b = forward_segment(model, small_image()).data
        assert np.array_equal(a, b)

    def test_indivisible_size_rejected(self, model):
        img = Tensor(np.zeros((1, 3, 30, 30), dtype=np.float32))
        with pytest.raises(ShapeError):
            forward_segment(model, img)

    def test_wrong_channels_rejected(self, model):
        img = Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32))
        with pytest.raises(ShapeError):
            forward_segment(model, img)

    def test_unknown_bn_mode_rejected(self, model):
        with pytest.raises(ConfigError):
            forward_segment(model, small_image(), bn_mode="running")

    def test_interpolated_requires_states(self):
        m = build_model(ModelSpec(), seed=1)
        with pytest.raises(ConfigError):
            forward_segment(m, small_image(), bn_mode="interpolated")

    def test_source_and_batch_modes_differ(self, model):
        a = forward_segment(model, small_image(), bn_mode="source").data
        b = forward_segment(model, small_image(), bn_mode="batch").data
        assert not np.allclose(a, b)

    def test_interpolated_without_update_equals_source(self):
        # fresh adapt states sit exactly on the source stats, so a forward
        # that does not advance them must match source normalization bitwise
        m = build_model(ModelSpec(), seed=5)
        m.make_adapt_states()
        a = forward_segment(m, small_image(), bn_mode="source").data
        b = forward_segment(m, small_image(), bn_mode="interpolated",
                            update_state=False).data
        assert np.array_equal(a, b)

    def test_interpolated_saturated_approaches_batch(self):
        # with instant mixing (alpha 1) and a huge distance gain the mix
        # lands numerically on the batch stats at every layer
        m = build_model(ModelSpec(), seed=5)
        m.make_adapt_states(gamma_hp=1e9, alpha_hp=1.0)
        a = forward_segment(m, small_image(), bn_mode="batch").data
        b = forward_segment(m, small_image(), bn_mode="interpolated").data
        assert np.allclose(a, b, rtol=1e-4, atol=1e-5)

    def test_collect_reports_every_bn_layer(self, model):
        collect = {}
        forward_segment(model, small_image(), bn_mode="batch", collect=collect)
        names = [n for n, _ in collect["batch_stats"]]
        assert names == model.bn_order
        assert len(names) == 4

    def test_gradients_reach_selected_params(self, model):
        select_trainable(model, ParamSelector("backbone", "bn-affine-only"))
        model.store.zero_grad()
        logits = forward_segment(model, small_image(), bn_mode="batch")
        mask = np.ones((1, 1, 32, 32), dtype=bool)
        backward(masked_mean_entropy_loss(logits, mask))
        for p in model.store:
            if p.trainable:
                assert p.tensor.grad is not None, p.name
            else:
                assert p.tensor.grad is None, p.name


class TestSnapshotRestore:
    def test_round_trip_is_bitwise(self):
        m = build_model(ModelSpec(), seed=9)
        m.make_adapt_states()
        forward_segment(m, small_image(), bn_mode="interpolated")
        state = snapshot(m)
        before = {p.name: p.tensor.data.copy() for p in m.store}
        for p in m.store:
            p.tensor.data = p.tensor.data + 1.0
        restore(m, state)
        for p in m.store:
            assert np.array_equal(p.tensor.data, before[p.name])

    def test_restores_adapt_state(self):
        m = build_model(ModelSpec(), seed=9)
        m.make_adapt_states()
        forward_segment(m, small_image(), bn_mode="interpolated")
        state = snapshot(m)
        beta_then = {k: st.beta for k, st in m.adapt_states.items()}
        forward_segment(m, small_image(seed=1), bn_mode="interpolated")
        restore(m, state)
        for k, st in m.adapt_states.items():
            assert st.beta == beta_then[k]

    def test_fingerprint_mismatch_rejected(self):
        m = build_model(ModelSpec(), seed=9)
        state = snapshot(m)
        other = build_model(ModelSpec(head_widths=(16,)), seed=9)
        with pytest.raises(ConfigError):
            restore(other, state)


class TestEmaUpdate:
    def test_lerp_value(self):
        t = build_model(ModelSpec(), seed=1)
        s = build_model(ModelSpec(), seed=2)
        name = "head.classifier.bias"
        t.param(name).data[:] = 1.0
        s.param(name).data[:] = 3.0
        ema_update(t, s, momentum=0.75)
        assert np.allclose(t.param(name).data, 1.5)

    def test_momentum_one_keeps_teacher(self):
        t = build_model(ModelSpec(), seed=1)
        s = build_model(ModelSpec(), seed=2)
        before = t.param("head.classifier.weight").data.copy()
        ema_update(t, s, momentum=1.0)
        assert np.array_equal(t.param("head.classifier.weight").data, before)

    def test_momentum_zero_copies_student(self):
        t = build_model(ModelSpec(), seed=1)
        s = build_model(ModelSpec(), seed=2)
        ema_update(t, s, momentum=0.0)
        for p in t.store:
            assert np.allclose(p.tensor.data, s.store[p.name].tensor.data)

    def test_bad_momentum_rejected(self):
        t = build_model(ModelSpec(), seed=1)
        with pytest.raises(ConfigError):
            ema_update(t, t, momentum=1.5)


class TestStochasticRestore:
    def _drifted(self, seed=3):
        m = build_model(ModelSpec(), seed=seed)
        src = {p.name: p.tensor.data.copy() for p in m.store}
        for p in m.store:
            p.tensor.data = p.tensor.data + 1.0
        return m, src

    def test_rate_zero_changes_nothing(self):
        m, src = self._drifted()
        drifted = {p.name: p.tensor.data.copy() for p in m.store}
        n = stochastic_restore(m, src, 0.0, stream(0, 1))
        assert n == 0
        for p in m.store:
            assert np.array_equal(p.tensor.data, drifted[p.name])

    def test_rate_one_restores_everything(self):
        m, src = self._drifted()
        n = stochastic_restore(m, src, 1.0, stream(0, 1))
        assert n == 42654
        for p in m.store:
            assert np.array_equal(p.tensor.data, src[p.name])

    def test_small_rate_hits_binomial_fraction(self):
        # 42654 Bernoulli draws at p=0.01: observed fraction should sit
        # well inside [0.007, 0.013] (about +-6 sigma)
        m, src = self._drifted()
        n = stochastic_restore(m, src, 0.01, stream(0, 2))
        frac = n / 42654
        assert 0.007 < frac < 0.013
        restored = sum(int(np.sum(p.tensor.data == src[p.name])) for p in m.store)
        assert restored == n

    def test_bad_rate_rejected(self):
        m, src = self._drifted()
        with pytest.raises(ConfigError):
            stochastic_restore(m, src, -0.1, stream(0, 1))
