import math

import numpy as np
import pytest

from rtdforge.services.optim import (
    AdamState,
    AdamW,
    adamw_update,
    excluded_from_decay,
    layerwise_multiplier,
    linear_schedule,
    lr_at,
    parameter_depth,
)
from rtdforge.services.pretrain import PretrainConfig
from rtdforge.services.tensor import parameter


def scalar_state() -> AdamState:
    return AdamState(np.zeros(1), np.zeros(1))


class TestAdamWUpdate:
    """Single-parameter update rule."""

    def test_matches_scalar_oracle(self):
        """Test two steps against a hand-written scalar AdamW."""
        lr, b1, b2, eps, wd = 1e-3, 0.9, 0.9999, 1e-6, 0.01
        param = np.array([1.0])
        state = scalar_state()

        p, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.5, -0.25], start=1):
            p *= 1 - lr * wd
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            adamw_update(param, np.array([g]), state, lr, b1, b2, eps, wd)

        assert abs(param[0] - p) < 1e-12
        assert state.step == 2

    def test_zero_gradient_without_decay(self):
        """Test that grad 0 and weight decay 0 leave the parameter unchanged."""
        param = np.array([0.7, -1.3])

        adamw_update(param, np.zeros(2), AdamState(np.zeros(2), np.zeros(2)), 5e-4, 0.9, 0.9999, 1e-6, 0.0)

        np.testing.assert_array_equal(param, [0.7, -1.3])

    def test_decay_only(self):
        """Test that with grad 0 the parameter is scaled by exactly (1 - lr * wd)."""
        param = np.array([2.0])

        adamw_update(param, np.zeros(1), scalar_state(), 5e-4, 0.9, 0.9999, 1e-6, 0.01)

        assert param[0] == 2.0 * (1 - 5e-4 * 0.01)

    def test_shape_mismatch(self):
        """Test that a mis-shaped gradient is rejected."""
        with pytest.raises(ValueError):
            adamw_update(np.zeros(2), np.zeros(3), AdamState(np.zeros(2), np.zeros(2)), 1e-3, 0.9, 0.999, 1e-6, 0.0)


class TestAdamW:
    """Named parameter groups."""

    @pytest.fixture
    def params(self):
        return {
            'embeddings.token': parameter(np.ones((3, 2)), name='embeddings.token'),
            'discriminator.layers.0.ffn.inner.weight': parameter(np.ones((2, 2)), name='w'),
            'discriminator.layers.0.ffn.inner.bias': parameter(np.ones(2), name='b'),
        }

    def test_decay_exclusions(self, params):
        """Test that embeddings, biases and norms are never decayed."""
        assert excluded_from_decay('embeddings.token', params['embeddings.token'])
        assert excluded_from_decay('x.bias', params['discriminator.layers.0.ffn.inner.bias'])
        assert not excluded_from_decay('w', params['discriminator.layers.0.ffn.inner.weight'])

    def test_only_matrices_decay(self, params):
        """Test that a zero-gradient step shrinks only the decayed parameter."""
        for p in params.values():
            p.grad = np.zeros_like(p.data)
        optimizer = AdamW(params, weight_decay=0.1)

        optimizer.step(lr=0.1)

        assert (params['embeddings.token'].data == 1.0).all()
        assert (params['discriminator.layers.0.ffn.inner.bias'].data == 1.0).all()
        np.testing.assert_allclose(params['discriminator.layers.0.ffn.inner.weight'].data, 0.99, rtol=1e-6)

    def test_parameters_without_gradient_are_skipped(self, params):
        """Test that grad None leaves both the value and the step count alone."""
        params['embeddings.token'].grad = np.ones((3, 2))
        optimizer = AdamW(params, weight_decay=0.1)

        optimizer.step(lr=0.1)

        assert optimizer.state['embeddings.token'].step == 1
        assert optimizer.state['discriminator.layers.0.ffn.inner.weight'].step == 0
        assert (params['discriminator.layers.0.ffn.inner.weight'].data == 1.0).all()

    def test_lr_scales(self, params):
        """Test that per-parameter scales multiply the step size."""
        for p in params.values():
            p.grad = np.ones_like(p.data)
        optimizer = AdamW(params, lr_scales={'embeddings.token': 0.5})

        optimizer.step(lr=0.1)

        # first bias-corrected Adam step moves by lr * g / (|g| + eps)
        np.testing.assert_allclose(params['embeddings.token'].data, 1.0 - 0.05 / (1 + 1e-6), rtol=1e-6)
        np.testing.assert_allclose(params['discriminator.layers.0.ffn.inner.bias'].data, 1.0 - 0.1 / (1 + 1e-6), rtol=1e-6)

    def test_state_dict_round_trip(self, params):
        """Test that restored moments continue the same trajectory."""
        for p in params.values():
            p.grad = np.full_like(p.data, 0.3)
        first = AdamW(params, weight_decay=0.01)
        first.step(lr=0.01)
        arrays, steps = first.state_dict()
        second = AdamW(params, weight_decay=0.01)
        second.load_state_dict({k: v.copy() for k, v in arrays.items()}, steps)

        assert second.state['embeddings.token'].step == 1
        np.testing.assert_array_equal(second.state['embeddings.token'].m, first.state['embeddings.token'].m)

    def test_load_missing_moments(self, params):
        """Test that incomplete optimizer state is rejected."""
        with pytest.raises(KeyError):
            AdamW(params).load_state_dict({}, {})


class TestSchedule:
    """Linear warmup then linear decay."""

    @pytest.fixture
    def config(self):
        return PretrainConfig()

    @pytest.mark.parametrize('step, expected', [
        (0, 0.0),
        (5000, 2.5e-4),
        (10000, 5e-4),
        (505000, 2.5e-4),
        (1_000_000, 0.0),
    ])
    def test_default_schedule(self, config, step, expected):
        """Test schedule values at warmup, peak, midpoint and end."""
        assert lr_at(step, config) == pytest.approx(expected, abs=1e-15)

    def test_out_of_range(self, config):
        """Test that steps outside [0, total] are rejected."""
        with pytest.raises(ValueError):
            lr_at(-1, config)
        with pytest.raises(ValueError):
            lr_at(1_000_001, config)

    def test_no_warmup(self):
        """Test that zero warmup starts at the peak."""
        assert linear_schedule(0, 1e-3, 0, 10) == 1e-3
        assert linear_schedule(5, 1e-3, 0, 10) == pytest.approx(5e-4)

    def test_monotone(self, config):
        """Test that the schedule rises then falls."""
        values = [lr_at(s, config) for s in range(0, 1_000_001, 2500)]
        peak = values.index(max(values))

        assert all(a <= b for a, b in zip(values[:peak], values[1:peak + 1]))
        assert all(a >= b for a, b in zip(values[peak:], values[peak + 1:]))


class TestLayerwiseDecay:
    """Per-layer learning-rate multipliers."""

    def test_head_gets_full_rate(self):
        """Test that the head (depth L + 1) has multiplier 1."""
        assert layerwise_multiplier(13, 12, 0.8) == 1.0

    @pytest.mark.parametrize('depth', range(14))
    def test_powers_of_decay(self, depth):
        """Test multipliers 0.8 ** (distance from the head)."""
        assert layerwise_multiplier(depth, 12, 0.8) == 0.8 ** (13 - depth)

    def test_invalid_inputs(self):
        """Test that depths outside [0, L + 1] and decays outside (0, 1] are rejected."""
        with pytest.raises(ValueError):
            layerwise_multiplier(14, 12, 0.8)
        with pytest.raises(ValueError):
            layerwise_multiplier(3, 12, 0.0)

    @pytest.mark.parametrize('name, depth', [
        ('embeddings.token', 0),
        ('discriminator.embedding_norm.gain', 0),
        ('discriminator.embedding_projection.weight', 0),
        ('discriminator.layers.0.attention.query.weight', 1),
        ('discriminator.layers.11.ffn_norm.bias', 12),
        ('head.out.weight', 13),
    ])
    def test_parameter_depth(self, name, depth):
        """Test the mapping from parameter names to depth."""
        assert parameter_depth(name, 12) == depth
