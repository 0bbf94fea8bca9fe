import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedskew.data import ClientShard, gen_synthetic
from fedskew.errors import ShapeError, ValidationError
from fedskew.nn import ModelParams, init_mlp, loss_and_grad
from fedskew.unlearn import UnlearnConfig, projection, upga_unlearn


def vector_model(values):
    v = np.asarray(values, dtype=float)
    return ModelParams([v[:-1].reshape(1, -1)], [v[-1:]], ("identity",))


@pytest.fixture(scope="module")
def shard():
    return ClientShard(0, gen_synthetic(3, 30, 5, 0.2, seed=2))


@pytest.fixture(scope="module")
def model():
    return init_mlp([5, 6, 3], seed=1)


class TestProjection:
    def test_inside_ball_is_untouched(self):
        p = vector_model([0.1, 0.2, 0.0])
        r = vector_model([0.0, 0.0, 0.0])
        assert projection(p, r, 1.0) is p

    def test_three_four_five(self):
        out = projection(vector_model([3.0, 4.0]), vector_model([0.0, 0.0]), 1.0)
        np.testing.assert_allclose(out.flatten(), [0.6, 0.8], rtol=0, atol=1e-15)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), radius=st.floats(0.0, 5.0))
    def test_norm_identity(self, seed, radius):
        rng = np.random.default_rng(seed)
        p = vector_model(rng.normal(size=6) * 3)
        r = vector_model(rng.normal(size=6))
        out = projection(p, r, radius)
        dist = np.linalg.norm(out.flatten() - r.flatten())
        assert abs(dist - min(radius, np.linalg.norm(p.flatten() - r.flatten()))) <= 1e-12

    def test_spec_mismatch(self):
        with pytest.raises(ShapeError):
            projection(vector_model([1.0, 2.0]), vector_model([1.0, 2.0, 3.0]), 1.0)


class TestUpga:
    def test_zero_radius_returns_reference(self, model, shard):
        out = upga_unlearn(model, shard, UnlearnConfig(reference=model, radius=0.0, ascent_steps=5))
        assert out.equals(model)

    def test_single_full_batch_step(self, model, shard):
        cfg = UnlearnConfig(reference=model, radius=1e9, ascent_steps=1, ascent_lr=0.3,
                            batch_size=len(shard))
        out = upga_unlearn(model, shard, cfg)
        _, g = loss_and_grad(model, shard.data.features, shard.data.labels)
        np.testing.assert_allclose(out.flatten(), model.flatten() + 0.3 * g.flatten(), rtol=0, atol=1e-14)

    def test_ascent_raises_loss_and_respects_ball(self, model, shard):
        x, y = shard.data.features, shard.data.labels
        cfg = UnlearnConfig(reference=model, radius=0.5, ascent_steps=30, ascent_lr=0.1)
        out, trace = upga_unlearn(model, shard, cfg, return_trace=True)
        assert loss_and_grad(out, x, y)[0] > loss_and_grad(model, x, y)[0]
        assert max(trace.distances) <= 0.5 + 1e-12
        assert len(trace.losses) == 30

    def test_default_radius_scales_with_reference_norm(self, model):
        cfg = UnlearnConfig(reference=model)
        assert cfg.resolved_radius() == pytest.approx(0.04 * np.linalg.norm(model.flatten()))
        assert UnlearnConfig(reference=model, radius_scale=0.5).resolved_radius() == pytest.approx(
            0.5 * np.linalg.norm(model.flatten()))

    def test_deterministic(self, model, shard):
        cfg = UnlearnConfig(reference=model, ascent_steps=7, batch_size=16, seed=5)
        assert upga_unlearn(model, shard, cfg).equals(upga_unlearn(model, shard, cfg))

    @pytest.mark.parametrize("radius", [-1.0, math.inf, math.nan])
    def test_bad_radius(self, model, radius):
        with pytest.raises(ValidationError):
            UnlearnConfig(reference=model, radius=radius)

    def test_empty_shard(self, model):
        empty = ClientShard(0, gen_synthetic(3, 1, 5, 0.2, seed=0).subset([]))
        with pytest.raises(ValidationError):
            upga_unlearn(model, empty, UnlearnConfig(reference=model))
