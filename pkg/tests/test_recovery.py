import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedskew.data import ClientShard, LabeledDataset, PartitionSpec, gen_synthetic, partition_skewed
from fedskew.errors import ValidationError
from fedskew.fed import FedRoundConfig, run_federated
from fedskew.nn import ModelParams, init_mlp
from fedskew.recovery import (
    VARIANTS,
    AutoencoderPair,
    GeneratedBatch,
    RecoveryConfig,
    augment_client,
    augment_clients,
    build_shard,
    denoise,
    density,
    density_factor,
    imba_ulrc_recover,
    init_autoencoder,
    latent_smote,
    pool_densities,
    recover_variant,
    reconstruction_loss,
    reverse_reconstruction_loss,
    target_count,
    train_autoencoder,
)
from fedskew.recovery.autoencoder import _grads


def dist(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def brute_neighbors(pool, i, k):
    """k nearest other rows by an explicit scan; ties to the lower index."""
    cands = sorted((dist(pool[i], pool[j]), j) for j in range(len(pool)) if j != i)
    return [j for _, j in cands[:k]]


def brute_density(pool, i, k):
    return 1.0 / (1.0 + sum(dist(pool[i], pool[j]) for j in brute_neighbors(pool, i, k)) / (k + 1))


def brute_factor(pool, i, k):
    return sum(brute_density(pool, q, k) for q in brute_neighbors(pool, i, k)) / (k * brute_density(pool, i, k))


def batch_of(samples):
    g = len(samples)
    zeros = np.zeros(g, dtype=np.int64)
    return GeneratedBatch(np.asarray(samples, dtype=float), np.zeros((g, 1)), zeros, zeros, np.zeros(g))


def linear_pair(enc_w, dec_w):
    enc_w, dec_w = np.asarray(enc_w, float), np.asarray(dec_w, float)
    enc = ModelParams([enc_w], [np.zeros(enc_w.shape[0])], ("identity",))
    dec = ModelParams([dec_w], [np.zeros(dec_w.shape[0])], ("identity",))
    return AutoencoderPair(enc, dec)


@pytest.fixture(scope="module")
def scenario():
    ds = gen_synthetic(3, 90, 8, 0.15, seed=6)
    part = partition_skewed(ds, PartitionSpec(3, 0.8, skewed_class=1, seed=2))
    cfg = RecoveryConfig(latent_dim=3, ae_hidden=8, ae_epochs=3, ae_batch_size=16, smote_k=3, denoise_k=3,
                         fed=FedRoundConfig(global_rounds=2, batch_size=16, learning_rate=0.05), seed=4)
    model = init_mlp([8, 6, 3], seed=0, dropout_rate=0.1)
    return part, cfg, model


class TestAutoencoderLosses:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_singleton_reverse_equals_forward(self, seed):
        rng = np.random.default_rng(seed)
        pair = init_autoencoder(6, 2, 5, seed)
        x = rng.random((1, 6))
        assert reverse_reconstruction_loss(pair, x) == reconstruction_loss(pair, x)
        l1, ge1, gd1 = _grads(pair, x, reverse=False)
        l2, ge2, gd2 = _grads(pair, x, reverse=True)
        assert l1 == l2 and ge1.equals(ge2) and gd1.equals(gd2)

    def test_two_sample_sequence_by_hand(self):
        # encoder keeps the first coordinate; decoder maps y -> (2y, -y)
        pair = linear_pair([[1.0, 0.0]], [[2.0], [-1.0]])
        d1, d2 = np.array([0.5, 0.25]), np.array([0.75, 0.0])
        y1, y2 = np.array([1.0, -0.5]), np.array([1.5, -0.75])
        expected = 0.5 * (np.sum((y2 - d1) ** 2) + np.sum((y1 - d2) ** 2))
        assert reverse_reconstruction_loss(pair, np.stack([d1, d2])) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("reverse", [False, True])
    def test_gradients_match_finite_differences(self, reverse):
        rng = np.random.default_rng(3)
        pair = init_autoencoder(5, 2, 4, seed=1)
        # nudge zero biases off the ReLU kink so central differences are valid
        pair = AutoencoderPair(
            pair.encoder.with_flat(pair.encoder.flatten() + 0.1 * rng.standard_normal(pair.encoder.num_params)),
            pair.decoder.with_flat(pair.decoder.flatten() + 0.1 * rng.standard_normal(pair.decoder.num_params)),
        )
        x = rng.random((4, 5))
        _, ge, gd = _grads(pair, x, reverse)
        loss_fn = reverse_reconstruction_loss if reverse else reconstruction_loss
        eps = 1e-5
        for which, grad in (("encoder", ge), ("decoder", gd)):
            part = getattr(pair, which)
            flat = part.flatten()
            fd = np.empty_like(flat)
            for i in range(flat.size):
                up, down = flat.copy(), flat.copy()
                up[i] += eps
                down[i] -= eps
                swap = {which: part.with_flat(up)}
                lu = loss_fn(AutoencoderPair(**{"encoder": pair.encoder, "decoder": pair.decoder, **swap}), x)
                swap = {which: part.with_flat(down)}
                ld = loss_fn(AutoencoderPair(**{"encoder": pair.encoder, "decoder": pair.decoder, **swap}), x)
                fd[i] = (lu - ld) / (2 * eps)
            np.testing.assert_allclose(grad.flatten(), fd, rtol=1e-4, atol=1e-8)

    def test_latent_must_be_smaller(self):
        with pytest.raises(ValidationError):
            init_autoencoder(4, 4, 8, seed=0)


class TestTrainAutoencoder:
    def test_reconstruction_improves(self):
        ds = gen_synthetic(2, 50, 10, 0.2, seed=3)
        pair, hist = train_autoencoder(ClientShard(0, ds), latent_dim=4, hidden=16, epochs=200,
                                       batch_size=25, learning_rate=0.01, seed=1)
        assert hist.final_l1 < 0.5 * hist.initial_l1
        assert hist.final_l1 == pytest.approx(reconstruction_loss(pair, ds.features))
        assert len(hist.epoch_l1) == len(hist.epoch_l2) == 200

    def test_deterministic(self):
        shard = ClientShard(1, gen_synthetic(3, 12, 6, 0.2, seed=0))
        a, ha = train_autoencoder(shard, latent_dim=2, hidden=4, epochs=4, batch_size=8, seed=5)
        b, hb = train_autoencoder(shard, latent_dim=2, hidden=4, epochs=4, batch_size=8, seed=5)
        assert a.encoder.equals(b.encoder) and a.decoder.equals(b.decoder)
        assert ha.reverse_classes == hb.reverse_classes

    def test_singleton_reverse_chunk_is_skipped(self):
        # class 0 has 5 samples; chunks of 4 leave a final chunk of 1
        labels = np.array([0] * 5 + [1])
        ds = LabeledDataset(np.random.default_rng(0).random((6, 4)), labels, 2)
        _, hist = train_autoencoder(ClientShard(0, ds), latent_dim=2, hidden=3, epochs=3, batch_size=4, seed=0)
        assert hist.reverse_classes == [0, 0, 0]
        # only 2 plain batches per epoch, so chunk index 1 (the singleton) is reached each epoch
        assert hist.skipped_l2_batches == 3

    def test_empty_shard(self):
        empty = gen_synthetic(2, 1, 3, 0.1, seed=0).subset([])
        with pytest.raises(ValidationError):
            train_autoencoder(ClientShard(0, empty), latent_dim=1, hidden=2, epochs=1)


@pytest.fixture(scope="module")
def setup():
    pair = init_autoencoder(6, 3, 8, seed=2)
    x = np.random.default_rng(1).random((12, 6))
    return pair, x


class TestLatentSmote:
    def test_t_zero_gives_source(self, setup):
        pair, x = setup
        b = latent_smote(pair, x, 20, smote_k=3, seed=0, rand_t=0.0)
        z = pair.encode(x)
        np.testing.assert_array_equal(b.latents, z[b.source_index])
        np.testing.assert_array_equal(b.samples, pair.decode(z[b.source_index]))

    def test_t_one_gives_neighbor(self, setup):
        pair, x = setup
        b = latent_smote(pair, x, 20, smote_k=3, seed=0, rand_t=1.0)
        np.testing.assert_allclose(b.latents, pair.encode(x)[b.neighbor_index], rtol=0, atol=1e-15)

    def test_collinear(self, setup):
        pair, x = setup
        b = latent_smote(pair, x, 50, smote_k=4, seed=3)
        z = pair.encode(x)
        for g, s, n in zip(b.latents, b.source_index, b.neighbor_index):
            assert abs(dist(g, z[s]) + dist(g, z[n]) - dist(z[n], z[s])) <= 1e-12

    def test_neighbors_are_among_k_nearest(self, setup):
        pair, x = setup
        b = latent_smote(pair, x, 60, smote_k=3, seed=9)
        z = pair.encode(x)
        for s, n in zip(b.source_index, b.neighbor_index):
            assert n in brute_neighbors(z, s, 3)
        assert 0 <= b.rand_t.min() and b.rand_t.max() < 1

    def test_deterministic(self, setup):
        pair, x = setup
        a = latent_smote(pair, x, 10, seed=4)
        c = latent_smote(pair, x, 10, seed=4)
        assert np.array_equal(a.samples, c.samples)

    def test_too_few_samples(self, setup):
        pair, x = setup
        with pytest.raises(ValidationError, match="client 7"):
            latent_smote(pair, x[:3], 5, smote_k=3, client_id=7)


class TestDensity:
    def test_zero_distances(self):
        assert density(0, np.zeros((4, 3)), 3) == 1.0

    def test_distances_one_and_two(self):
        pool = np.array([[0.0], [1.0], [-2.0], [10.0]])
        assert density(0, pool, 2) == 0.5

    def test_scaling_recomputed(self):
        pool = np.random.default_rng(2).random((8, 3))
        for i in range(8):
            assert density(i, 2 * pool, 3) == pytest.approx(brute_density(2 * pool, i, 3), abs=1e-12)
            assert density(i, 2 * pool, 3) < density(i, pool, 3)

    def test_interior_grid_factor_is_one(self):
        pool = np.arange(11, dtype=float)[:, None]
        for i in range(3, 8):
            assert density_factor(i, pool, 2) == pytest.approx(1.0, abs=1e-15)

    def test_outlier_factor_above_one(self):
        pool = np.vstack([np.random.default_rng(0).normal(0, 0.01, (8, 2)), [[5.0, 5.0]]])
        assert density_factor(8, pool, 3) > 1.0

    def test_six_point_configuration(self):
        pool = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.4], [3, 2]], dtype=float)
        for k in (1, 2, 3):
            for i in range(6):
                assert abs(density_factor(i, pool, k) - brute_factor(pool, i, k)) <= 1e-12
                assert abs(density(i, pool, k) - brute_density(pool, i, k)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(4, 30), k=st.integers(1, 3))
    def test_vectorized_matches_scalar(self, seed, n, k):
        pool = np.random.default_rng(seed).random((n, 3))
        phi, psi, _ = pool_densities(pool, k)
        for i in range(n):
            assert abs(phi[i] - brute_density(pool, i, k)) <= 1e-12
            assert abs(psi[i] - brute_factor(pool, i, k)) <= 1e-12

    def test_pool_too_small(self):
        with pytest.raises(ValidationError):
            density(0, np.zeros((3, 2)), 3)


class TestDenoise:
    def test_equal_factors_remove_highest_index_first(self):
        original = np.zeros((4, 2))
        kept, report = denoise(batch_of(np.zeros((6, 2))), original, 2, 4)
        assert report.removal_order.tolist() == [5, 4]
        assert (~report.removed).nonzero()[0].tolist() == [0, 1, 2, 3]
        assert len(kept) == 4

    def test_largest_factors_removed(self):
        rng = np.random.default_rng(5)
        original = rng.normal(0, 0.1, (8, 2))
        generated = rng.normal(0, 1.0, (10, 2))
        kept, report = denoise(batch_of(generated), original, 3, 5)
        pool = np.vstack([original, generated])
        psi = [brute_factor(pool, 8 + j, 3) for j in range(10)]
        assert len(set(psi)) == 10
        largest = sorted(range(10), key=lambda j: -psi[j])[:5]
        assert sorted(report.removal_order.tolist()) == sorted(largest)
        np.testing.assert_array_equal(kept, generated[sorted(set(range(10)) - set(largest))])
        assert report.median == pytest.approx(np.median(psi))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**20), g=st.integers(1, 25), n_orig=st.integers(0, 10), k=st.integers(1, 4))
    def test_conservation(self, seed, g, n_orig, k):
        if n_orig + g < k + 1:
            return
        rng = np.random.default_rng(seed)
        target = int(rng.integers(0, g + 1))
        kept, report = denoise(batch_of(rng.random((g, 3))), rng.random((n_orig, 3)), k, target)
        assert len(kept) == target == int((~report.removed).sum())

    def test_target_out_of_range(self):
        with pytest.raises(ValidationError):
            denoise(batch_of(np.zeros((3, 2))), np.zeros((3, 2)), 1, 4)


class TestRecover:
    def test_target_count_rule(self):
        labels = np.array([0] * 10 + [1] * 7 + [2] * 2)
        shard = ClientShard(0, LabeledDataset(np.zeros((19, 2)), labels, 3))
        assert target_count(shard, 2) == math.ceil(8.5) - 2
        assert target_count(shard, 0) == 0

    def test_plain_is_federated_finetune(self, scenario):
        part, cfg, model = scenario
        res = recover_variant(model, part.shards[1:], cfg, "plain_finetune", skewed_class=1)
        ref, _ = run_federated(part.shards[1:], cfg.fed, model)
        assert res.model.equals(ref)

    def test_alias(self, scenario):
        part, cfg, model = scenario
        a = recover_variant(model, part.shards[1:], cfg, "rt_smote_denoise", skewed_class=1)
        b, _ = imba_ulrc_recover(model, part.shards[1:], cfg, skewed_class=1)
        assert a.model.equals(b)

    def test_variant_skew_counts(self, scenario):
        part, cfg, model = scenario
        augs = augment_clients(part.shards[1:], 1, cfg)
        for aug in augs:
            raw = aug.shard.class_count_of(1)
            counts = [build_shard(aug, v, cfg.denoise_k).shard.class_count_of(1) for v in VARIANTS]
            assert counts == [raw, raw + aug.target_count, raw + aug.target_count]
            assert aug.target_count > 0
            assert len(aug.batch) == math.ceil(cfg.oversample_factor * aug.target_count)
            smote = build_shard(aug, "rt_smote", cfg.denoise_k).shard
            dn = build_shard(aug, "rt_smote_denoise", cfg.denoise_k).shard
            assert not np.array_equal(smote.data.features, dn.data.features)
            assert smote.generated_mask.sum() == dn.generated_mask.sum() == aug.target_count
            assert (dn.source_index[dn.generated_mask] == -1).all()

    def test_balanced_shards_reduce_to_plain(self, scenario):
        _, cfg, model = scenario
        ds = gen_synthetic(3, 20, 8, 0.15, seed=1)
        shards = [ClientShard(1, ds), ClientShard(2, ds)]
        a = recover_variant(model, shards, cfg, "rt_smote_denoise", skewed_class=0)
        b = recover_variant(model, shards, cfg, "plain_finetune", skewed_class=0)
        assert a.model.equals(b.model)
        assert all(s.manifest["skipped"] == "already balanced" for s in a.shards)

    def test_client_without_skewed_samples_is_skipped(self, scenario):
        _, cfg, _ = scenario
        ds = gen_synthetic(3, 20, 8, 0.15, seed=1)
        no_skew = ClientShard(1, ds.subset(np.flatnonzero(ds.labels != 2)))
        assert augment_client(no_skew, 2, cfg).skipped == "no skewed-class samples"

    def test_too_few_skewed_samples(self, scenario):
        _, cfg, _ = scenario
        ds = gen_synthetic(3, 20, 8, 0.15, seed=1)
        keep = np.concatenate([np.flatnonzero(ds.labels != 2), np.flatnonzero(ds.labels == 2)[:2]])
        with pytest.raises(ValidationError, match="smote_k"):
            augment_client(ClientShard(4, ds.subset(keep)), 2, cfg)

    def test_threads_do_not_change_augmentation(self, scenario):
        part, cfg, _ = scenario
        a = augment_clients(part.shards[1:], 1, cfg, threads=1)
        b = augment_clients(part.shards[1:], 1, cfg, threads=2)
        for x, y in zip(a, b):
            assert np.array_equal(x.batch.samples, y.batch.samples)

    def test_unknown_variant(self, scenario):
        part, cfg, model = scenario
        with pytest.raises(ValidationError):
            recover_variant(model, part.shards[1:], cfg, "smote_only", skewed_class=1)

    def test_recovery_config_accepts_dict(self):
        cfg = RecoveryConfig(fed={"global_rounds": 3})
        assert cfg.fed.global_rounds == 3
