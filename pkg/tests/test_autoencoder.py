import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mind2mind.autoencoder import (
    AutoencoderSpec,
    ae_pushforward,
    autoencoder_config,
    encode_dataset,
    reconstruction_error,
    train_autoencoder,
)
from mind2mind.nn import AUTOENCODER_BETAS, MlpSpec, constant_network, identity_network, init_mlp
from mind2mind.ot import EmpiricalMeasure, exact_w1, lipschitz_upper

from conftest import random_measure


def test_spec_checks():
    spec = AutoencoderSpec.mlp(3, latent_dim=2, hidden=(8,))
    assert spec.latent_dim == 2 and spec.data_dim == 3
    assert spec.encoder.activations[-1] == spec.decoder.activations[-1] == "tanh"
    with pytest.raises(ValueError):
        AutoencoderSpec(MlpSpec.dense([3, 2]), MlpSpec.dense([3, 3]))
    with pytest.raises(ValueError):
        AutoencoderSpec(MlpSpec.dense([3, 2]), MlpSpec.dense([2, 4]))
    with pytest.raises(ValueError):
        AutoencoderSpec(MlpSpec.dense([3, 4, 2], batch_norm=True), MlpSpec.dense([2, 3]))


def test_default_betas():
    assert autoencoder_config().betas == AUTOENCODER_BETAS == (0.9, 0.9)


def test_zero_epochs_returns_init(rng):
    spec = AutoencoderSpec.mlp(2, 3, (4,))
    data = random_measure(rng, 10, 2, equal=True)
    enc, dec, hist = train_autoencoder(data, spec, autoencoder_config(epochs=0, seed=4))
    assert enc.equals(init_mlp(spec.encoder, 4)) and dec.equals(init_mlp(spec.decoder, 5))
    assert len(hist) == 0


def test_rejects_bad_data(rng):
    spec = AutoencoderSpec.mlp(2, 3, (4,))
    with pytest.raises(ValueError):
        train_autoencoder(EmpiricalMeasure.uniform(rng.normal(size=(5, 3))), spec)
    with pytest.raises(ValueError):
        train_autoencoder(EmpiricalMeasure.uniform(np.full((5, 2), 1.5)), spec)


def test_single_atom_is_learned():
    data = EmpiricalMeasure.uniform(np.tile([0.4, -0.7, 0.1], (32, 1)))
    spec = AutoencoderSpec.mlp(3, 8, (32,))
    cfg = autoencoder_config(epochs=200, batch_size=32, seed=0)
    enc, dec, _ = train_autoencoder(data, spec, cfg)
    assert reconstruction_error(enc, dec, data) < 1e-3


def test_training_is_deterministic(rng):
    data = random_measure(rng, 40, 2, equal=True)
    spec = AutoencoderSpec.mlp(2, 3, (8,), decoder_batch_norm=True)
    cfg = autoencoder_config(epochs=3, batch_size=16, seed=2, log_every=1)
    a = train_autoencoder(data, spec, cfg)
    b = train_autoencoder(data, spec, cfg)
    assert a[0].equals(b[0]) and a[1].equals(b[1])
    assert a[2].without_timing() == b[2].without_timing()


def test_loss_decreases_over_seeds():
    passed = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        data = EmpiricalMeasure.uniform(rng.uniform(-1, 1, size=(128, 3)))
        spec = AutoencoderSpec.mlp(3, 4, (16,))
        cfg = autoencoder_config(epochs=5, batch_size=32, seed=seed)
        enc0, dec0, _ = train_autoencoder(data, spec, autoencoder_config(epochs=0, seed=seed))
        enc, dec, _ = train_autoencoder(data, spec, cfg)
        passed += reconstruction_error(enc, dec, data) < reconstruction_error(enc0, dec0, data)
    assert passed >= 9


def test_encode_examples(rng):
    data = random_measure(rng, 7, 3)
    same = encode_dataset(identity_network(3), data)
    np.testing.assert_array_equal(same.atoms, data.atoms)
    np.testing.assert_array_equal(same.weights, data.weights)
    enc = init_mlp(AutoencoderSpec.mlp(3, 2, (4,)).encoder, 0)
    codes = encode_dataset(enc, data)
    assert codes.n == data.n
    assert exact_w1(codes, codes)[0] == 0.0
    with pytest.raises(ValueError):
        encode_dataset(enc, random_measure(rng, 3, 2))


def test_ae_pushforward_examples(rng):
    data = random_measure(rng, 6, 2)
    ident = ae_pushforward(identity_network(2), identity_network(2), data)
    assert exact_w1(ident, data)[0] == 0.0
    v = [0.25, -0.5]
    flat = ae_pushforward(identity_network(2), constant_network(2, v), data)
    assert np.all(flat.atoms == v)
    with pytest.raises(ValueError):
        ae_pushforward(identity_network(2), identity_network(3), data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_autoencoder_error_is_bounded(seed):
    rng = np.random.default_rng(seed)
    spec = AutoencoderSpec.mlp(3, 2, (5,), decoder_batch_norm=bool(seed % 2))
    enc, dec = init_mlp(spec.encoder, seed), init_mlp(spec.decoder, seed + 1)
    data = EmpiricalMeasure.uniform(rng.uniform(-1, 1, size=(12, 3)))
    rec = ae_pushforward(enc, dec, data)
    # both measures live in the cube [-1, 1]^3
    assert exact_w1(rec, data)[0] <= 2 * np.sqrt(3)
    assert np.isfinite(lipschitz_upper([enc, dec], method="svd"))
    codes = encode_dataset(enc, data)
    assert np.abs(codes.atoms).max() <= 1.0 and np.abs(rec.atoms).max() <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_encoding_commutes_with_subsampling(seed):
    rng = np.random.default_rng(seed)
    enc = init_mlp(AutoencoderSpec.mlp(4, 3, (6,)).encoder, seed)
    data = random_measure(rng, 15, 4)
    idx = np.sort(rng.choice(15, size=6, replace=False))
    a = encode_dataset(enc, data).subset(idx)
    b = encode_dataset(enc, data.subset(idx))
    np.testing.assert_allclose(a.atoms, b.atoms, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(a.weights, b.weights)
