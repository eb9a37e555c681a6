import math

import numpy as np
import pytest
from scipy import stats

from inflrobust import datagen as D


@pytest.fixture(scope="module")
def clean():
    return D.generate_phantoms()


@pytest.fixture(scope="module")
def noisy(clean):
    return D.apply_noise_protocol(clean, D.NoiseSpec("rician", rho_test=0.5, seed=3))


# ---------------------------------------------------------------- phantoms

def test_default_counts_and_range(clean):
    assert [len(s) for s in clean.splits()] == [600, 60, 200]
    assert clean.shape == (32, 32)
    for s in clean.splits():
        assert s.x.min() >= 0.0 and s.x.max() <= 1.0
        assert set(np.unique(s.y)) <= {0, 1, 2}
        assert not s.noisy.any()


def test_same_seed_bit_identical(clean):
    assert clean.equals(D.generate_phantoms(D.PhantomSpec(seed=0)))
    assert not clean.equals(D.generate_phantoms(D.PhantomSpec(seed=1)))


@pytest.mark.parametrize("seed", range(5))
def test_patients_never_cross_splits(seed):
    ds = D.generate_phantoms(D.PhantomSpec(seed=seed))
    ids = [set(s.patient.tolist()) for s in ds.splits()]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    _, counts = np.unique(np.concatenate([s.patient for s in ds.splits()]), return_counts=True)
    assert counts.max() <= 16


def test_linear_classifier_learns_clean_pixels(clean):
    from inflrobust.influence import fit_logistic, logistic_net
    from inflrobust import nn

    xtr = clean.train.x.reshape(len(clean.train), -1)
    xte = clean.test.x.reshape(len(clean.test), -1)
    theta = fit_logistic(xtr, clean.train.y, 3, l2=0.01)
    net = logistic_net(xtr.shape[1], 3, theta)
    acc = np.mean(nn.predict(net, xte) == clean.test.y) * 100
    assert acc >= 70.0


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        D.PhantomSpec(size=8)
    with pytest.raises(ValueError):
        D.PhantomSpec(counts=(10, 0, 5))
    with pytest.raises(ValueError):
        D.PhantomSpec(class_priors=(0.5, 0.5, 0.5))


# ------------------------------------------------------------------- noise

def test_gaussian_tiny_sigma_is_identity():
    x = np.random.default_rng(0).uniform(size=(16, 16))
    out = D.add_gaussian_noise(x, 0.0, 1e-12, np.random.default_rng(1))
    assert np.max(np.abs(out - x)) <= 1e-9


def test_gaussian_moments():
    n, sigma = 10**6, 32.0
    x = np.full(n, 0.5)
    noise = (D.add_gaussian_noise(x, 0.0, sigma, np.random.default_rng(7)) - 0.5) * 255.0
    # clipping sits 4 sigma away; its effect on the moments is far below tolerance
    assert abs(noise.mean()) <= 4 * sigma / math.sqrt(n)
    assert noise.var() == pytest.approx(sigma**2, rel=0.01)


def test_noise_output_in_unit_range():
    x = np.random.default_rng(0).uniform(size=(64, 64))
    for out in (D.add_gaussian_noise(x, 0, 200, np.random.default_rng(1)),
                D.add_rician_noise(x, 1, 200, np.random.default_rng(1))):
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_rician_nu0_is_rayleigh():
    s = D.rician_samples(0.0, 16.0, 10**6, np.random.default_rng(3))
    assert s.mean() == pytest.approx(16.0 * math.sqrt(math.pi / 2), rel=0.01)


def test_rician_mean_matches_reference_distribution():
    s = D.rician_samples(1.0, 16.0, 10**6, np.random.default_rng(4))
    # scipy's Rice(b, scale) is the independent oracle
    assert s.mean() == pytest.approx(stats.rice(b=1.0, scale=16.0).mean(), rel=0.01)
    assert s.min() >= 0.0 and s.mean() > 0.0


def test_rician_shifts_images_up():
    x = np.full((128, 128), 0.3)
    out = D.add_rician_noise(x, 1.0, 16.0, np.random.default_rng(5))
    assert out.mean() > 0.3
    assert np.all(out >= x)


def test_noise_spec_validation():
    assert D.NoiseSpec("gaussian").sigma == 32.0
    assert D.NoiseSpec("rician").sigma == 16.0
    with pytest.raises(ValueError):
        D.NoiseSpec("poisson")
    with pytest.raises(ValueError):
        D.NoiseSpec(rho_test=1.5)
    with pytest.raises(ValueError):
        D.NoiseSpec(sigma=0.0)


# ---------------------------------------------------------------- protocol

def test_protocol_flags(clean, noisy):
    assert noisy.train.noisy.all()
    assert not noisy.val.noisy.any()
    assert noisy.test.noisy.sum() == 100
    assert np.array_equal(noisy.val.x, clean.val.x)
    assert np.array_equal(noisy.test.x[~noisy.test.noisy], clean.test.x[~noisy.test.noisy])
    assert not np.array_equal(noisy.train.x, clean.train.x)
    assert np.array_equal(noisy.train.y, clean.train.y)


def test_protocol_rho_zero(clean):
    ds = D.apply_noise_protocol(clean, D.NoiseSpec("gaussian", rho_test=0.0))
    assert not ds.test.noisy.any()
    assert np.array_equal(ds.test.x, clean.test.x)


@pytest.mark.parametrize("rho,n", [(0.25, 50), (0.333, 66), (1.0, 200)])
def test_protocol_floor_count(clean, rho, n):
    assert D.apply_noise_protocol(clean, D.NoiseSpec("gaussian", rho_test=rho)).test.noisy.sum() == n


def test_noisy_subset_is_not_a_prefix(noisy):
    assert not noisy.test.noisy[:100].all()


def test_train_noise_independent_of_rho(clean):
    a = D.apply_noise_protocol(clean, D.NoiseSpec("gaussian", rho_test=0.0))
    b = D.apply_noise_protocol(clean, D.NoiseSpec("gaussian", rho_test=0.5))
    assert np.array_equal(a.train.x, b.train.x)


def test_protocol_rejects_noisy_input(noisy):
    with pytest.raises(ValueError):
        D.apply_noise_protocol(noisy, D.NoiseSpec())


# ------------------------------------------------------------------ PHTM1

def test_roundtrip_bit_exact(tmp_path, noisy):
    path = tmp_path / "d.phtm"
    D.save_dataset(noisy, path)
    back = D.load_dataset(path)
    assert back.equals(noisy)
    assert back.provenance == noisy.provenance
    assert D.dataset_bytes(back) == path.read_bytes()


def test_layout_matches_format(noisy):
    buf = D.dataset_bytes(noisy)
    assert buf[:5] == b"PHTM1"
    assert len(buf) == 5 + 12 + 4 + 1 + 860 * (2 + 4 * 32 * 32) + 8
    assert int.from_bytes(buf[5:9], "little") == 600
    assert int.from_bytes(buf[-8:], "little") == noisy.seed


def test_bad_magic():
    with pytest.raises(D.DatasetFormatError, match="PHTM1") as e:
        D.parse_dataset(b"PHTM2" + b"\0" * 40)
    assert e.value.offset == 0


def test_truncated_reports_offset(noisy):
    buf = D.dataset_bytes(noisy)
    cut = 22 + 10 * (2 + 4096) + 7
    with pytest.raises(D.DatasetFormatError, match="truncated train") as e:
        D.parse_dataset(buf[:cut])
    assert e.value.offset == 22 + 10 * (2 + 4096)
    with pytest.raises(D.DatasetFormatError, match="trailer"):
        D.parse_dataset(buf[:-3])


def test_bad_label_rejected(noisy):
    buf = bytearray(D.dataset_bytes(noisy))
    buf[22] = 9
    with pytest.raises(D.DatasetFormatError, match="label"):
        D.parse_dataset(bytes(buf))
