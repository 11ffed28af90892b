import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sada import spectral
from sada.errors import InvalidInputError


def dft2_bruteforce(x):
    """Unitary 2-D DFT by explicit summation, centered."""
    H, W = x.shape
    m = np.arange(H)[:, None]
    n = np.arange(W)[None, :]
    out = np.zeros((H, W), dtype=complex)
    for ki in range(H):
        for kj in range(W):
            out[ki, kj] = np.sum(x * np.exp(-2j * np.pi * (ki * m / H + kj * n / W)))
    out /= np.sqrt(H * W)
    return np.roll(out, (H // 2, W // 2), axis=(0, 1))


def idft2_bruteforce(z_centered):
    H, W = z_centered.shape
    z = np.roll(z_centered, (-(H // 2), -(W // 2)), axis=(0, 1))
    m = np.arange(H)[:, None]
    n = np.arange(W)[None, :]
    out = np.zeros((H, W), dtype=complex)
    for ki in range(H):
        for kj in range(W):
            out += z[ki, kj] * np.exp(2j * np.pi * (ki * m / H + kj * n / W))
    return out / np.sqrt(H * W)


images = arrays(
    np.float64,
    st.tuples(st.integers(1, 3), st.integers(2, 12), st.integers(2, 12)),
    elements=st.floats(0, 1),
)


@given(images)
@settings(max_examples=60, deadline=None)
def test_round_trip(x):
    assert np.max(np.abs(spectral.reconstruct(spectral.decompose(x)) - x)) < 1e-5


@given(images)
@settings(max_examples=40, deadline=None)
def test_parseval(x):
    z = spectral.centered_fft(x)
    assert np.isclose(np.linalg.norm(x), np.linalg.norm(z), atol=1e-5)


def test_constant_image_only_dc():
    sp = spectral.decompose(np.full((4, 4), 0.5))
    expected = np.zeros((4, 4))
    expected[2, 2] = 0.5 * 4  # unitary DC = sum / sqrt(HW)
    np.testing.assert_allclose(sp.amplitude, expected, atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 8), (7, 5), (6, 9)])
def test_decompose_matches_bruteforce_and_is_symmetric(shape):
    x = np.random.default_rng(1).random(shape)
    ref = dft2_bruteforce(x)
    sp = spectral.decompose(x)
    np.testing.assert_allclose(sp.amplitude, np.abs(ref), atol=1e-10)
    rows, cols = spectral.twin_index_grids(*shape)
    np.testing.assert_allclose(sp.amplitude, sp.amplitude[rows, cols], atol=1e-12)
    # the brute-force oracle agrees on the twin relation too
    np.testing.assert_allclose(np.abs(ref), np.abs(ref[rows, cols]), atol=1e-10)


def test_decompose_rejects_nonfinite():
    x = np.zeros((4, 4))
    x[1, 1] = np.nan
    with pytest.raises(InvalidInputError):
        spectral.decompose(x)


def test_reconstruct_shape_mismatch():
    with pytest.raises(InvalidInputError):
        spectral.SpectrumPair(np.ones((4, 4)), np.zeros((4, 5)))


def test_reconstruct_zero_amplitude():
    sp = spectral.SpectrumPair(np.zeros((2, 6, 6)), np.random.default_rng(0).uniform(-3, 3, (2, 6, 6)))
    assert np.all(spectral.reconstruct(sp) == 0)


def test_reconstruct_asymmetric_reports_imaginary_residual():
    rng = np.random.default_rng(3)
    amp = rng.random((8, 8))
    phase = rng.uniform(-np.pi, np.pi, (8, 8))
    out, residual = spectral.reconstruct(spectral.SpectrumPair(amp, phase), clamp=False, return_residual=True)
    oracle = idft2_bruteforce(amp * np.exp(1j * phase))
    np.testing.assert_allclose(out, oracle.real, atol=1e-10)
    assert residual == pytest.approx(np.max(np.abs(oracle.imag)), abs=1e-10)
    assert residual > 1e-3


def test_reconstruct_symmetric_has_no_residual():
    x = np.random.default_rng(0).random((3, 8, 8))
    _, residual = spectral.reconstruct(spectral.decompose(x), return_residual=True)
    assert residual < 1e-12


def test_reconstruct_rejects_negative_amplitude():
    with pytest.raises(InvalidInputError):
        spectral.reconstruct(spectral.SpectrumPair(-np.ones((4, 4)), np.zeros((4, 4))))


def test_dc_basis():
    u = spectral.basis_image(0, 0, 4, 4)
    np.testing.assert_allclose(u, np.full((4, 4), 1 / 4), atol=1e-12)


def test_basis_vertical_cosine_matches_direct_construction():
    u = spectral.basis_image(1, 0, 8, 8)
    m = np.arange(8)[:, None] * np.ones((1, 8))
    z = np.zeros((8, 8), dtype=complex)
    z[5, 4] = z[3, 4] = 1
    brute = idft2_bruteforce(z).real
    np.testing.assert_allclose(u, brute / np.linalg.norm(brute), atol=1e-12)
    direct = np.cos(2 * np.pi * m / 8)
    np.testing.assert_allclose(u, direct / np.linalg.norm(direct), atol=1e-12)


@pytest.mark.parametrize("H,W", [(8, 8), (7, 6), (5, 5)])
def test_basis_properties_all_bins(H, W):
    lo_i, hi_i = spectral.frequency_bounds(H)
    lo_j, hi_j = spectral.frequency_bounds(W)
    for i in range(lo_i, hi_i + 1):
        for j in range(lo_j, hi_j + 1):
            u = spectral.basis_image(i, j, H, W)
            assert abs(np.linalg.norm(u) - 1) < 1e-6
            ti, tj = spectral.twin_frequency(i, j, H, W)
            assert np.array_equal(u, spectral.basis_image(ti, tj, H, W))
            z = np.abs(spectral.centered_fft(u))
            support = {tuple(p) for p in np.argwhere(z > 1e-9)}
            assert support == {(i + H // 2, j + W // 2), (ti + H // 2, tj + W // 2)}


def test_basis_out_of_range():
    with pytest.raises(InvalidInputError):
        spectral.basis_image(4, 0, 8, 8)
    with pytest.raises(InvalidInputError):
        spectral.basis_image(0, -5, 8, 8)


def test_basis_noise_scaling_and_sign():
    assert np.all(spectral.basis_noise(2, 1, 0.0, 1, 8, 8) == 0)
    neg = spectral.basis_noise(2, 1, 0.2, -1, 8, 8)
    pos = spectral.basis_noise(2, 1, 0.2, 1, 8, 8)
    np.testing.assert_allclose(neg, -0.2 * spectral.basis_image(2, 1, 8, 8))
    assert np.linalg.norm(neg) == pytest.approx(0.2, abs=1e-9)
    np.testing.assert_array_equal(pos, -neg)
    with pytest.raises(InvalidInputError):
        spectral.basis_noise(0, 0, -0.1, 1, 8, 8)
    with pytest.raises(InvalidInputError):
        spectral.basis_noise(0, 0, 0.1, 0, 8, 8)


def test_basis_noise_touches_only_its_pair():
    x = np.random.default_rng(5).random((8, 8))
    i, j = -2, 3
    delta = spectral.centered_fft(x + spectral.basis_noise(i, j, 0.7, 1, 8, 8)) - spectral.centered_fft(x)
    ti, tj = spectral.twin_frequency(i, j, 8, 8)
    mask = np.ones((8, 8), dtype=bool)
    mask[i + 4, j + 4] = mask[ti + 4, tj + 4] = False
    assert np.max(np.abs(delta[mask])) < 1e-6
    assert np.abs(delta[i + 4, j + 4]) > 0.1


def test_amplitude_modulated_noise():
    vals = np.zeros((6, 6))
    vals[3, 4] = 1.5
    D = spectral.MeanAmplitudeSpectrum(vals, "fp")
    assert np.all(spectral.amplitude_modulated_noise(1, -1, D, 1) == 0)
    n = spectral.amplitude_modulated_noise(0, 1, D, -1)
    assert np.linalg.norm(n) == pytest.approx(1.5)
    with pytest.raises(InvalidInputError):
        spectral.amplitude_modulated_noise(3, 0, D, 1)


def test_mean_amplitude_identical_images_dc_dominates():
    x = np.random.default_rng(2).random((1, 8, 8))
    data = np.repeat(x[None], 5, axis=0)
    D = spectral.mean_amplitude(data, fft_norm="ortho")
    brute = np.abs(dft2_bruteforce(x[0]))
    np.testing.assert_allclose(D.values, brute, atol=1e-10)
    noise = [np.linalg.norm(spectral.amplitude_modulated_noise(i, j, D, 1)) for i, j in spectral.frequency_pairs(8, 8)]
    assert np.argmax(noise) == spectral.frequency_pairs(8, 8).index((0, 0))


def test_mean_amplitude_single_image():
    x = np.random.default_rng(0).random((1, 1, 6, 6))
    np.testing.assert_allclose(spectral.mean_amplitude(x, fft_norm="ortho").values, spectral.decompose(x[0, 0]).amplitude)
    # default scale is the unnormalized FFT magnitude
    np.testing.assert_allclose(spectral.mean_amplitude(x).values, np.abs(np.fft.fftshift(np.fft.fft2(x[0, 0]))))


def test_mean_amplitude_image_and_negative():
    x = np.random.default_rng(9).random((6, 6))
    D = spectral.mean_amplitude([x[None], (1 - x)[None]], fft_norm="ortho")
    a, b = np.abs(dft2_bruteforce(x)), np.abs(dft2_bruteforce(1 - x))
    np.testing.assert_allclose(D.values, (a + b) / 2, atol=1e-10)
    # off-DC the two spectra coincide
    mask = np.ones((6, 6), dtype=bool)
    mask[3, 3] = False
    np.testing.assert_allclose(a[mask], b[mask], atol=1e-10)


def test_mean_amplitude_rgb_channel_average():
    x = np.random.default_rng(4).random((3, 3, 5, 5))
    per_channel = np.mean([[spectral.decompose(c).amplitude for c in img] for img in x], axis=0)
    np.testing.assert_allclose(spectral.mean_amplitude(x, fft_norm="ortho").values, per_channel.mean(axis=0))


def test_mean_amplitude_errors():
    with pytest.raises(InvalidInputError):
        spectral.mean_amplitude([])
    with pytest.raises(InvalidInputError):
        spectral.mean_amplitude([np.zeros((1, 4, 4)), np.zeros((1, 5, 5))])


def test_mean_amplitude_permutation_invariant():
    x = np.random.default_rng(6).random((10, 1, 8, 8))
    a = spectral.mean_amplitude(x).values
    b = spectral.mean_amplitude(x[::-1].copy()).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_mean_amplitude_decays_from_dc_on_digits(mnist):
    train, _ = mnist
    D = spectral.mean_amplitude(train.images[:100]).values
    H, W = D.shape
    assert np.argmax(D) == (H // 2) * W + W // 2
    fi = np.abs(np.arange(H) - H // 2)[:, None]
    fj = np.abs(np.arange(W) - W // 2)[None, :]
    radius = np.maximum(fi, fj)
    ring_means = [D[radius == r].mean() for r in range(H // 2)]
    assert ring_means[0] > ring_means[1] > ring_means[4] > ring_means[-1]


def test_mean_amplitude_csv_round_trip(tmp_path):
    D = spectral.mean_amplitude(np.random.default_rng(0).random((4, 1, 6, 7)))
    spectral.save_mean_amplitude(D, tmp_path / "D")
    back = spectral.load_mean_amplitude(tmp_path / "D")
    np.testing.assert_array_equal(back.values, D.values)
    assert back.source_fingerprint == D.source_fingerprint
    assert back.fingerprint == D.fingerprint
    assert back.fft_norm == "backward"


def test_mean_amplitude_bad_norm():
    with pytest.raises(InvalidInputError):
        spectral.mean_amplitude(np.zeros((1, 1, 4, 4)), fft_norm="forward")
