import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sada import data, spectral
from sada.data import DomainShiftSpec
from sada.errors import IDXFormatError, InvalidInputError


def idx_bytes(code, dims, payload):
    return bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload


@given(
    arrays(
        st.sampled_from([np.uint8, np.int16, np.int32, np.float32, np.float64]),
        st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
        elements=st.integers(0, 100),
    ),
    st.booleans(),
)
@settings(max_examples=50, deadline=None)
def test_idx_round_trip(tmp_path_factory, a, gz):
    path = tmp_path_factory.mktemp("idx") / ("a.idx.gz" if gz else "a.idx")
    data.write_idx(path, a)
    back = data.read_idx(path)
    assert back.dtype == a.dtype and back.shape == a.shape
    np.testing.assert_array_equal(back, a)


def test_idx_hand_built_matches(tmp_path):
    (tmp_path / "x.idx").write_bytes(idx_bytes(0x08, (2, 3), bytes(range(6))))
    np.testing.assert_array_equal(data.read_idx(tmp_path / "x.idx"), [[0, 1, 2], [3, 4, 5]])
    (tmp_path / "y.idx").write_bytes(idx_bytes(0x0C, (2,), struct.pack(">2i", -7, 300)))
    np.testing.assert_array_equal(data.read_idx(tmp_path / "y.idx"), [-7, 300])


def test_idx_gzip_is_reproducible(tmp_path):
    a = np.arange(12, dtype=np.uint8).reshape(3, 4)
    data.write_idx(tmp_path / "a.idx.gz", a)
    data.write_idx(tmp_path / "b.idx.gz", a)
    assert (tmp_path / "a.idx.gz").read_bytes() == (tmp_path / "b.idx.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.idx.gz").read_bytes()) == idx_bytes(0x08, (3, 4), a.tobytes())


@pytest.mark.parametrize(
    "raw, offset, match",
    [
        (b"\x00\x00", 2, "too short"),
        (b"\x01\x00\x08\x01" + b"\x00" * 8, 0, "magic"),
        (b"\x00\x00\x07\x01" + b"\x00" * 8, 2, "element type"),
        (b"\x00\x00\x08\x02\x00\x00\x00\x01", 8, "header"),
        (idx_bytes(0x08, (4,), b"\x01\x02"), 10, "truncated payload"),
        (idx_bytes(0x08, (2,), b"\x01\x02\x03"), 10, "trailing"),
    ],
)
def test_idx_errors_report_offset(tmp_path, raw, offset, match):
    (tmp_path / "bad.idx").write_bytes(raw)
    with pytest.raises(IDXFormatError, match=match) as err:
        data.read_idx(tmp_path / "bad.idx")
    assert err.value.offset == offset
    assert f"byte offset {offset}" in str(err.value)


def test_load_idx_pair(tmp_path):
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    data.write_idx(tmp_path / "i.idx", imgs)
    data.write_idx(tmp_path / "l.idx", np.array([4, 7], dtype=np.uint8))
    ds = data.load_idx(tmp_path / "i.idx", tmp_path / "l.idx", rgb=True)
    assert ds.images.shape == (2, 3, 3, 3)
    np.testing.assert_allclose(ds.images[1, 2], imgs[1] / 255.0, rtol=1e-6)
    data.write_idx(tmp_path / "l3.idx", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(InvalidInputError):
        data.load_idx(tmp_path / "i.idx", tmp_path / "l3.idx")


def test_dataset_save_load(tmp_path, rng):
    ds = data.Dataset(rng.random((5, 1, 4, 4)), rng.integers(0, 3, 5), "toy", "test", {"k": 1})
    data.save_dataset(ds, tmp_path / "d")
    back = data.load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.images, ds.images)
    assert back.fingerprint == ds.fingerprint and back.meta == {"k": 1}
    data.write_idx(tmp_path / "d" / "labels.idx", np.zeros(5, dtype=np.uint8))
    with pytest.raises(InvalidInputError, match="fingerprint"):
        data.load_dataset(tmp_path / "d")


def test_dataset_validation(rng):
    with pytest.raises(InvalidInputError):
        data.Dataset(rng.random((2, 4, 4)), [0, 1])
    with pytest.raises(InvalidInputError):
        data.Dataset(rng.random((2, 1, 4, 4)), [0])


def test_mnist5k_split(mnist):
    train, test = mnist
    assert len(train) == 4000 and len(test) == 1000
    assert train.shape == (1, 28, 28)
    assert np.bincount(test.labels).tolist() == [100] * 10
    assert train.images.min() >= 0 and train.images.max() <= 1
    assert train.fingerprint == data.mnist5k()[0].fingerprint


def test_shift_spec_validation():
    with pytest.raises(InvalidInputError):
        DomainShiftSpec("fog")
    with pytest.raises(InvalidInputError):
        DomainShiftSpec("blur", 6)
    with pytest.raises(InvalidInputError):
        DomainShiftSpec("blur", 2, (("sigma", -1.0),))
    s = DomainShiftSpec("blur", 2, (("sigma", 0.3),))
    assert DomainShiftSpec.from_dict(s.to_dict()) == s and s.label == "blur-s2"


def test_low_band_mask():
    m = data.low_band_mask(8, 8, 1)
    assert m.sum() == 9 and m[4, 4] and m[3, 5] and not m[2, 4]
    with pytest.raises(InvalidInputError):
        data.low_band_mask(8, 8, 4)


def test_lowfreq_shift_scales_band_and_keeps_phase(rng):
    base = data.Dataset(rng.random((3, 1, 16, 16)) * 0.2 + 0.1, [0, 1, 2])
    spec = DomainShiftSpec("amplitude_scale_lowfreq", 2, (("radius", 1),))
    shifted = data.shift_spectrum(base.images, spec, rng)
    orig = spectral.decompose(base.images)
    band = data.low_band_mask(16, 16, 1)
    np.testing.assert_allclose(shifted.amplitude[..., band], 2.0 * orig.amplitude[..., band])
    np.testing.assert_array_equal(shifted.amplitude[..., ~band], orig.amplitude[..., ~band])
    np.testing.assert_array_equal(shifted.phase, orig.phase)
    # unclamped reconstruction keeps the phase exactly where amplitude is nonzero
    x = spectral.combine(shifted.amplitude, shifted.phase)
    back = spectral.decompose(x)
    keep = back.amplitude > 1e-8
    assert np.max(np.abs(np.angle(np.exp(1j * (back.phase - orig.phase)))[keep])) < 1e-8


def test_swap_shift_full_strength_takes_partner_band(rng):
    base = rng.random((4, 1, 8, 8))
    spec = DomainShiftSpec("amplitude_swap", 5)
    shifted = data.shift_spectrum(base, spec, np.random.default_rng(0))
    partner = np.random.default_rng(0).permutation(4)
    band = data.low_band_mask(8, 8, 1)
    orig = spectral.decompose(base).amplitude
    np.testing.assert_allclose(shifted.amplitude[..., band], orig[partner][..., band])
    with pytest.raises(InvalidInputError):
        data.shift_spectrum(base, DomainShiftSpec("blur", 1), rng)


def test_severity_zero_is_identity(rng):
    ds = data.Dataset(rng.random((3, 1, 8, 8)), [0, 1, 2])
    for kind in data.SHIFT_KINDS:
        np.testing.assert_array_equal(data.corrupt(ds, DomainShiftSpec(kind, 0)).images, ds.images)


def psnr(a, b):
    return 10 * np.log10(1.0 / np.mean((a - b) ** 2))


@pytest.mark.parametrize("kind", ["gaussian_noise", "blur", "contrast", "pixelate", "amplitude_scale_lowfreq"])
def test_severity_monotone_psnr(mnist, kind):
    ds = mnist[1].subset(np.arange(100))
    values = [psnr(data.corrupt(ds, DomainShiftSpec(kind, s), seed=0).images, ds.images) for s in range(1, 6)]
    assert all(a > b for a, b in zip(values, values[1:])), values


def test_blur_removes_high_frequencies(mnist):
    ds = mnist[1].subset(np.arange(50))
    band = data.low_band_mask(28, 28, 7)

    def high_energy(x):
        return float((spectral.decompose(x).amplitude[..., ~band] ** 2).sum())

    energies = [high_energy(data.corrupt(ds, DomainShiftSpec("blur", s)).images) for s in range(0, 6)]
    assert all(a > b for a, b in zip(energies, energies[1:]))


def test_corrupt_deterministic_and_labelled(rng):
    ds = data.Dataset(rng.random((4, 1, 8, 8)), [0, 1, 2, 0], "toy")
    a = data.corrupt(ds, {"kind": "gaussian_noise", "severity": 3}, seed=5)
    b = data.corrupt(ds, DomainShiftSpec("gaussian_noise", 3), seed=5)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.name == "toy:gaussian_noise-s3"
    assert a.images.min() >= 0 and a.images.max() <= 1
    np.testing.assert_array_equal(a.labels, ds.labels)


def test_synth_domain_pair(rng):
    base = data.Dataset(rng.random((2, 1, 8, 8)), [0, 1], "toy")
    src, tgt = data.synth_domain_pair(base, DomainShiftSpec("amplitude_scale_lowfreq", 3), seed=1)
    assert src is base
    assert tgt.meta["shift"]["kind"] == "amplitude_scale_lowfreq"
    assert not np.array_equal(tgt.images, base.images)
