"""Desk-scale source/target data.

IDX containers (the MNIST file format), the 5,000-digit MNIST sample that
ships with ``mlxtend``, synthetic amplitude-shifted target domains and a
small set of parameterized stand-in corruptions.
"""

import gzip
import importlib.util
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from sada import spectral
from sada._util import fingerprint_arrays, read_json, write_json
from sada.errors import IDXFormatError, InvalidInputError

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder(">").str: k for k, v in _IDX_DTYPES.items()}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidInputError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InvalidInputError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def fingerprint(self):
        return fingerprint_arrays(self.images, self.labels)

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], name or self.name, self.split, dict(self.meta))

    def manifest(self):
        return {
            "name": self.name,
            "split": self.split,
            "n": len(self),
            "shape": list(self.shape),
            "fingerprint": self.fingerprint,
            "meta": self.meta,
        }


def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path):
    """Parse an IDX file (optionally gzipped) into a numpy array in native byte order."""
    raw = _open(path)
    if len(raw) < 4:
        raise IDXFormatError("file too short for the 4-byte magic number", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IDXFormatError(f"bad magic prefix {raw[:2].hex()}", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise IDXFormatError(f"unknown element type 0x{code:02x}", 2)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IDXFormatError(f"truncated header: expected {ndim} dimension fields", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = raw[header_end:]
    if len(payload) < expected:
        raise IDXFormatError(f"truncated payload: need {expected} bytes, have {len(payload)}", len(raw))
    if len(payload) > expected:
        raise IDXFormatError(f"{len(payload) - expected} trailing bytes", header_end + expected)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    be = array.dtype.newbyteorder(">")
    if be.str not in _IDX_CODES:
        raise InvalidInputError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, _IDX_CODES[be.str], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.astype(be).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)
    return path


def load_idx(images_path, labels_path, rgb=False, name=None, split="train"):
    """Image + label IDX pair -> Dataset scaled to [0, 1].

    ``rgb=True`` replicates a single gray channel three times.
    """
    raw = read_idx(images_path)
    labels = read_idx(labels_path)
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim != 4:
        raise InvalidInputError(f"image IDX must be 3-D or 4-D, got {raw.ndim}-D")
    if len(raw) != len(labels):
        raise InvalidInputError(f"{len(raw)} images but {len(labels)} labels")
    images = raw.astype(np.float32) / 255.0 if raw.dtype == np.uint8 else raw.astype(np.float32)
    if rgb and images.shape[1] == 1:
        images = np.repeat(images, 3, axis=1)
    return Dataset(images, labels, name or Path(images_path).name, split)


def save_dataset(dataset, directory):
    """IDX pair + JSON manifest. Images are stored as float32 so the round trip is exact."""
    directory = Path(directory)
    write_idx(directory / "images.idx", dataset.images)
    write_idx(directory / "labels.idx", dataset.labels.astype(np.uint8 if dataset.labels.max(initial=0) < 256 else np.int32))
    write_json(directory / "manifest.json", dataset.manifest())
    return directory


def load_dataset(directory):
    directory = Path(directory)
    m = read_json(directory / "manifest.json")
    ds = Dataset(read_idx(directory / "images.idx"), read_idx(directory / "labels.idx"), m["name"], m["split"], m.get("meta", {}))
    if ds.fingerprint != m["fingerprint"]:
        raise InvalidInputError(f"dataset at {directory} does not match its manifest fingerprint")
    return ds


def _mlxtend_mnist_path():
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("the MNIST sample ships with mlxtend; pip install mlxtend")
    path = Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not path.is_file():
        raise FileNotFoundError(f"expected MNIST sample at {path}")
    return path


@lru_cache(maxsize=1)
def _mnist5k_arrays():
    table = np.loadtxt(_mlxtend_mnist_path(), delimiter=",", dtype=np.float32)
    images = (table[:, :-1] / 255.0).reshape(-1, 1, 28, 28)
    labels = table[:, -1].astype(np.int64)
    return images, labels


def mnist5k(n_test_per_class=100, seed=0, rgb=False):
    """The 5,000-digit MNIST sample split into stratified train/test sets.

    Default split: 400 train + 100 test images per class (4,000 / 1,000).
    """
    images, labels = _mnist5k_arrays()
    rng = np.random.default_rng(seed)
    test_idx = np.concatenate(
        [rng.choice(np.flatnonzero(labels == c), n_test_per_class, replace=False) for c in np.unique(labels)]
    )
    test_idx.sort()
    train_mask = np.ones(len(labels), dtype=bool)
    train_mask[test_idx] = False
    if rgb:
        images = np.repeat(images, 3, axis=1)
    meta = {"source": "mlxtend mnist_5k", "split_seed": seed}
    train = Dataset(images[train_mask], labels[train_mask], "mnist5k", "train", meta)
    test = Dataset(images[test_idx], labels[test_idx], "mnist5k", "test", meta)
    return train, test


SHIFT_KINDS = ("amplitude_scale_lowfreq", "amplitude_swap", "gaussian_noise", "blur", "contrast", "pixelate")

# severity 1..5 -> parameter; index 0 is the identity
GAUSSIAN_SIGMA = (0.0, 0.04, 0.06, 0.08, 0.09, 0.10)
BLUR_SIGMA = (0.0, 0.5, 0.75, 1.0, 1.25, 1.5)
CONTRAST_FACTOR = (1.0, 0.75, 0.6, 0.5, 0.4, 0.3)
PIXELATE_SCALE = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
LOWFREQ_FACTOR = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
SWAP_STRENGTH = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class DomainShiftSpec:
    """A shift family at severity 0 (identity) to 5.

    ``params`` may override the severity table: ``factor`` (low-frequency
    amplitude scale), ``radius`` (half-width of the low band in bins),
    ``sigma``, ``strength``, ``scale``.
    """

    kind: str
    severity: int = 3
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise InvalidInputError(f"unknown shift kind '{self.kind}'; choose from {SHIFT_KINDS}")
        if not 0 <= self.severity <= 5:
            raise InvalidInputError("severity must lie in 0..5")
        params = dict(self.params)
        for k, v in params.items():
            if not (isinstance(v, (int, float)) and v > 0):
                raise InvalidInputError(f"shift parameter {k}={v} must be positive")
        object.__setattr__(self, "params", tuple(sorted(params.items())))

    def param(self, key, default):
        return dict(self.params).get(key, default)

    @property
    def label(self):
        return f"{self.kind}-s{self.severity}"

    def to_dict(self):
        return {"kind": self.kind, "severity": self.severity, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d.get("severity", 3)), tuple(dict(d.get("params", {})).items()))


def low_band_mask(H, W, radius):
    """Centered square of bins with ``|i| <= radius`` and ``|j| <= radius``."""
    lo_i, hi_i = spectral.frequency_bounds(H)
    lo_j, hi_j = spectral.frequency_bounds(W)
    if radius < 0 or radius > min(-lo_i, hi_i, -lo_j, hi_j):
        raise InvalidInputError(f"band radius {radius} falls outside the {H}x{W} frequency grid")
    fi = np.arange(H) - H // 2
    fj = np.arange(W) - W // 2
    return (np.abs(fi)[:, None] <= radius) & (np.abs(fj)[None, :] <= radius)


def _default_radius(H, W):
    return max(1, min(H, W) // 8)


def shift_spectrum(images, shift, rng):
    """Amplitude-shifted spectra of ``images`` with the phase passed through untouched."""
    spec = spectral.decompose(images)
    if shift.severity == 0:
        return spec
    H, W = images.shape[-2:]
    band = low_band_mask(H, W, int(shift.param("radius", _default_radius(H, W))))
    A = spec.amplitude.copy()
    if shift.kind == "amplitude_scale_lowfreq":
        factor = shift.param("factor", LOWFREQ_FACTOR[shift.severity])
        A[..., band] *= factor
    elif shift.kind == "amplitude_swap":
        # blend each image's low band toward that of a randomly paired image
        strength = min(1.0, shift.param("strength", SWAP_STRENGTH[shift.severity]))
        partner = rng.permutation(len(A))
        A[..., band] = (1 - strength) * A[..., band] + strength * spec.amplitude[partner][..., band]
    else:
        raise InvalidInputError(f"'{shift.kind}' is not an amplitude shift")
    return spectral.SpectrumPair(A, spec.phase)


def synth_domain_pair(base, shift, seed=0):
    """(source, target) where target carries an amplitude shift of every image. Labels are shared."""
    rng = np.random.default_rng(seed)
    spec = shift_spectrum(base.images, shift, rng)
    if shift.severity == 0:
        target_images = base.images.copy()
    else:
        target_images = np.clip(spectral.combine(spec.amplitude, spec.phase), 0, 1)
    meta = dict(base.meta, shift=shift.to_dict(), shift_seed=seed)
    target = Dataset(target_images, base.labels.copy(), f"{base.name}:{shift.label}", base.split, meta)
    return base, target


def _gaussian_blur(x, sigma):
    return ndimage.gaussian_filter(x, sigma=(0, 0, sigma, sigma), mode="reflect")


def _pixelate(x, scale):
    """Box-downsample to ``scale`` of the size, then box-upsample back."""
    N, C, H, W = x.shape
    h, w = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    out = np.empty_like(x)
    for n in range(N):
        for c in range(C):
            im = Image.fromarray(x[n, c].astype(np.float32), mode="F")
            out[n, c] = np.asarray(im.resize((w, h), Image.BOX).resize((W, H), Image.BOX))
    return out


def corrupt(dataset, spec, seed=0):
    """Apply a stand-in corruption (or an amplitude shift) to every image.

    Deterministic in ``(spec, seed)``; output pixels are clamped to [0, 1].
    """
    if not isinstance(spec, DomainShiftSpec):
        spec = DomainShiftSpec.from_dict(spec)
    if spec.severity == 0:
        return replace(dataset, images=dataset.images.copy(), labels=dataset.labels.copy(), meta=dict(dataset.meta))
    rng = np.random.default_rng(seed)
    x = dataset.images.astype(np.float64)
    s = spec.severity
    if spec.kind in ("amplitude_scale_lowfreq", "amplitude_swap"):
        return synth_domain_pair(dataset, spec, seed)[1]
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(0.0, spec.param("sigma", GAUSSIAN_SIGMA[s]), size=x.shape)
    elif spec.kind == "blur":
        x = _gaussian_blur(x, spec.param("sigma", BLUR_SIGMA[s]))
    elif spec.kind == "contrast":
        c = spec.param("factor", CONTRAST_FACTOR[s])
        mean = x.mean(axis=(-2, -1), keepdims=True)
        x = (x - mean) * c + mean
    elif spec.kind == "pixelate":
        x = _pixelate(x, spec.param("scale", PIXELATE_SCALE[s]))
    meta = dict(dataset.meta, corruption=spec.to_dict(), corruption_seed=seed)
    return Dataset(np.clip(x, 0, 1), dataset.labels.copy(), f"{dataset.name}:{spec.label}", dataset.split, meta)
