"""Per-frequency model sensitivity maps.

For each conjugate frequency pair the dataset is perturbed by signed Fourier
basis noise and the model's top-1 error rate is recorded. The noise level is
either a constant (``original``) or the mean source amplitude at that bin
(``amplitude_modulated``). Twin bins share one perturbed image, so only the
canonical half-plane is evaluated and the result is mirrored.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from sada import spectral
from sada._util import fingerprint_arrays, read_grid_csv, read_json, write_grid_csv, write_json
from sada.errors import InvalidInputError, SadaError

log = logging.getLogger(__name__)

ORIGINAL = "original"
MODULATED = "amplitude_modulated"


@dataclass(frozen=True)
class NoiseModel:
    kind: str
    epsilon: float = None
    D: spectral.MeanAmplitudeSpectrum = None

    @classmethod
    def original(cls, epsilon):
        if epsilon < 0:
            raise InvalidInputError("epsilon must be nonnegative")
        return cls(ORIGINAL, epsilon=float(epsilon))

    @classmethod
    def modulated(cls, D):
        return cls(MODULATED, D=D)

    def scale(self, i, j):
        if self.kind == ORIGINAL:
            return self.epsilon
        return self.D.at(i, j)


@dataclass
class SensitivityMap:
    values: np.ndarray
    kind: str
    epsilon: float = None
    d_fingerprint: str = None
    model_fingerprint: str = None
    dataset_fingerprint: str = None
    n_samples_per_bin: int = 0
    seed: int = 0
    fraction: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise InvalidInputError("sensitivity map must be a 2-D grid")
        if np.any(v < 0) or np.any(v > 1):
            raise InvalidInputError("sensitivity values must lie in [0, 1]")
        self.values = v

    def metadata(self):
        return {
            "kind": self.kind,
            "epsilon": self.epsilon,
            "D_fingerprint": self.d_fingerprint,
            "model_fingerprint": self.model_fingerprint,
            "dataset_fingerprint": self.dataset_fingerprint,
            "seed": self.seed,
            "fraction": self.fraction,
            "n_samples_per_bin": self.n_samples_per_bin,
            "height": self.values.shape[0],
            "width": self.values.shape[1],
        }


def _bin_rng(seed, pair_index):
    # one independent stream per (seed, bin pair): order- and worker-independent
    return np.random.default_rng([int(seed), int(pair_index)])


def compute_map(model, images, labels, noise, seed=0, sample_fraction=1.0, progress=False):
    """Top-1 error rate of ``model`` under basis noise at every frequency.

    Args:
      model: a ModelOracle.
      images: ``(N, C, H, W)`` source images. Noise is added unclamped.
      labels: ``(N,)`` integer labels.
      noise: :class:`NoiseModel`.
      seed: drives the per-image sign draws and per-bin subsampling.
      sample_fraction: fraction of images evaluated at each bin, in (0, 1].

    Returns:
      SensitivityMap on the images' ``H x W`` grid.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise InvalidInputError("cannot compute a sensitivity map on an empty dataset")
    if images.ndim != 4:
        raise InvalidInputError(f"expected (N, C, H, W) images, got shape {images.shape}")
    if not 0 < sample_fraction <= 1:
        raise InvalidInputError("sample_fraction must lie in (0, 1]")
    N, _, H, W = images.shape
    if noise.kind == MODULATED and noise.D.shape != (H, W):
        raise InvalidInputError(f"mean amplitude grid {noise.D.shape} does not match images {H}x{W}")
    n_sub = N if sample_fraction == 1 else max(1, int(round(sample_fraction * N)))

    values = np.zeros((H, W))
    pairs = spectral.frequency_pairs(H, W)
    t0 = time.perf_counter()
    for k, (i, j) in enumerate(pairs):
        rng = _bin_rng(seed, k)
        idx = np.arange(N) if n_sub == N else np.sort(rng.choice(N, n_sub, replace=False))
        r = rng.choice(np.array([-1.0, 1.0]), size=n_sub)
        u = spectral.basis_image(i, j, H, W) * noise.scale(i, j)
        perturbed = images[idx] + (r[:, None, None, None] * u[None, None]).astype(np.float32)
        try:
            pred = model.predict(perturbed)
        except Exception as e:
            raise SadaError(f"model prediction failed at frequency ({i}, {j})") from e
        err = float(np.mean(pred != labels[idx]))
        ti, tj = spectral.twin_frequency(i, j, H, W)
        values[i + H // 2, j + W // 2] = err
        values[ti + H // 2, tj + W // 2] = err
        if progress and k % 50 == 0:
            log.info("sensitivity bin %d/%d (%.1fs)", k + 1, len(pairs), time.perf_counter() - t0)

    return SensitivityMap(
        values=values,
        kind=noise.kind,
        epsilon=noise.epsilon,
        d_fingerprint=noise.D.fingerprint if noise.D is not None else None,
        model_fingerprint=model.fingerprint,
        dataset_fingerprint=fingerprint_arrays(images, np.asarray(labels, dtype=np.int64)),
        n_samples_per_bin=n_sub,
        seed=seed,
        fraction=sample_fraction,
    )


def map_l1_summary(smap):
    """Mean absolute value over all bins."""
    values = smap.values if isinstance(smap, SensitivityMap) else np.asarray(smap)
    return float(np.mean(np.abs(values)))


def low_high_means(values):
    """Mean over the central ``H/2 x W/2`` block and over its complement."""
    values = np.asarray(values)
    H, W = values.shape
    r0, c0 = H // 2 - H // 4, W // 2 - W // 4
    mask = np.zeros((H, W), dtype=bool)
    mask[r0:r0 + H // 2, c0:c0 + W // 2] = True
    return float(values[mask].mean()), float(values[~mask].mean())


def map_to_heatmap(smap, path, scale=8, cmap="viridis"):
    """Render to PNG with DC at the center and a fixed [0, 1] color scale."""
    from matplotlib import colormaps

    values = smap.values if isinstance(smap, SensitivityMap) else np.asarray(smap)
    rgba = colormaps[cmap](np.clip(values, 0, 1), bytes=True)
    img = PILImage.fromarray(rgba[..., :3])
    if scale > 1:
        img = img.resize((values.shape[1] * scale, values.shape[0] * scale), PILImage.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path


def save_map(smap, stem):
    stem = Path(stem)
    write_grid_csv(stem.with_suffix(".csv"), smap.values)
    write_json(stem.with_suffix(".json"), smap.metadata())
    return stem.with_suffix(".csv")


def load_map(stem):
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    return SensitivityMap(
        values=read_grid_csv(stem.with_suffix(".csv")),
        kind=meta["kind"],
        epsilon=meta.get("epsilon"),
        d_fingerprint=meta.get("D_fingerprint"),
        model_fingerprint=meta.get("model_fingerprint"),
        dataset_fingerprint=meta.get("dataset_fingerprint"),
        n_samples_per_bin=meta.get("n_samples_per_bin", 0),
        seed=meta.get("seed", 0),
        fraction=meta.get("fraction", 1.0),
    )
