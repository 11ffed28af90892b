"""Spectral adversarial augmentation.

Sign-gradient ascent on an image's amplitude spectrum with the phase held
fixed, each step weighted per frequency by a sensitivity map. The loop stops
early once the model's prediction on the clamped reconstruction departs from
its prediction on the clean image.
"""

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from sada import spectral
from sada._util import write_json
from sada.errors import InvalidInputError, SadaError


@dataclass(frozen=True)
class AugmentationConfig:
    epsilon: float = 0.2
    delta: float = 0.08
    T: int = 5
    n_augments: int = 3
    mix_split: tuple = (3, 0)
    # Also apply the update computed on the final iteration before returning.
    materialize_last_step: bool = False

    def __post_init__(self):
        if self.epsilon < 0 or self.delta < 0 or self.T < 0:
            raise InvalidInputError("epsilon, delta and T must be nonnegative")
        if self.n_augments < 1:
            raise InvalidInputError("n_augments must be at least 1")
        split = tuple(int(v) for v in self.mix_split)
        object.__setattr__(self, "mix_split", split)
        if len(split) != 2 or min(split) < 0 or sum(split) != self.n_augments:
            raise InvalidInputError(f"mix_split {split} must be two counts summing to n_augments={self.n_augments}")

    @property
    def n_sada(self):
        return self.mix_split[0]

    @property
    def n_mix(self):
        return self.mix_split[1]

    def to_dict(self):
        d = asdict(self)
        d["mix_split"] = list(self.mix_split)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mix_split"] = tuple(d.get("mix_split", (d.get("n_augments", 3), 0)))
        return cls(**d)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class AugmentationTrace:
    steps_taken: int
    early_stopped: bool
    initial_ce: float
    final_ce: float
    prediction_changed: bool
    clean_prediction: int
    final_prediction: int
    min_amplitude: float

    def to_dict(self):
        return asdict(self)


def init_amplitude(A_org, epsilon, rng):
    """``A_org * (1 + u)`` with ``u ~ Unif(-eps, eps)`` drawn on canonical bins and mirrored."""
    A_org = np.asarray(A_org, dtype=np.float64)
    if np.any(A_org < 0):
        raise InvalidInputError("amplitude must be nonnegative")
    if epsilon > 1:
        warnings.warn(f"epsilon={epsilon} > 1 can produce negative amplitudes; they are clipped to 0", stacklevel=2)
    u = rng.uniform(-epsilon, epsilon, size=A_org.shape)
    u = spectral.hermitian_mirror(u)
    return np.maximum(A_org * (1.0 + u), 0.0)


def amplitude_gradient(model, A, P_org, labels):
    """Gradient of the CE loss w.r.t. the amplitude spectrum.

    Chain rule through the unclamped reconstruction ``x = Re(IFFT[A e^{iP}])``:
    the model's pixel gradient is pulled back through the adjoint of the
    unitary inverse transform (the forward transform), rotated by
    ``e^{-iP}`` and reduced to its real part, then averaged over conjugate
    pairs.

    Args:
      model: ModelOracle.
      A: amplitude ``(C, H, W)`` or batch ``(N, C, H, W)``.
      P_org: phase, same shape as ``A``.
      labels: label or ``(N,)`` labels.
    """
    A = np.asarray(A, dtype=np.float64)
    if np.any(A < 0):
        raise InvalidInputError("amplitude must be nonnegative")
    x = spectral.combine(A, P_org)
    g = np.asarray(model.pixel_gradient(x, labels), dtype=np.float64)
    grad = np.real(np.exp(-1j * P_org) * spectral.centered_fft(g))
    return spectral.hermitian_average(grad)


def ascent_update(A, grad, M_S, delta):
    """``A * (1 + delta * sign(grad) * M_S)`` floored at 0; ``sign(0) = 0``."""
    M_S = np.asarray(M_S, dtype=np.float64)
    if M_S.shape != A.shape[-2:]:
        raise InvalidInputError(f"sensitivity map {M_S.shape} does not match amplitude grid {A.shape[-2:]}")
    return np.maximum(A * (1.0 + delta * np.sign(grad) * M_S), 0.0)


def adversarial_step(A_t, P_org, model, label, M_S, delta):
    grad = amplitude_gradient(model, A_t, P_org, label)
    return ascent_update(np.asarray(A_t, dtype=np.float64), grad, M_S, delta)


def augment_batch(images, labels, model, M_S, config, rng):
    """Run the augmentation loop on a batch.

    Samples are processed together but stop independently.

    Args:
      images: ``(N, C, H, W)`` in [0, 1].
      labels: ``(N,)``.
      model: ModelOracle under attack.
      M_S: ``(H, W)`` sensitivity grid, broadcast over channels.
      config: AugmentationConfig.
      rng: numpy Generator for the random amplitude init.

    Returns:
      (augmented images float64 ``(N, C, H, W)``, list of AugmentationTrace)
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise InvalidInputError(f"expected (N, C, H, W) images, got {images.shape}")
    M_S = np.asarray(M_S, dtype=np.float64)
    if M_S.shape != images.shape[-2:]:
        raise InvalidInputError(f"sensitivity map {M_S.shape} does not match images {images.shape[-2:]}")
    N = len(images)
    if N == 0:
        return images.copy(), []

    try:
        spec = spectral.decompose(images)
        phase = spec.phase
        phase.setflags(write=False)
        A = init_amplitude(spec.amplitude, config.epsilon, rng)
        min_amp = A.reshape(N, -1).min(axis=1)
        clean_pred = model.predict(images.astype(np.float32))
        initial_ce = model.cross_entropy(images.astype(np.float32), labels)

        out = np.empty_like(images)
        steps = np.zeros(N, dtype=int)
        stopped = np.zeros(N, dtype=bool)
        active = np.arange(N)
        for t in range(config.T + 1):
            x_t = np.clip(spectral.combine(A[active], phase[active]), 0.0, 1.0)
            out[active] = x_t
            changed = model.predict(x_t.astype(np.float32)) != clean_pred[active]
            stopped[active[changed]] = True
            active = active[~changed]
            if active.size == 0:
                break
            last = t == config.T
            if last and not config.materialize_last_step:
                break
            grad = amplitude_gradient(model, A[active], phase[active], labels[active])
            A[active] = ascent_update(A[active], grad, M_S, config.delta)
            min_amp[active] = np.minimum(min_amp[active], A[active].reshape(len(active), -1).min(axis=1))
            steps[active] += 1
            if last:
                out[active] = np.clip(spectral.combine(A[active], phase[active]), 0.0, 1.0)

        final_pred = model.predict(out.astype(np.float32))
        final_ce = model.cross_entropy(out.astype(np.float32), labels)
    except InvalidInputError:
        raise
    except Exception as e:
        raise SadaError(f"augmentation failed for a batch of {N} samples") from e

    traces = [
        AugmentationTrace(
            steps_taken=int(steps[k]),
            early_stopped=bool(stopped[k]),
            initial_ce=float(initial_ce[k]),
            final_ce=float(final_ce[k]),
            prediction_changed=bool(final_pred[k] != clean_pred[k]),
            clean_prediction=int(clean_pred[k]),
            final_prediction=int(final_pred[k]),
            min_amplitude=float(min_amp[k]),
        )
        for k in range(N)
    ]
    return out, traces


def augment(image, label, model, M_S, config, rng):
    """Single-image form of :func:`augment_batch`; ``image`` is ``(C, H, W)``."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidInputError(f"expected a (C, H, W) image, got {image.shape}")
    out, traces = augment_batch(image[None], np.asarray([label]), model, M_S, config, rng)
    return out[0], traces[0]


def random_spectral_perturb(image, epsilon, rng, clamp=True):
    """Random amplitude init with the original phase and no ascent (the T = 0 path)."""
    spec = spectral.decompose(image)
    A = init_amplitude(spec.amplitude, epsilon, rng)
    x = spectral.combine(A, spec.phase)
    return np.clip(x, 0.0, 1.0) if clamp else x


def save_augmented(directory, images, traces, source_indices, config):
    """Persist augmented images as PNGs plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (img, tr, src) in enumerate(zip(images, traces, source_indices)):
        name = f"{k:06d}.png"
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        arr = arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))
        PILImage.fromarray(arr).save(directory / name, format="PNG")
        entries.append({"file": name, "source_index": int(src), **tr.to_dict()})
    write_json(directory / "manifest.json", {"config": config.to_dict(), "config_hash": config.hash(), "entries": entries})
    return directory / "manifest.json"
