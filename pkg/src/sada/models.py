"""Classifier oracles and the reference ConvNet.

Everything downstream talks to a :class:`ModelOracle`: numpy images in,
class probabilities or input gradients of the cross-entropy out. The
torch-backed implementation wraps any ``nn.Module`` producing logits.
"""

import copy
import hashlib
import io
import json
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sada.errors import InvalidInputError, TrainingDivergedError

log = logging.getLogger(__name__)


class ModelOracle(ABC):
    """Opaque classifier: probabilities and pixel gradients of the CE loss.

    ``reentrant`` declares whether concurrent calls are safe. Callers that
    fan out work must serialize calls on non-reentrant oracles.
    """

    reentrant = False
    n_classes: int

    @property
    @abstractmethod
    def fingerprint(self):
        ...

    @abstractmethod
    def predict_proba(self, images):
        """``(N, C, H, W)`` images -> ``(N, K)`` probability rows."""

    @abstractmethod
    def pixel_gradient(self, images, labels):
        """Gradient of per-sample cross-entropy w.r.t. each input image."""

    def predict(self, images):
        return np.argmax(self.predict_proba(images), axis=1)

    def cross_entropy(self, images, labels):
        p = self.predict_proba(images)
        labels = np.asarray(labels)
        return -np.log(np.clip(p[np.arange(len(labels)), labels], 1e-300, None))

    def accuracy(self, images, labels):
        return float(np.mean(self.predict(images) == np.asarray(labels)))


@dataclass(frozen=True)
class SmallConvNetSpec:
    """Two conv blocks + one hidden layer, LeNet-style."""

    in_channels: int = 1
    height: int = 28
    width: int = 28
    n_classes: int = 10
    conv_channels: tuple = (32, 64)
    kernel: int = 5
    pool: int = 2
    hidden: int = 128
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


class SmallConvNet(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        layers = []
        c_in, h, w = spec.in_channels, spec.height, spec.width
        for c_out in spec.conv_channels:
            layers += [
                nn.Conv2d(c_in, c_out, spec.kernel, padding=spec.kernel // 2),
                nn.ReLU(),
                nn.MaxPool2d(spec.pool),
            ]
            c_in, h, w = c_out, h // spec.pool, w // spec.pool
        if h < 1 or w < 1:
            raise InvalidInputError(f"{spec.height}x{spec.width} input is too small for {len(spec.conv_channels)} pooling stages")
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(c_in * h * w, spec.hidden),
            nn.ReLU(),
            nn.Linear(spec.hidden, spec.n_classes),
        )

    def forward(self, x):
        return self.head(self.features(x))


def build_model(spec):
    """Deterministically initialized :class:`SmallConvNet` (seeded, global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        return SmallConvNet(spec)


def _module_fingerprint(module):
    h = hashlib.sha256()
    h.update(repr(module).encode())
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TorchOracle(ModelOracle):
    """Wraps a logits-producing module. Calls never touch parameter grads, so it is reentrant."""

    reentrant = True

    def __init__(self, module, dtype=torch.float32, batch_size=256, spec=None):
        self.module = module.to(dtype)
        self.module.eval()
        self.dtype = dtype
        self.batch_size = batch_size
        self.spec = spec if spec is not None else getattr(module, "spec", None)
        self._input_shape = None
        if self.spec is not None:
            self._input_shape = (self.spec.in_channels, self.spec.height, self.spec.width)
            self.n_classes = self.spec.n_classes
        else:
            self.n_classes = int(list(module.parameters())[-1].shape[0])

    @property
    def fingerprint(self):
        return _module_fingerprint(self.module)

    def with_dtype(self, dtype):
        return TorchOracle(copy.deepcopy(self.module), dtype=dtype, batch_size=self.batch_size, spec=self.spec)

    def _as_batch(self, images):
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        if self._input_shape is not None and x.shape[1:] != self._input_shape:
            raise InvalidInputError(f"model expects images of shape {self._input_shape}, got {x.shape[1:]}")
        return x

    def logits(self, images):
        x = self._as_batch(images)
        out = []
        with torch.no_grad():
            for s in range(0, len(x), self.batch_size):
                xb = torch.as_tensor(x[s:s + self.batch_size], dtype=self.dtype)
                out.append(self.module(xb))
        if not out:
            return np.zeros((0, self.n_classes))
        return torch.cat(out).double().numpy()

    def predict_proba(self, images):
        x = self._as_batch(images)
        out = []
        with torch.no_grad():
            for s in range(0, len(x), self.batch_size):
                xb = torch.as_tensor(x[s:s + self.batch_size], dtype=self.dtype)
                out.append(F.softmax(self.module(xb).double(), dim=1))
        if not out:
            return np.zeros((0, self.n_classes))
        return torch.cat(out).numpy()

    def pixel_gradient(self, images, labels):
        single = np.asarray(images).ndim == 3
        x = self._as_batch(images)
        y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if len(y) != len(x):
            raise InvalidInputError(f"{len(x)} images but {len(y)} labels")
        grads = []
        for s in range(0, len(x), self.batch_size):
            xb = torch.as_tensor(x[s:s + self.batch_size], dtype=self.dtype).requires_grad_(True)
            yb = torch.as_tensor(y[s:s + self.batch_size])
            # summed loss: each sample's input gradient is its own CE gradient
            loss = F.cross_entropy(self.module(xb), yb, reduction="sum")
            (g,) = torch.autograd.grad(loss, xb)
            grads.append(g.detach().double().numpy())
        g = np.concatenate(grads) if grads else np.zeros_like(x, dtype=np.float64)
        return g[0] if single else g


@dataclass(frozen=True)
class OptimConfig:
    """SGD settings. The defaults are the paper-scale values; desk presets override lr/epochs."""

    lr: float = 0.001
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 128
    milestones: tuple = (20, 40)
    gamma: float = 0.1
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["milestones"] = tuple(d.get("milestones", ()))
        return cls(**d)


def make_optimizer(module, cfg):
    opt = torch.optim.SGD(module.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=cfg.gamma)
    return opt, sched


def epoch_order(n, seed, epoch):
    """Shuffled sample order for one epoch; shared by every training loop."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def check_finite(loss, epoch, step, history):
    if not math.isfinite(float(loss.detach()) if torch.is_tensor(loss) else float(loss)):
        raise TrainingDivergedError(
            f"loss became non-finite at epoch {epoch}, step {step}",
            diagnostics={"epoch": epoch, "step": step, "history": list(history)},
        )


def fit_erm(model, images, labels, cfg=OptimConfig(), log_fn=None):
    """Mini-batch SGD on mean cross-entropy.

    Args:
      model: a :class:`SmallConvNetSpec` (fresh init) or an ``nn.Module`` to continue training.
      images: float array ``(N, C, H, W)`` in [0, 1].
      labels: int array ``(N,)``.
      cfg: optimizer settings; the batch order is a function of ``cfg.seed`` and the epoch.
      log_fn: optional callable receiving each epoch's metrics dict.

    Returns:
      (TorchOracle, history) where history holds one dict per epoch.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    module = build_model(model) if isinstance(model, SmallConvNetSpec) else model
    n_classes = module.spec.n_classes if hasattr(module, "spec") else None
    if n_classes is not None and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")
    module.float().train()
    opt, sched = make_optimizer(module, cfg)
    history = []
    x_all = torch.from_numpy(images)
    y_all = torch.from_numpy(labels)
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(epoch_order(len(images), cfg.seed, epoch))
        total, correct, seen = 0.0, 0, 0
        for step, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            opt.zero_grad()
            logits = module(xb)
            loss = F.cross_entropy(logits, yb)
            check_finite(loss, epoch, step, [h["ce"] for h in history])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
            seen += len(idx)
        sched.step()
        rec = {"epoch": epoch, "ce": total / seen, "train_acc": correct / seen}
        history.append(rec)
        log.info("erm epoch %d ce=%.4f acc=%.4f", epoch, rec["ce"], rec["train_acc"])
        if log_fn is not None:
            log_fn(rec)
    module.eval()
    return TorchOracle(module), history


def save_checkpoint(oracle, path):
    """Write an ``.npz`` holding the architecture spec JSON and every weight array."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if oracle.spec is None:
        raise InvalidInputError("only oracles built from a SmallConvNetSpec can be checkpointed")
    arrays = {f"w/{k}": v.detach().cpu().float().numpy() for k, v in oracle.module.state_dict().items()}
    meta = {"spec": oracle.spec.to_dict(), "fingerprint": oracle.fingerprint, "format": 1}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        spec = SmallConvNetSpec.from_dict(meta["spec"])
        module = build_model(spec)
        state = {k[2:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("w/")}
    module.load_state_dict(state)
    oracle = TorchOracle(module)
    if oracle.fingerprint != meta["fingerprint"]:
        raise InvalidInputError(f"checkpoint {path} fingerprint mismatch")
    return oracle


def find_checkpoint(directory, fingerprint):
    """Locate a checkpoint under ``directory`` by (a prefix of) its model fingerprint."""
    for p in sorted(Path(directory).glob("**/*.npz")):
        try:
            with np.load(p) as z:
                if "__meta__" not in z.files:
                    continue
                fp = json.loads(bytes(z["__meta__"]).decode())["fingerprint"]
        except (OSError, ValueError, KeyError):
            continue
        if fp.startswith(fingerprint):
            return p
    raise FileNotFoundError(f"no checkpoint with fingerprint {fingerprint} under {directory}")
