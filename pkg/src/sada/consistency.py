"""Finetuning with a Jensen-Shannon consistency penalty across augmented views."""

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from sada.augment import AugmentationConfig, augment_batch
from sada.errors import InvalidInputError, SadaError
from sada.models import OptimConfig, TorchOracle, check_finite, epoch_order, make_optimizer

log = logging.getLogger(__name__)


def js_divergence(probs, atol=1e-6):
    """Generalized JS divergence (nats): mean KL of each distribution to their mean.

    Args:
      probs: ``(V, K)`` array or list of V >= 2 probability vectors.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise InvalidInputError("need at least two probability vectors of equal length")
    if np.any(p < -atol) or not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise InvalidInputError("inputs must lie on the probability simplex")
    p = np.clip(p, 0.0, None)
    m = p.mean(axis=0)
    # 0 * log(0 / m) = 0; m > 0 wherever any p > 0
    kl = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(np.where(m > 0, m, 1.0))), 0.0)
    return float(max(kl.sum(axis=1).mean(), 0.0))


def js_loss(logits_views):
    """Batch-mean JS divergence over a ``(V, B, K)`` stack of logits."""
    log_p = F.log_softmax(logits_views, dim=-1)
    p = log_p.exp()
    log_m = torch.clamp(p.mean(dim=0), min=1e-12).log()
    kl = (p * (log_p - log_m.unsqueeze(0))).sum(dim=-1)
    return kl.mean(dim=0).mean()


@dataclass
class ViewSet:
    """Original images plus augmented views; ``tags[k]`` is 'sada' or 'mix' for ``augmented[k]``."""

    original: np.ndarray
    labels: np.ndarray
    augmented: list = field(default_factory=list)
    tags: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.augmented) != len(self.tags):
            raise InvalidInputError("one provenance tag per augmented view")
        for v in self.augmented:
            if np.shape(v) != np.shape(self.original):
                raise InvalidInputError("augmented views must match the original batch shape")

    @property
    def n_views(self):
        return 1 + len(self.augmented)


def _objective(module, logits0, y0, augmented, pos, lam, erm_on_augmented):
    """CE on originals (+ augmented views if requested) + lam * JS over the rows ``pos``."""
    ce = F.cross_entropy(logits0, y0)
    js = torch.zeros((), dtype=logits0.dtype)
    if augmented:
        dtype = logits0.dtype
        xa = torch.as_tensor(np.concatenate(augmented), dtype=dtype)
        logits_a = module(xa).reshape(len(augmented), len(pos), -1)
        if erm_on_augmented:
            ya = y0[pos]
            ce_aug = sum(F.cross_entropy(la, ya, reduction="sum") for la in logits_a)
            ce = (ce * len(y0) + ce_aug) / (len(y0) + len(augmented) * len(pos))
        js = js_loss(torch.cat([logits0[pos].unsqueeze(0), logits_a]))
    return ce + lam * js, ce, js


def total_loss(module, views, lam=0.25, erm_on_augmented=False):
    """ERM cross-entropy on the originals plus ``lam`` times the JS term across all views.

    Gradients flow through both terms; call ``.backward()`` on the returned loss.

    Returns:
      (loss tensor, dict with float 'ce' and 'js')
    """
    dtype = next(module.parameters()).dtype
    x0 = torch.as_tensor(np.asarray(views.original), dtype=dtype)
    y0 = torch.as_tensor(np.asarray(views.labels, dtype=np.int64))
    logits0 = module(x0)
    pos = torch.arange(len(x0))
    loss, ce, js = _objective(module, logits0, y0, views.augmented, pos, lam, erm_on_augmented)
    return loss, {"ce": ce.item(), "js": js.item()}


class RandomMix:
    """Random photometric/geometric chain standing in for an external mix augmenter.

    Ops: autocontrast-style stretch, solarize-style inversion above a
    threshold, small random affine jitter. Chains of 1-3 ops.
    """

    def __init__(self, max_ops=3, max_shift=2.0, max_rotate=15.0):
        self.max_ops = max_ops
        self.max_shift = max_shift
        self.max_rotate = max_rotate

    def __call__(self, image, rng):
        x = np.asarray(image, dtype=np.float64)
        for _ in range(rng.integers(1, self.max_ops + 1)):
            op = rng.integers(3)
            if op == 0:
                x = self._autocontrast(x)
            elif op == 1:
                x = np.where(x >= rng.uniform(0.5, 1.0), 1.0 - x, x)
            else:
                x = self._affine(x, rng)
        return np.clip(x, 0.0, 1.0)

    @staticmethod
    def _autocontrast(x):
        lo = x.min(axis=(-2, -1), keepdims=True)
        hi = x.max(axis=(-2, -1), keepdims=True)
        span = np.where(hi - lo > 1e-8, hi - lo, 1.0)
        return np.where(hi - lo > 1e-8, (x - lo) / span, x)

    def _affine(self, x, rng):
        H, W = x.shape[-2:]
        theta = np.deg2rad(rng.uniform(-self.max_rotate, self.max_rotate))
        shift = rng.uniform(-self.max_shift, self.max_shift, size=2)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        center = np.array([(H - 1) / 2, (W - 1) / 2])
        offset = center - rot @ center - shift
        return np.stack([ndimage.affine_transform(c, rot, offset=offset, order=1, mode="constant") for c in x])


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.25
    optim: OptimConfig = OptimConfig(lr=0.01, momentum=0.9, epochs=3, milestones=(20,))
    aug: AugmentationConfig = AugmentationConfig()
    aug_fraction: float = 1.0
    refresh_every: int = 0
    attack_model: str = "live"
    erm_on_augmented: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("lambda must be nonnegative")
        if not 0 < self.aug_fraction <= 1:
            raise InvalidInputError("aug_fraction must lie in (0, 1]")
        if self.attack_model not in ("live", "frozen"):
            raise InvalidInputError("attack_model must be 'live' or 'frozen'")
        if self.refresh_every < 0:
            raise InvalidInputError("refresh_every must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["optim"] = self.optim.to_dict()
        d["aug"] = self.aug.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "optim" in d:
            d["optim"] = OptimConfig.from_dict(d["optim"])
        if "aug" in d:
            d["aug"] = AugmentationConfig.from_dict(d["aug"])
        return cls(**d)


def build_views(x0, y, oracle, M_S, cfg, mixer, rng):
    """Augmented views for one batch: ``n_sada`` adversarial then ``n_mix`` mixed."""
    augmented, tags, traces = [], [], []
    for _ in range(cfg.n_sada):
        xa, tr = augment_batch(x0, y, oracle, M_S, cfg, rng)
        augmented.append(xa.astype(np.float32))
        tags.append("sada")
        traces.extend(tr)
    for _ in range(cfg.n_mix):
        augmented.append(np.stack([mixer(img, rng) for img in x0]).astype(np.float32))
        tags.append("mix")
    return ViewSet(x0, y, augmented, tags), traces


def train_sada(base, images, labels, M_S, cfg=TrainConfig(), mixer=None, map_fn=None, metrics_path=None):
    """Finetune ``base`` with SADA and mix views under the consistency objective.

    Args:
      base: TorchOracle, normally ERM-trained. It is copied, never mutated.
      images, labels: source training set.
      M_S: ``(H, W)`` sensitivity grid; required when SADA views are requested.
      cfg: TrainConfig.
      mixer: callable ``(image, rng) -> image``; defaults to :class:`RandomMix`.
      map_fn: callable ``oracle -> grid`` used when ``cfg.refresh_every > 0``.
      metrics_path: optional JSON-lines file receiving one record per epoch.

    Returns:
      (TorchOracle, list of per-epoch metric dicts)
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if cfg.aug.n_sada > 0 and M_S is None:
        raise SadaError("SADA views need a sensitivity map: compute one from the ERM model first")
    if cfg.refresh_every and map_fn is None:
        raise SadaError("refresh_every > 0 requires map_fn")
    mixer = mixer or RandomMix()
    module = copy.deepcopy(base.module).float()
    live = TorchOracle(module, spec=base.spec)
    frozen = TorchOracle(copy.deepcopy(base.module).float(), spec=base.spec)
    attacker = live if cfg.attack_model == "live" else frozen

    N = len(images)
    n_aug = int(round(cfg.aug_fraction * N))
    aug_mask = np.zeros(N, dtype=bool)
    aug_mask[np.random.default_rng([cfg.seed, 7]).choice(N, n_aug, replace=False)] = True
    view_rng = np.random.default_rng([cfg.seed, 11])

    opt, sched = make_optimizer(module, cfg.optim)
    metrics = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for epoch in range(cfg.optim.epochs):
            if cfg.refresh_every and epoch > 0 and epoch % cfg.refresh_every == 0:
                M_S = map_fn(attacker)
            t0 = time.perf_counter()
            order = epoch_order(N, cfg.optim.seed, epoch)
            ce_sum = js_sum = 0.0
            correct = n_js = 0
            flips = n_traces = 0
            for step, s in enumerate(range(0, N, cfg.optim.batch_size)):
                idx = order[s:s + cfg.optim.batch_size]
                aug_idx = idx[aug_mask[idx]]
                module.eval()
                if aug_idx.size:
                    views, traces = build_views(images[aug_idx], labels[aug_idx], attacker, M_S, cfg.aug, mixer, view_rng)
                    flips += sum(t.prediction_changed for t in traces)
                    n_traces += len(traces)
                module.train()
                opt.zero_grad()
                x0 = torch.from_numpy(images[idx])
                y0 = torch.from_numpy(labels[idx])
                logits0 = module(x0)
                pos = torch.from_numpy(np.nonzero(aug_mask[idx])[0])
                augmented = views.augmented if aug_idx.size else []
                loss, ce, js = _objective(module, logits0, y0, augmented, pos, cfg.lam, cfg.erm_on_augmented)
                ce_val, js_val = ce.item(), js.item()
                check_finite(loss, epoch, step, [m["ce"] for m in metrics])
                loss.backward()
                opt.step()
                ce_sum += ce_val * len(idx)
                js_sum += js_val * len(aug_idx)
                n_js += len(aug_idx)
                correct += int((logits0.argmax(1) == y0).sum())
            sched.step()
            module.eval()
            rec = {
                "epoch": epoch,
                "ce": ce_sum / N,
                "js": js_sum / n_js if n_js else 0.0,
                "train_acc": correct / N,
                "flip_rate": flips / n_traces if n_traces else 0.0,
                "wallclock": time.perf_counter() - t0,
            }
            metrics.append(rec)
            log.info("sada epoch %d ce=%.4f js=%.4f acc=%.4f", epoch, rec["ce"], rec["js"], rec["train_acc"])
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    module.eval()
    return TorchOracle(module, spec=base.spec), metrics
