"""Experiment orchestration: configs, presets, per-seed pipelines, sweeps and reports.

A run executes, per seed: ERM pretraining, the source sensitivity map,
finetuning under the chosen preset, evaluation on the clean test split and
every target domain, and the map of the final model. ERM checkpoints and
source maps are cached under ``<output_root>/cache`` keyed by everything that
determines them, so presets sharing a seed reuse the same base model.
"""

import csv
import logging
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sada import data, models, sensitivity, spectral
from sada._util import config_hash, read_json, run_dir_lock, write_json
from sada.augment import AugmentationConfig, augment_batch, save_augmented
from sada.consistency import TrainConfig, train_sada
from sada.errors import ConfigError, RunStateError

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SADA_OUTPUT_ROOT"

PRESETS = (
    "erm",
    "1sada_2mix",
    "2sada_1mix",
    "3sada_0mix",
    "wo_sada",
    "wo_mix",
    "wo_js",
    "random_spectral",
    "original_map",
)

DESK_TARGETS = (
    {"kind": "amplitude_scale_lowfreq", "severity": 3},
    {"kind": "gaussian_noise", "severity": 3},
)


def default_output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "sada-runs"))


@dataclass
class MapSettings:
    kind: str = "amplitude_modulated"
    epsilon: float = 0.2
    fraction: float = 0.05
    seed: int = 0
    fft_norm: str = "backward"

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ExperimentConfig:
    source: dict = field(default_factory=lambda: {"kind": "mnist5k"})
    targets: list = field(default_factory=lambda: [dict(t) for t in DESK_TARGETS])
    model: models.SmallConvNetSpec = field(default_factory=models.SmallConvNetSpec)
    erm: models.OptimConfig = field(
        default_factory=lambda: models.OptimConfig(lr=0.01, momentum=0.9, epochs=10, milestones=(20,))
    )
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "3sada_0mix"
    map: MapSettings = field(default_factory=MapSettings)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = None
    target_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset '{self.preset}'; choose from {', '.join(PRESETS)}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.map.kind not in (sensitivity.ORIGINAL, sensitivity.MODULATED):
            raise ConfigError(f"unknown map kind '{self.map.kind}'")
        kind = self.source.get("kind")
        if kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key not in self.source:
                    raise ConfigError(f"idx source needs '{key}'")
                if not Path(self.source[key]).exists():
                    raise ConfigError(f"source file not found: {self.source[key]}")
        elif kind != "mnist5k":
            raise ConfigError(f"unknown source kind '{kind}'")
        try:
            for t in self.targets:
                data.DomainShiftSpec.from_dict(t)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"bad target spec: {e}") from e

    def to_dict(self):
        return {
            "source": dict(self.source),
            "targets": [data.DomainShiftSpec.from_dict(t).to_dict() for t in self.targets],
            "model": self.model.to_dict(),
            "erm": self.erm.to_dict(),
            "train": self.train.to_dict(),
            "preset": self.preset,
            "map": self.map.to_dict(),
            "seeds": list(self.seeds),
            "target_seed": self.target_seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            return cls(
                source=d.get("source", {"kind": "mnist5k"}),
                targets=d.get("targets", [dict(t) for t in DESK_TARGETS]),
                model=models.SmallConvNetSpec.from_dict(d["model"]) if "model" in d else models.SmallConvNetSpec(),
                erm=models.OptimConfig.from_dict(d["erm"]) if "erm" in d else ExperimentConfig().erm,
                train=TrainConfig.from_dict(d["train"]) if "train" in d else TrainConfig(),
                preset=d.get("preset", "3sada_0mix"),
                map=MapSettings(**d.get("map", {})),
                seeds=list(d.get("seeds", [0, 1, 2])),
                output_dir=d.get("output_dir"),
                target_seed=d.get("target_seed", 0),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid experiment config: {e}") from e

    @property
    def hash(self):
        return config_hash(self.to_dict())


def load_config(path):
    try:
        return ExperimentConfig.from_dict(read_json(path))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except ValueError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def apply_preset(train, preset):
    """Finetuning settings for a preset, starting from ``train``; None means no finetuning.

    The ``<k>sada_<m>mix`` variants fix the view split. The ablations
    (``wo_*``, ``random_spectral``, ``original_map``) alter one component of
    the configured settings and keep everything else.
    """
    aug = train.aug
    n = aug.n_augments
    if preset == "erm":
        return None
    if preset in ("1sada_2mix", "2sada_1mix", "3sada_0mix"):
        k = int(preset[0])
        return replace(train, aug=replace(aug, n_augments=3, mix_split=(k, 3 - k)))
    if preset == "wo_sada":
        return replace(train, aug=replace(aug, mix_split=(0, n)))
    if preset == "wo_mix":
        return replace(train, aug=replace(aug, n_augments=aug.n_sada or n, mix_split=(aug.n_sada or n, 0)))
    if preset == "wo_js":
        return replace(train, lam=0.0, erm_on_augmented=True)
    if preset == "random_spectral":
        return replace(train, aug=replace(aug, T=0))
    if preset == "original_map":
        return train
    raise ConfigError(f"unknown preset '{preset}'")


def load_source(cfg):
    src = cfg.source
    if src["kind"] == "mnist5k":
        return data.mnist5k(seed=src.get("split_seed", 0), rgb=src.get("rgb", False))
    train = data.load_idx(src["train_images"], src["train_labels"], rgb=src.get("rgb", False), split="train")
    test = data.load_idx(src["test_images"], src["test_labels"], rgb=src.get("rgb", False), split="test")
    return train, test


def build_targets(cfg, test):
    out = {}
    for t in cfg.targets:
        spec = data.DomainShiftSpec.from_dict(t)
        out[spec.label] = data.corrupt(test, spec, seed=cfg.target_seed)
    return out


def _noise_model(map_settings, train):
    if map_settings.kind == sensitivity.ORIGINAL:
        return sensitivity.NoiseModel.original(map_settings.epsilon), None
    D = spectral.mean_amplitude(train.images, fft_norm=map_settings.fft_norm)
    return sensitivity.NoiseModel.modulated(D), D


def _load_stage(stage, path, loader):
    try:
        return loader(path)
    except Exception as e:
        raise RunStateError(stage, path, e) from e


def _seeded_model_spec(cfg, seed, train):
    C, H, W = train.shape
    return replace(cfg.model, seed=seed, in_channels=C, height=H, width=W, n_classes=int(train.labels.max()) + 1)


def erm_stage(cfg, seed, train, cache_dir):
    spec = _seeded_model_spec(cfg, seed, train)
    erm_cfg = replace(cfg.erm, seed=seed)
    key = config_hash({"source": cfg.source, "model": spec.to_dict(), "erm": erm_cfg.to_dict(), "data": train.fingerprint})[:16]
    path = Path(cache_dir) / f"erm-{key}.npz"
    if path.exists():
        return _load_stage("erm", path, models.load_checkpoint), path
    oracle, history = models.fit_erm(spec, train.images, train.labels, erm_cfg)
    models.save_checkpoint(oracle, path)
    write_json(path.with_suffix(".history.json"), history)
    return oracle, path


def map_stage(oracle, train, map_settings, stem, label):
    """Compute (or reload) a map for ``oracle`` and write CSV/JSON/PNG under ``stem``."""
    stem = Path(stem)
    if stem.with_suffix(".csv").exists():
        smap = _load_stage(label, stem, sensitivity.load_map)
        if smap.model_fingerprint == oracle.fingerprint:
            return smap
    noise, D = _noise_model(map_settings, train)
    smap = sensitivity.compute_map(
        oracle, train.images, train.labels, noise, seed=map_settings.seed, sample_fraction=map_settings.fraction
    )
    sensitivity.save_map(smap, stem)
    sensitivity.map_to_heatmap(smap, stem.with_suffix(".png"))
    if D is not None:
        spectral.save_mean_amplitude(D, stem.parent / f"{stem.name}-D")
    return smap


def evaluate(oracle, test, targets):
    res = {"clean": oracle.accuracy(test.images, test.labels)}
    for label, ds in targets.items():
        res[label] = oracle.accuracy(ds.images, ds.labels)
    return res


def _run_seed(cfg, seed, run_dir, cache_dir, train, test, targets):
    seed_dir = Path(run_dir) / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    erm, erm_path = erm_stage(cfg, seed, train, cache_dir)
    timings["erm"] = time.perf_counter() - t0

    map_settings = replace(cfg.map, seed=seed)
    source_map_settings = map_settings
    if cfg.preset == "original_map":
        source_map_settings = replace(map_settings, kind=sensitivity.ORIGINAL)
    mkey = config_hash({"erm": erm_path.name, "map": source_map_settings.to_dict()})[:16]
    t0 = time.perf_counter()
    source_map = map_stage(erm, train, source_map_settings, Path(cache_dir) / f"map-{mkey}", "source_map")
    timings["source_map"] = time.perf_counter() - t0

    train_cfg = apply_preset(cfg.train, cfg.preset)
    final_path = seed_dir / "model.npz"
    metrics = []
    t0 = time.perf_counter()
    if train_cfg is None:
        final = erm
    elif final_path.exists():
        final = _load_stage("finetune", final_path, models.load_checkpoint)
    else:
        train_cfg = replace(train_cfg, seed=seed, optim=replace(train_cfg.optim, seed=seed))
        metrics_path = seed_dir / "metrics.jsonl"
        metrics_path.unlink(missing_ok=True)
        final, metrics = train_sada(erm, train.images, train.labels, source_map.values, train_cfg, metrics_path=metrics_path)
        models.save_checkpoint(final, final_path)
    timings["finetune"] = time.perf_counter() - t0

    eval_path = seed_dir / "eval.json"
    if eval_path.exists():
        acc = _load_stage("eval", eval_path, read_json)
    else:
        acc = evaluate(final, test, targets)
        write_json(eval_path, acc)

    t0 = time.perf_counter()
    erm_map = source_map
    if source_map_settings is not map_settings:
        key = config_hash({"erm": erm_path.name, "map": map_settings.to_dict()})[:16]
        erm_map = map_stage(erm, train, map_settings, Path(cache_dir) / f"map-{key}", "erm_map")
    if train_cfg is None:
        # the final model is the ERM model: its map is already cached
        final_map = erm_map
        sensitivity.save_map(final_map, seed_dir / "map_final")
        sensitivity.map_to_heatmap(final_map, seed_dir / "map_final.png")
    else:
        final_map = map_stage(final, train, map_settings, seed_dir / "map_final", "final_map")
    timings["final_map"] = time.perf_counter() - t0

    target_labels = [k for k in acc if k != "clean"]
    return {
        "seed": seed,
        "accuracy": acc,
        "mean_target_accuracy": float(np.mean([acc[k] for k in target_labels])) if target_labels else None,
        "map_l1_final": sensitivity.map_l1_summary(final_map),
        "map_l1_erm": sensitivity.map_l1_summary(erm_map),
        "map_low_high_final": sensitivity.low_high_means(final_map.values),
        "model_fingerprint": final.fingerprint,
        "artifacts": {
            "model": os.path.relpath(final_path if train_cfg is not None else erm_path, run_dir),
            "map_final": os.path.relpath(seed_dir / "map_final.csv", run_dir),
            "eval": os.path.relpath(eval_path, run_dir),
        },
        "wallclock": timings,
    }


def _aggregate(per_seed):
    keys = per_seed[0]["accuracy"].keys()
    mean = {k: float(np.mean([r["accuracy"][k] for r in per_seed])) for k in keys}
    std = {k: float(np.std([r["accuracy"][k] for r in per_seed])) for k in keys}
    targets = [r["mean_target_accuracy"] for r in per_seed if r["mean_target_accuracy"] is not None]
    return {
        "mean": mean,
        "std": std,
        "mean_target_accuracy": float(np.mean(targets)) if targets else None,
        "map_l1_final": float(np.mean([r["map_l1_final"] for r in per_seed])),
        "map_l1_erm": float(np.mean([r["map_l1_erm"] for r in per_seed])),
    }


def run_dir_for(cfg, output_root=None):
    root = Path(cfg.output_dir) if cfg.output_dir else Path(output_root or default_output_root())
    return root / "runs" / f"{cfg.preset}-{cfg.hash[:10]}", root / "cache"


def _next_record_path(run_dir):
    existing = sorted(Path(run_dir).glob("record-*.json"))
    n = int(existing[-1].stem.split("-")[1]) + 1 if existing else 1
    return Path(run_dir) / f"record-{n:04d}.json"


def run_experiment(cfg, output_root=None, data_override=None):
    """Execute (or resume) every seed of ``cfg``; append a new RunRecord.

    Returns:
      (record dict, path of the record file)
    """
    cfg.validate()
    run_dir, cache_dir = run_dir_for(cfg, output_root)
    train, test = data_override or load_source(cfg)
    targets = build_targets(cfg, test)
    cache_dir.mkdir(parents=True, exist_ok=True)
    with run_dir_lock(run_dir):
        write_json(run_dir / "config.json", cfg.to_dict())
        per_seed = []
        for seed in cfg.seeds:
            log.info("run %s seed %d", run_dir.name, seed)
            per_seed.append(_run_seed(cfg, seed, run_dir, cache_dir, train, test, targets))
        record = {
            "config_hash": cfg.hash,
            "preset": cfg.preset,
            "config": cfg.to_dict(),
            "per_seed": per_seed,
            **_aggregate(per_seed),
            "notes": "desk-scale stand-in corruptions; reference ConvNet is a LeNet-class stand-in",
        }
        path = _next_record_path(run_dir)
        write_json(path, record)
    return record, path


def strip_wallclock(obj):
    if isinstance(obj, dict):
        return {k: strip_wallclock(v) for k, v in obj.items() if k != "wallclock"}
    if isinstance(obj, list):
        return [strip_wallclock(v) for v in obj]
    return obj


def cmd_sensitivity(oracle, dataset, out_dir, kind="amplitude_modulated", epsilon=0.2, fraction=1.0, seed=0, fft_norm="backward"):
    """Write ``map.csv/json/png`` (and ``D.csv/json`` for modulated maps) into ``out_dir``."""
    out_dir = Path(out_dir)
    settings = MapSettings(kind=kind, epsilon=epsilon, fraction=fraction, seed=seed, fft_norm=fft_norm)
    noise, D = _noise_model(settings, dataset)
    smap = sensitivity.compute_map(oracle, dataset.images, dataset.labels, noise, seed=seed, sample_fraction=fraction)
    paths = {"map_csv": sensitivity.save_map(smap, out_dir / "map")}
    paths["map_png"] = sensitivity.map_to_heatmap(smap, out_dir / "map.png")
    if D is not None:
        paths["D_csv"], _ = spectral.save_mean_amplitude(D, out_dir / "D")
    return smap, paths


def cmd_augment(oracle, dataset, M_S, out_dir, config=AugmentationConfig(), n=None, seed=0):
    n = len(dataset) if n is None else min(n, len(dataset))
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    images, traces = augment_batch(dataset.images[idx], dataset.labels[idx], oracle, M_S, config, rng)
    return save_augmented(out_dir, images, traces, idx, config)


def cmd_eval(oracle, test, target_specs, out_path=None, target_seed=0):
    targets = {}
    for t in target_specs:
        spec = data.DomainShiftSpec.from_dict(t) if isinstance(t, dict) else t
        targets[spec.label] = data.corrupt(test, spec, seed=target_seed)
    res = evaluate(oracle, test, targets)
    if out_path:
        write_json(out_path, res)
    return res


SWEEP_AXES = {
    # without the consistency term the views only matter through their CE, as in the wo_js preset
    "lambda": lambda cfg, v: replace(
        cfg, train=replace(cfg.train, lam=float(v), erm_on_augmented=cfg.train.erm_on_augmented or float(v) == 0.0)
    ),
    "T": lambda cfg, v: replace(cfg, train=replace(cfg.train, aug=replace(cfg.train.aug, T=int(v)))),
    "delta": lambda cfg, v: replace(cfg, train=replace(cfg.train, aug=replace(cfg.train.aug, delta=float(v)))),
    "epsilon": lambda cfg, v: replace(cfg, train=replace(cfg.train, aug=replace(cfg.train.aug, epsilon=float(v)))),
    "aug_fraction": lambda cfg, v: replace(cfg, train=replace(cfg.train, aug_fraction=float(v))),
}


def cmd_sweep(cfg, axis, values, out_dir, output_root=None, data_override=None):
    """One run per axis value; failures are recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis '{axis}'; choose from {', '.join(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    for v in values:
        try:
            run_cfg = SWEEP_AXES[axis](cfg, v)
            record, path = run_experiment(run_cfg, output_root, data_override)
            rows.append({"value": v, "ok": True, "mean_target_accuracy": record["mean_target_accuracy"],
                         "clean": record["mean"]["clean"], "map_l1": record["map_l1_final"], "record": str(path)})
        except Exception as e:
            log.exception("sweep value %s failed", v)
            rows.append({"value": v, "ok": False, "error": f"{type(e).__name__}: {e}"})
    out_dir = Path(out_dir)
    write_json(out_dir / "sweep.json", {"axis": axis, "rows": rows})
    ok = [r for r in rows if r["ok"]]
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["value", "mean_target_accuracy", "clean", "map_l1"])
        for r in ok:
            w.writerow([r["value"], repr(r["mean_target_accuracy"]), repr(r["clean"]), repr(r["map_l1"])])
    _line_plot([r["value"] for r in ok], [r["mean_target_accuracy"] for r in ok], axis, out_dir / "sweep.png")
    return rows


def _line_plot(xs, ys, axis, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel("mean target accuracy")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def latest_record(run_dir):
    run_dir = Path(run_dir)
    if run_dir.is_file():
        return read_json(run_dir)
    records = sorted(run_dir.glob("record-*.json"))
    if not records:
        raise FileNotFoundError(f"no run record in {run_dir}")
    return read_json(records[-1])


def cmd_report(run_dirs, out_dir):
    """Scatter of mean target accuracy against map l1 summary, with Spearman correlation."""
    from scipy import stats

    points, skipped = [], []
    for d in run_dirs:
        try:
            rec = latest_record(d)
        except FileNotFoundError:
            skipped.append(str(d))
            continue
        if rec.get("map_l1_final") is None or rec.get("mean_target_accuracy") is None:
            skipped.append(str(d))
            continue
        points.append({"run": Path(d).name, "preset": rec["preset"], "map_l1": rec["map_l1_final"],
                       "accuracy": rec["mean_target_accuracy"]})
    if skipped:
        log.warning("skipped runs without maps or accuracies: %s", ", ".join(skipped))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "points.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "preset", "map_l1", "accuracy"])
        for p in points:
            w.writerow([p["run"], p["preset"], repr(p["map_l1"]), repr(p["accuracy"])])
    rho = None
    x = np.array([p["map_l1"] for p in points])
    y = np.array([p["accuracy"] for p in points])
    if len(points) >= 2:
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            warnings.warn("zero variance across runs; rank correlation undefined", RuntimeWarning, stacklevel=2)
        else:
            rho = float(stats.spearmanr(x, y).statistic)
    summary = {"points": points, "spearman": rho, "skipped": skipped}
    write_json(out_dir / "summary.json", summary)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.scatter(x, y)
    for p in points:
        ax.annotate(p["preset"], (p["map_l1"], p["accuracy"]), fontsize=7)
    ax.set_xlabel("map l1 summary")
    ax.set_ylabel("mean target accuracy")
    fig.tight_layout()
    fig.savefig(out_dir / "correlation.png", metadata={"Software": None})
    plt.close(fig)
    return summary
