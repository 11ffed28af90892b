import numpy as np
import pytest

from sada import data


@pytest.fixture(scope="session")
def mnist():
    return data.mnist5k()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def blob_images(n_per_class, n_classes=3, size=8, seed=0):
    """Classes are Gaussian blobs at distinct positions plus pixel noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    centers = [(2, 2), (5, 5), (2, 5), (5, 2)][:n_classes]
    images, labels = [], []
    for k, (cy, cx) in enumerate(centers):
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0)
        x = blob[None] + 0.15 * rng.standard_normal((n_per_class, size, size))
        images.append(np.clip(x, 0, 1))
        labels.append(np.full(n_per_class, k))
    return np.concatenate(images)[:, None].astype(np.float32), np.concatenate(labels).astype(np.int64)


@pytest.fixture(scope="session")
def tiny_source(tmp_path_factory):
    """IDX files for a 3-class 8x8 toy source plus a small experiment config dict."""
    root = tmp_path_factory.mktemp("tiny")
    xtr, ytr = blob_images(20, seed=0)
    xte, yte = blob_images(10, seed=1)
    paths = {}
    for split, x, y in (("train", xtr, ytr), ("test", xte, yte)):
        paths[f"{split}_images"] = str(data.write_idx(root / f"{split}-images.idx", np.round(x[:, 0] * 255).astype(np.uint8)))
        paths[f"{split}_labels"] = str(data.write_idx(root / f"{split}-labels.idx", y.astype(np.uint8)))
    cfg = {
        "source": {"kind": "idx", **paths},
        "targets": [{"kind": "amplitude_scale_lowfreq", "severity": 3}, {"kind": "gaussian_noise", "severity": 3}],
        "model": {"in_channels": 1, "height": 8, "width": 8, "n_classes": 3, "conv_channels": [4], "kernel": 3,
                  "pool": 2, "hidden": 8, "seed": 0},
        "erm": {"lr": 0.05, "momentum": 0.9, "epochs": 3, "batch_size": 16, "milestones": [20], "seed": 0},
        "train": {"lam": 0.25, "optim": {"lr": 0.01, "momentum": 0.9, "epochs": 1, "batch_size": 16,
                                          "milestones": [20], "seed": 0},
                  "aug": {"T": 2}},
        "map": {"fraction": 0.5},
        "seeds": [0, 1],
    }
    return cfg


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
