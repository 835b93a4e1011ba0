"""Shared fixtures: tiny differentiable base functions, synthetic datasets,
dataset-file discovery, and the acceptance-criteria summary printer."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

import codedinference as ci
from codedinference.data import uniform_sampler

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")

DATA_ENV = "CODEDINFERENCE_DATA"


# ---------------------------------------------------------------------------
# Small differentiable base functions
# ---------------------------------------------------------------------------

def make_toy_base(n: int = 4, channels: int = 1, m: int = 3,
                  seed: int = 7) -> ci.BaseModel:
    """Smooth nonlinear map (B, C, n, n) -> (B, m) with fixed random mixing.

    Weights are stored in float64 and cast to the input dtype, so the same
    base works for float32 training and float64 finite-difference checks.
    """

    gen = torch.Generator().manual_seed(seed)
    d = channels * n * n
    w1 = torch.randn(d, 16, generator=gen, dtype=torch.float64)
    w2 = torch.randn(16, m, generator=gen, dtype=torch.float64)
    b2 = torch.randn(m, generator=gen, dtype=torch.float64)

    def fn(x):
        flat = x.reshape(x.shape[0], -1)
        hidden = torch.tanh(flat @ w1.to(x.dtype))
        return hidden @ w2.to(x.dtype) + b2.to(x.dtype)

    return ci.wrap_function(fn, input_shape=(channels, n, n), output_dim=m,
                            name="toy")


@pytest.fixture
def toy_base():
    return make_toy_base()


@pytest.fixture
def toy_base_8x8():
    return make_toy_base(n=8, m=4, seed=11)


def make_labeled_dataset(base: ci.BaseModel, count: int, seed: int = 0) -> ci.Dataset:
    """Synthetic images labeled by the base model's own argmax."""

    ds = ci.synthesize(base, uniform_sampler(), count, seed=seed)
    labels = ds.targets.argmax(axis=1).astype(np.int64)
    return ci.Dataset(images=ds.images, labels=labels, targets=ds.targets,
                      name="toy-synth", preprocessing=ds.preprocessing)


@pytest.fixture
def toy_dataset(toy_base):
    return make_labeled_dataset(toy_base, 120, seed=3)


def synthetic_images(count: int, n: int = 28, channels: int = 1,
                     seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(count, channels, n, n)).astype(np.float32)


# ---------------------------------------------------------------------------
# Real dataset discovery (used by desk/extended acceptance tests)
# ---------------------------------------------------------------------------

def dataset_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def find_idx_pair(directory: Path, image_stem: str, label_stem: str):
    def find(stem):
        for cand in (directory / stem, directory / f"{stem}.gz"):
            if cand.exists():
                return cand
        return None

    images, labels = find(image_stem), find(label_stem)
    return (images, labels) if images and labels else None


def mnist_files(split: str = "train"):
    root = dataset_root()
    if root is None:
        return None
    stems = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}[split]
    return find_idx_pair(root / "mnist", *stems)


def load_mnist_or_none(split: str = "train"):
    pair = mnist_files(split)
    if pair is None:
        return None
    return ci.load_idx(pair[0], pair[1], split=split, name="mnist")


def require_env_flag(name: str) -> bool:
    return os.environ.get(name, "") == "1"


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

_ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}
_CRITERION_RE = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    match = _CRITERION_RE.search(report.nodeid)
    if not match:
        return
    key = report.nodeid
    if report.when == "call":
        _ACCEPTANCE_RESULTS[key] = (
            "PASS" if report.passed else "FAIL", "")
    elif report.when == "setup" and report.skipped:
        reason = ""
        if isinstance(report.longrepr, tuple):
            reason = report.longrepr[2]
        _ACCEPTANCE_RESULTS[key] = ("SKIP", reason)
    elif report.when == "setup" and report.failed:
        _ACCEPTANCE_RESULTS[key] = ("FAIL", "setup error")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE_RESULTS,
                         key=lambda s: (int(_CRITERION_RE.search(s).group(1)), s)):
        status, reason = _ACCEPTANCE_RESULTS[nodeid]
        number = int(_CRITERION_RE.search(nodeid).group(1))
        name = nodeid.split("::")[-1]
        suffix = f" ({reason})" if reason else ""
        tr.write_line(f"  criterion {number:02d} {status:4s} {name}{suffix}")
