"""Coded distributed-inference simulation.

Requests are grouped k at a time; each group dispatches k + r work units (the
k data inputs plus r encoded parities) to unreliable workers. Unavailability
is injected per the configured failure model, available outputs pass through,
and groups with at most r missing outputs are decoded to reconstruct the
missing data predictions. Anything beyond the code's resilience is lost; by
default a lost prediction counts as wrong (the convention under which a
fraction p of lost requests drops accuracy by exactly p times the base
accuracy), optionally as a uniform random guess.

Failure models:

* ``per-group-capped`` — each group loses f units with E[f] = p * (k + r)
  and f <= r always, positions uniform; the long-run unavailable fraction of
  data outputs is exactly p. When p exceeds r / (k + r) the cap binds and a
  warning is emitted.
* ``independent-bernoulli`` — every unit fails independently with
  probability p; groups can exceed the code's resilience.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .coding import TrainedCode
from .evaluation import coded_group_outputs
from .exceptions import CompatibilityError, ConfigurationError
from .validation import check_dataset_geometry

__all__ = ["SimConfig", "SimResult", "expected_accuracy", "simulate"]

FAILURE_MODELS = ("per-group-capped", "independent-bernoulli")


@dataclass
class SimConfig:
    """Failure model, unavailability probability, and request volume."""

    p: float
    requests: int = 10_000
    failure_model: str = "per-group-capped"
    seed: int = 0
    unrecoverable: str = "wrong"  # or "random-guess"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"p must lie in [0, 1], got {self.p}")
        if self.failure_model not in FAILURE_MODELS:
            raise ConfigurationError(
                f"failure_model must be one of {FAILURE_MODELS}, got "
                f"{self.failure_model!r}")
        if self.unrecoverable not in ("wrong", "random-guess"):
            raise ConfigurationError(
                "unrecoverable must be 'wrong' or 'random-guess'")
        if self.requests < 1:
            raise ConfigurationError("requests must be positive")


@dataclass
class SimResult:
    """End-to-end accuracy with and without the code, plus outcome counters.

    ``available + recovered + unrecoverable == requests`` for every seed and
    failure model.
    """

    accuracy_with_code: float
    accuracy_without_code: float
    available: int
    recovered: int
    unrecoverable: int
    requests: int
    p: float
    failure_model: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "accuracy_with_code": self.accuracy_with_code,
            "accuracy_without_code": self.accuracy_without_code,
            "available": self.available,
            "recovered": self.recovered,
            "unrecoverable": self.unrecoverable,
            "requests": self.requests,
            "p": self.p,
            "failure_model": self.failure_model,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def expected_accuracy(base_acc: float, overall_acc: float, p: float) -> float:
    """Closed-form end-to-end accuracy at unavailability fraction p.

    A fraction 1 - p of predictions come from the base model directly; the
    unavailable fraction p is answered at ``overall_acc`` (zero for the
    no-code system, where a lost request counts as wrong).
    """

    return (1.0 - p) * base_acc + p * overall_acc


def _draw_failures(rng: np.random.Generator, n_groups: int, group_size: int,
                   r: int, cfg: SimConfig) -> np.ndarray:
    """Boolean (n_groups, group_size) unavailability matrix."""

    if cfg.failure_model == "independent-bernoulli":
        return rng.random((n_groups, group_size)) < cfg.p

    q = cfg.p * group_size
    if q > r + 1e-12:
        warnings.warn(
            f"p={cfg.p} exceeds r/(k+r)={r / group_size:.4f}; the per-group cap "
            "binds and the realized unavailability stays below p",
            stacklevel=3)
        q = float(r)
    base = math.floor(q)
    counts = base + (rng.random(n_groups) < (q - base)).astype(np.int64)
    order = rng.random((n_groups, group_size)).argsort(axis=1)
    mask = np.zeros((n_groups, group_size), dtype=bool)
    rows = np.arange(group_size)[None, :] < counts[:, None]
    np.put_along_axis(mask, order, rows, axis=1)
    return mask


def simulate(dataset, base_model, trained_code: TrainedCode, config: SimConfig,
             *, batch_size: int = 512,
             device: str | torch.device = "cpu") -> SimResult:
    """Monte-Carlo coded-inference run over a labeled dataset.

    Requests are drawn uniformly with replacement and processed in whole
    groups (the request count is rounded up to a multiple of k; the processed
    count is reported in the result).
    """

    if trained_code.base_digest != base_model.param_digest:
        raise CompatibilityError(
            "trained code was built against base digest "
            f"{trained_code.base_digest[:12]}…, got {base_model.param_digest[:12]}…")
    code_config = trained_code.config
    check_dataset_geometry(dataset.images, code_config)
    if dataset.labels is None:
        raise ConfigurationError("simulation needs a labeled dataset")

    k, r = code_config.k, code_config.r
    group_size = code_config.group_size
    n_groups = -(-config.requests // k)  # ceil
    total = n_groups * k

    rng = np.random.default_rng(config.seed)
    request_idx = rng.integers(0, len(dataset), size=total)
    labels = dataset.labels[request_idx].reshape(n_groups, k)

    encoder = trained_code.encoder.to(device).eval()
    decoder = trained_code.decoder.to(device).eval()
    base_model.to(device)

    # Raw outputs for every work unit of every group (data then parities).
    group_images = dataset.images[request_idx]
    group_outputs = coded_group_outputs(encoder, base_model, group_images,
                                        code_config, batch_size=batch_size,
                                        device=device)
    base_pred = group_outputs[:, :k, :].argmax(axis=-1)
    base_correct = base_pred == labels

    failed = _draw_failures(rng, n_groups, group_size, r, config)
    data_failed = failed[:, :k]
    decodable = failed.sum(axis=1) <= r

    # Without the code there are no parities: a failed data output is wrong.
    correct_without = (~data_failed & base_correct).sum()

    available_mask = ~data_failed
    recovered_mask = data_failed & decodable[:, None]
    unrecoverable_mask = data_failed & ~decodable[:, None]

    correct_with = (available_mask & base_correct).sum()

    # Decode group-by-pattern so each distinct erasure is one batched pass.
    needs_decode = np.flatnonzero(recovered_mask.any(axis=1))
    patterns: dict[tuple[int, ...], list[int]] = {}
    for g in needs_decode:
        patterns.setdefault(tuple(np.flatnonzero(failed[g])), []).append(g)
    with torch.no_grad():
        for pattern, group_ids in patterns.items():
            avail = torch.ones(group_size, dtype=torch.bool, device=device)
            avail[list(pattern)] = False
            data_positions = [pos for pos in pattern if pos < k]
            for start in range(0, len(group_ids), batch_size):
                ids = group_ids[start:start + batch_size]
                outs = torch.from_numpy(group_outputs[ids]).to(device)
                recons = decoder(outs, avail).cpu().numpy()
                pred = recons[:, data_positions, :].argmax(axis=-1)
                correct_with += (pred == labels[ids][:, data_positions]).sum()

    n_unrecoverable = int(unrecoverable_mask.sum())
    if config.unrecoverable == "random-guess" and n_unrecoverable:
        guesses = rng.integers(0, code_config.m, size=n_unrecoverable)
        correct_with += (guesses == labels[unrecoverable_mask]).sum()

    return SimResult(
        accuracy_with_code=float(correct_with) / total,
        accuracy_without_code=float(correct_without) / total,
        available=int(available_mask.sum()),
        recovered=int(recovered_mask.sum()),
        unrecoverable=n_unrecoverable,
        requests=total,
        p=config.p,
        failure_model=config.failure_model,
        seed=config.seed,
    )
