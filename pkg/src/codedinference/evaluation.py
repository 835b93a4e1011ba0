"""Accuracy metrics and full-dataset evaluation of a trained code.

Two notions of accuracy are tracked for reconstructed outputs: recovery
accuracy (argmax of the reconstruction matches the argmax of the true base
output — isolates code quality from classifier quality) and overall accuracy
(argmax matches the true label). A dataset evaluation runs every enumerated
unavailability scenario over the test split and aggregates by an unweighted
mean across scenarios, unless explicit scenario weights are supplied.

Argmax ties break toward the lowest class index everywhere, for both base
outputs and reconstructions.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .coding import TrainedCode
from .exceptions import CompatibilityError, ConfigurationError
from .geometry import CodeConfig, enumerate_scenarios
from .validation import check_dataset_geometry

__all__ = [
    "recovery_accuracy",
    "overall_accuracy",
    "stratified_recovery",
    "error_rank_histogram",
    "ScenarioResult",
    "EvalReport",
    "evaluate",
    "coded_group_outputs",
]

CSV_COLUMNS = ["dataset", "base_model", "k", "loss", "architecture",
               "recovery_acc", "overall_acc"]


def _argmax(scores: np.ndarray) -> np.ndarray:
    """Lowest-index argmax along the last axis."""
    return np.asarray(scores).argmax(axis=-1)


def recovery_accuracy(recons, base_outputs) -> float | None:
    """Fraction of reconstructions whose argmax matches the base output's.

    ``recons`` and ``base_outputs`` are aligned (N, m) arrays covering the
    unavailable data positions. Returns None when there is nothing to score.
    """

    recons = np.asarray(recons)
    if recons.size == 0:
        return None
    return float((_argmax(recons) == _argmax(base_outputs)).mean())


def overall_accuracy(recons, labels) -> float | None:
    """Fraction of reconstructions whose argmax equals the true label."""

    if labels is None:
        raise ConfigurationError(
            "overall accuracy needs labels; use recovery_accuracy for "
            "unlabeled data")
    recons = np.asarray(recons)
    if recons.size == 0:
        return None
    return float((_argmax(recons) == np.asarray(labels)).mean())


def stratified_recovery(recons, base_outputs, labels) -> tuple[float | None, float | None]:
    """Recovery accuracy split by whether the base model classifies correctly.

    Returns (correct-stratum, incorrect-stratum); an empty stratum is None,
    never zero.
    """

    if labels is None:
        raise ConfigurationError("stratified recovery needs labels")
    recons = np.asarray(recons)
    base_outputs = np.asarray(base_outputs)
    labels = np.asarray(labels)
    base_pred = _argmax(base_outputs)
    match = _argmax(recons) == base_pred
    correct = base_pred == labels
    strata = []
    for mask in (correct, ~correct):
        strata.append(float(match[mask].mean()) if mask.any() else None)
    return strata[0], strata[1]


def error_rank_histogram(recons, base_outputs, m: int) -> dict[int, float]:
    """Distribution of predicted-class rank within the base output, for the
    inaccurate reconstructions only.

    Rank 1 is the base argmax itself and cannot occur here; ranks 2..m are
    returned as fractions of the inaccurate count (zero entries included).
    Returns an empty dict when every reconstruction is accurate. Ranking uses
    descending score with index as tie-break, consistent with the argmax rule.
    """

    recons = np.asarray(recons)
    base_outputs = np.asarray(base_outputs)
    pred = _argmax(recons)
    base_pred = _argmax(base_outputs)
    wrong = pred != base_pred
    if not wrong.any():
        return {}
    histogram = {rank: 0 for rank in range(2, m + 1)}
    for scores, cls in zip(base_outputs[wrong], pred[wrong]):
        better = (scores > scores[cls]).sum() + (
            (scores == scores[cls]) & (np.arange(m) < cls)).sum()
        histogram[int(better) + 1] += 1
    total = int(wrong.sum())
    return {rank: count / total for rank, count in histogram.items()}


@dataclass
class ScenarioResult:
    pattern: tuple[int, ...]
    recovery: float | None
    overall: float | None
    count: int


@dataclass
class EvalReport:
    """Per-scenario and aggregate accuracies plus the error analyses."""

    dataset: str
    base_model: str
    config: CodeConfig
    loss: str
    architecture: str
    scenarios: list[ScenarioResult]
    recovery_accuracy: float | None
    overall_accuracy: float | None
    stratified_correct: float | None = None
    stratified_incorrect: float | None = None
    rank_histogram: dict[int, float] = field(default_factory=dict)
    total_reconstructions: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "base_model": self.base_model,
            "code_config": self.config.to_dict(),
            "loss": self.loss,
            "architecture": self.architecture,
            "recovery_accuracy": self.recovery_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "stratified": {"base_correct": self.stratified_correct,
                           "base_incorrect": self.stratified_incorrect},
            "rank_histogram": {str(k): v for k, v in self.rank_histogram.items()},
            "total_reconstructions": self.total_reconstructions,
            "per_scenario": [
                {"pattern": list(s.pattern), "recovery": s.recovery,
                 "overall": s.overall, "count": s.count}
                for s in self.scenarios
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else f"{x:.6f}"
        return [self.dataset, self.base_model, str(self.config.k), self.loss,
                self.architecture, fmt(self.recovery_accuracy),
                fmt(self.overall_accuracy)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerow(self.csv_row())
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            dataset=d["dataset"], base_model=d["base_model"],
            config=CodeConfig.from_dict(d["code_config"]), loss=d["loss"],
            architecture=d["architecture"],
            scenarios=[ScenarioResult(tuple(s["pattern"]), s["recovery"],
                                      s["overall"], s["count"])
                       for s in d.get("per_scenario", [])],
            recovery_accuracy=d["recovery_accuracy"],
            overall_accuracy=d["overall_accuracy"],
            stratified_correct=d.get("stratified", {}).get("base_correct"),
            stratified_incorrect=d.get("stratified", {}).get("base_incorrect"),
            rank_histogram={int(k): v for k, v in d.get("rank_histogram", {}).items()},
            total_reconstructions=d.get("total_reconstructions", 0),
        )


@torch.no_grad()
def coded_group_outputs(encoder, base_model, images: np.ndarray, config: CodeConfig,
                        *, batch_size: int = 256,
                        device: str | torch.device = "cpu") -> np.ndarray:
    """Raw base outputs for every position of every group: (G, k+r, m).

    Images are partitioned sequentially into floor(N/k) groups; the remainder
    is dropped. Encoding and the base forward are batched; this is the
    expensive part of evaluation and is shared across scenarios.
    """

    usable = (len(images) // config.k) * config.k
    groups = images[:usable].reshape(-1, config.k, *config.input_shape)
    outs = []
    for start in range(0, len(groups), batch_size):
        batch = torch.from_numpy(groups[start:start + batch_size]).to(device)
        parities = encoder(batch)
        flat = torch.cat([batch, parities], dim=1).reshape(
            -1, *config.input_shape)
        scores = base_model(flat).reshape(batch.shape[0], config.group_size, config.m)
        outs.append(scores.cpu().numpy())
    if not outs:
        return np.empty((0, config.group_size, config.m), dtype=np.float32)
    return np.concatenate(outs, axis=0)


@torch.no_grad()
def _decode_scenario(decoder, group_outputs: np.ndarray, pattern,
                     batch_size: int = 4096, device="cpu") -> np.ndarray:
    config = decoder.config
    avail = torch.ones(config.group_size, dtype=torch.bool)
    avail[list(pattern.unavailable)] = False
    recons = []
    for start in range(0, len(group_outputs), batch_size):
        outs = torch.from_numpy(group_outputs[start:start + batch_size]).to(device)
        recons.append(decoder(outs, avail.to(device)).cpu().numpy())
    return np.concatenate(recons, axis=0)


def evaluate(trained_code: TrainedCode, base_model, dataset, *,
             scenario_weights=None, batch_size: int = 256,
             device: str | torch.device = "cpu") -> EvalReport:
    """Run every unavailability scenario over a dataset and aggregate.

    Refuses to evaluate a code against a base model other than the one it was
    trained through (parameter digest check). Aggregate accuracies are the
    unweighted scenario means unless ``scenario_weights`` (aligned with the
    enumeration order) is given. The stratified and rank analyses pool the
    reconstructions of all scenarios.
    """

    if trained_code.base_digest != base_model.param_digest:
        raise CompatibilityError(
            "trained code was built against base digest "
            f"{trained_code.base_digest[:12]}…, got {base_model.param_digest[:12]}…")
    config = trained_code.config
    check_dataset_geometry(dataset.images, config)

    encoder = trained_code.encoder.to(device).eval()
    decoder = trained_code.decoder.to(device).eval()
    base_model.to(device)

    scenarios = enumerate_scenarios(config)
    group_outputs = coded_group_outputs(encoder, base_model, dataset.images,
                                        config, batch_size=batch_size,
                                        device=device)
    n_groups = len(group_outputs)
    labels = None
    if dataset.labels is not None:
        labels = dataset.labels[: n_groups * config.k].reshape(n_groups, config.k)

    results = []
    pooled_recons, pooled_base, pooled_labels = [], [], []
    for pattern in scenarios:
        recons = _decode_scenario(decoder, group_outputs, pattern, device=device)
        positions = list(pattern.data_positions(config.k))
        recon_slots = recons[:, positions, :].reshape(-1, config.m)
        base_slots = group_outputs[:, positions, :].reshape(-1, config.m)
        rec = recovery_accuracy(recon_slots, base_slots)
        ove = None
        if labels is not None:
            ove = overall_accuracy(recon_slots, labels[:, positions].reshape(-1))
        results.append(ScenarioResult(pattern.unavailable, rec, ove,
                                      len(recon_slots)))
        pooled_recons.append(recon_slots)
        pooled_base.append(base_slots)
        if labels is not None:
            pooled_labels.append(labels[:, positions].reshape(-1))

    def aggregate(values):
        vals = [v for v in values if v is not None]
        if not vals:
            return None
        if scenario_weights is not None:
            w = np.asarray(scenario_weights, dtype=float)
            if len(w) != len(values):
                raise ConfigurationError(
                    f"{len(w)} scenario weights for {len(values)} scenarios")
            picked = [(v, wi) for v, wi in zip(values, w) if v is not None]
            total = sum(wi for _, wi in picked)
            return float(sum(v * wi for v, wi in picked) / total)
        return float(np.mean(vals))

    all_recons = np.concatenate(pooled_recons) if pooled_recons else np.empty((0, config.m))
    all_base = np.concatenate(pooled_base) if pooled_base else np.empty((0, config.m))
    strat_correct = strat_incorrect = None
    rank_hist: dict[int, float] = {}
    if len(all_recons):
        rank_hist = error_rank_histogram(all_recons, all_base, config.m)
        if pooled_labels:
            strat_correct, strat_incorrect = stratified_recovery(
                all_recons, all_base, np.concatenate(pooled_labels))

    return EvalReport(
        dataset=dataset.name or "unnamed",
        base_model=base_model.name,
        config=config,
        loss=trained_code.loss_name,
        architecture=trained_code.architecture,
        scenarios=results,
        recovery_accuracy=aggregate([s.recovery for s in results]),
        overall_accuracy=aggregate([s.overall for s in results]),
        stratified_correct=strat_correct,
        stratified_incorrect=strat_incorrect,
        rank_histogram=rank_hist,
        total_reconstructions=int(len(all_recons)),
    )
