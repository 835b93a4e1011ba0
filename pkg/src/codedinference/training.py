"""Tandem training of the encoder and decoder through a frozen base model.

One training sample is a group of k images. For each sample the forward pass
encodes the parities, applies the base function to all k + r inputs, zero-
masks the outputs named by an unavailability scenario, and decodes; the loss
is computed on the unavailable data positions and backpropagated through the
decoder, the (frozen) base function, and the encoder. Every enumerated
scenario contributes to every sample; the per-scenario losses are averaged
before the optimizer step so the step scale does not depend on k.

Optimization is Adam with loss-added L2 regularization. All randomness is
derived from the config seed, so a run is reproducible bit-for-bit on the
same hardware.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .coding import Decoder, TrainedCode, build_encoder, init_parameters
from .data import Dataset, epoch_groups
from .exceptions import ConfigurationError, ContractError, NonFiniteLossError
from .geometry import CodeConfig, enumerate_scenarios
from .validation import check_dataset_geometry

__all__ = [
    "CANONICAL_LOSS_NAMES",
    "canonical_loss",
    "loss_mse_base",
    "loss_kl_base",
    "loss_xent_label",
    "TrainConfig",
    "train_step",
    "train",
]

CANONICAL_LOSS_NAMES = {"mse-base": "MSE-Base", "kl-base": "KL-Base",
                        "xent-label": "XENT-Label"}


def canonical_loss(name: str) -> str:
    """Normalize a loss name; unknown names raise with the valid choices."""

    key = str(name).strip().lower()
    if key not in CANONICAL_LOSS_NAMES:
        raise ConfigurationError(
            f"unknown loss {name!r}; choose one of "
            "{MSE-Base, KL-Base, XENT-Label}"
        )
    return key


def _check_same_shape(recon: torch.Tensor, target: torch.Tensor) -> None:
    if recon.shape != target.shape:
        raise ContractError(
            f"reconstruction shape {tuple(recon.shape)} does not match target "
            f"shape {tuple(target.shape)}"
        )


def loss_mse_base(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between reconstructed and true raw outputs."""

    _check_same_shape(recon, target)
    return F.mse_loss(recon, target)


def loss_kl_base(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """KL divergence between the softmax distributions, target as reference.

    Both inputs are raw score vectors; softmax is applied internally, so the
    loss is invariant to a uniform shift of either vector. Reduction is the
    per-vector KL summed over classes, averaged over the batch.
    """

    _check_same_shape(recon, target)
    flat_r = recon.reshape(-1, recon.shape[-1])
    flat_t = target.reshape(-1, target.shape[-1])
    log_p = F.log_softmax(flat_t, dim=-1)
    log_q = F.log_softmax(flat_r, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()


def loss_xent_label(recon: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between reconstructed raw outputs and true labels."""

    flat = recon.reshape(-1, recon.shape[-1])
    labels = labels.reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= flat.shape[-1]):
        raise ContractError(
            f"labels must lie in [0, {flat.shape[-1]})"
        )
    return F.cross_entropy(flat, labels)


@dataclass
class TrainConfig:
    """Hyperparameters for one code-training run.

    ``batch_samples`` counts groups of k images per minibatch; None picks 64
    for k <= 2 and 32 otherwise. ``scenario_sizes`` is "exact" (patterns of
    size exactly r) or "all" (every size up to r). ``loss_positions`` is
    "unavailable" (default: only the erased data slots are supervised) or
    "all-data" (every data slot).
    """

    loss: str = "mse-base"
    learning_rate: float = 1e-3
    l2: float = 1e-5
    batch_samples: int | None = None
    epochs: int = 150
    patience: int = 20
    seed: int = 0
    validation_fraction: float = 0.1
    scenario_sizes: str = "exact"
    loss_positions: str = "unavailable"
    deterministic: bool = False
    device: str = "cpu"

    def __post_init__(self):
        self.loss = canonical_loss(self.loss)
        if self.scenario_sizes not in ("exact", "all"):
            raise ConfigurationError("scenario_sizes must be 'exact' or 'all'")
        if self.loss_positions not in ("unavailable", "all-data"):
            raise ConfigurationError("loss_positions must be 'unavailable' or 'all-data'")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in [0, 1)")

    def resolved_batch_samples(self, k: int) -> int:
        if self.batch_samples is not None:
            return int(self.batch_samples)
        return 64 if k <= 2 else 32


def _scenario_loss(recons, outs, labels, pattern, config, loss_name, loss_positions):
    """Loss for one scenario over a minibatch of decoded groups."""

    if loss_positions == "all-data":
        positions = list(range(config.k))
    else:
        positions = list(pattern.data_positions(config.k))
    recon_slots = recons[:, positions, :]
    if loss_name == "xent-label":
        return loss_xent_label(recon_slots, labels[:, positions])
    targets = outs[:, positions, :].detach()
    if loss_name == "mse-base":
        return loss_mse_base(recon_slots, targets)
    return loss_kl_base(recon_slots, targets)


def train_step(encoder: nn.Module, decoder: Decoder, base_model, images: torch.Tensor,
               labels: torch.Tensor | None, scenarios, optimizer, *,
               loss_name: str = "mse-base", loss_positions: str = "unavailable",
               scenario_callback=None) -> float:
    """One optimizer step over a minibatch of groups and all scenarios.

    images: (S, k, C, n, n). Returns the scalar loss (scenario average).
    Only encoder and decoder parameters are updated; the base model is frozen
    and merely conducts gradients.
    """

    config = decoder.config
    s = images.shape[0]
    parities = encoder(images)
    all_inputs = torch.cat([images, parities], dim=1)
    flat = all_inputs.reshape(s * config.group_size, *config.input_shape)
    outs = base_model(flat).reshape(s, config.group_size, config.m)

    device = outs.device
    total = outs.new_zeros(())
    for pattern in scenarios:
        if scenario_callback is not None:
            scenario_callback(pattern)
        avail = torch.ones(config.group_size, dtype=torch.bool, device=device)
        avail[list(pattern.unavailable)] = False
        recons = decoder(outs, avail)
        value = _scenario_loss(recons, outs, labels, pattern, config,
                               loss_name, loss_positions)
        if not torch.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite loss {value.item()!r} for pattern "
                f"{pattern.unavailable}", pattern=pattern.unavailable)
        total = total + value
    loss = total / len(scenarios)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def _recovery_on_groups(encoder, decoder, base_model, images, groups, config,
                        scenarios, batch_size, device) -> float | None:
    """Recovery accuracy over fixed groups, averaged across scenarios."""

    if len(groups) == 0:
        return None
    matches, count = 0, 0
    for start in range(0, len(groups), batch_size):
        idx = groups[start:start + batch_size]
        batch = torch.from_numpy(images[idx.reshape(-1)]).to(device)
        batch = batch.reshape(len(idx), config.k, *config.input_shape)
        parities = encoder(batch)
        flat = torch.cat([batch, parities], dim=1).reshape(
            len(idx) * config.group_size, *config.input_shape)
        outs = base_model(flat).reshape(len(idx), config.group_size, config.m)
        base_pred = outs[:, :config.k, :].argmax(dim=-1)
        for pattern in scenarios:
            avail = torch.ones(config.group_size, dtype=torch.bool, device=device)
            avail[list(pattern.unavailable)] = False
            recons = decoder(outs, avail)
            positions = list(pattern.data_positions(config.k))
            recon_pred = recons[:, positions, :].argmax(dim=-1)
            matches += int((recon_pred == base_pred[:, positions]).sum())
            count += recon_pred.numel()
    return matches / count if count else None


def train(dataset: Dataset, base_model, config: CodeConfig,
          train_config: TrainConfig | None = None, *, architecture: str = "mlp",
          share_channel_weights: bool = True, log_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None, resume: bool = False,
          scenario_callback=None) -> TrainedCode:
    """Train an erasure code against a frozen base model.

    Runs up to ``epochs`` epochs of minibatch steps over all unavailability
    scenarios, logging one NDJSON record per step and per epoch, and returns
    the checkpoint with the best validation recovery accuracy (the final one
    when no validation split is held out). Early stopping kicks in after
    ``patience`` epochs without improvement.
    """

    cfg = train_config or TrainConfig()
    device = torch.device(cfg.device)
    was_deterministic = torch.are_deterministic_algorithms_enabled()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)

    check_dataset_geometry(dataset.images, config)
    if base_model.output_dim != config.m:
        raise ConfigurationError(
            f"base model emits {base_model.output_dim} scores, config expects {config.m}")
    if cfg.loss == "xent-label" and dataset.labels is None:
        raise ConfigurationError("XENT-Label requires a labeled dataset")

    digest_before = base_model.param_digest
    base_model.to(device)

    seeds = np.random.SeedSequence(cfg.seed)
    split_rng, order_seed = seeds.spawn(2)
    n = len(dataset)
    perm = np.random.default_rng(split_rng).permutation(n)
    n_val = int(round(n * cfg.validation_fraction))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    batch_samples = cfg.resolved_batch_samples(config.k)
    if len(train_idx) // config.k < batch_samples:
        raise ConfigurationError(
            f"dataset too small: {len(train_idx)} training images make "
            f"{len(train_idx) // config.k} groups, need at least {batch_samples} "
            f"(one minibatch)"
        )

    scenarios = enumerate_scenarios(config,
                                    include_smaller=cfg.scenario_sizes == "all")
    encoder = build_encoder(architecture, config,
                            share_channel_weights=share_channel_weights)
    decoder = Decoder(config)
    init_parameters(encoder, cfg.seed)
    init_parameters(decoder, cfg.seed + 1)
    encoder.to(device)
    decoder.to(device)
    optimizer = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()),
        lr=cfg.learning_rate, weight_decay=cfg.l2)

    start_epoch = 0
    best = {"val": -np.inf, "epoch": -1, "encoder": None, "decoder": None}
    history: list[dict] = []
    last_path = Path(checkpoint_dir) / "last.pt" if checkpoint_dir else None
    if resume and last_path is not None and last_path.exists():
        state = torch.load(last_path, map_location=device, weights_only=False)
        encoder.load_state_dict(state["encoder"])
        decoder.load_state_dict(state["decoder"])
        optimizer.load_state_dict(state["optimizer"])
        start_epoch = state["epoch"] + 1
        best.update(state["best"])
        history = state.get("history", [])

    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if resume else "w", encoding="utf-8")

    def emit(record: dict) -> None:
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    labels_all = dataset.labels
    images_all = dataset.images
    val_groups = val_idx[: (len(val_idx) // config.k) * config.k].reshape(-1, config.k)

    epochs_since_best = 0
    aborted = False
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=order_seed.entropy,
                                       spawn_key=(*order_seed.spawn_key, epoch)))
            groups = train_idx[epoch_groups(len(train_idx), config.k, rng).reshape(-1)]
            groups = groups.reshape(-1, config.k)
            step = 0
            for start in range(0, len(groups), batch_samples):
                idx = groups[start:start + batch_samples]
                images = torch.from_numpy(images_all[idx.reshape(-1)]).to(device)
                images = images.reshape(len(idx), config.k, *config.input_shape)
                labels = None
                if labels_all is not None:
                    labels = torch.from_numpy(labels_all[idx]).to(device)
                try:
                    loss = train_step(
                        encoder, decoder, base_model, images, labels, scenarios,
                        optimizer, loss_name=cfg.loss,
                        loss_positions=cfg.loss_positions,
                        scenario_callback=scenario_callback)
                except NonFiniteLossError as exc:
                    emit({"epoch": epoch, "step": step, "error": "non-finite loss",
                          "pattern": list(exc.pattern or ()),
                          "group_indices": idx.reshape(-1).tolist(),
                          "wall_time": time.time()})
                    if best["encoder"] is None:
                        raise
                    aborted = True
                    break
                emit({"epoch": epoch, "step": step, "loss": loss,
                      "wall_time": time.time()})
                step += 1
            if aborted:
                break

            val_recovery = _recovery_on_groups(
                encoder, decoder, base_model, images_all, val_groups, config,
                scenarios, batch_samples, device)
            emit({"epoch": epoch, "val_recovery_acc": val_recovery,
                  "wall_time": time.time()})

            score = val_recovery if val_recovery is not None else -loss
            if score > best["val"]:
                best.update(val=score, epoch=epoch,
                            encoder={k: v.detach().clone() for k, v in encoder.state_dict().items()},
                            decoder={k: v.detach().clone() for k, v in decoder.state_dict().items()},
                            val_recovery=val_recovery)
                epochs_since_best = 0
            else:
                epochs_since_best += 1

            if last_path is not None:
                last_path.parent.mkdir(parents=True, exist_ok=True)
                torch.save({"encoder": encoder.state_dict(),
                            "decoder": decoder.state_dict(),
                            "optimizer": optimizer.state_dict(),
                            "epoch": epoch, "best": best, "history": history},
                           last_path)

            if cfg.patience and epochs_since_best >= cfg.patience:
                break
    finally:
        if log_file is not None:
            log_file.close()
        if cfg.deterministic:
            torch.use_deterministic_algorithms(was_deterministic)

    if best["encoder"] is not None:
        encoder.load_state_dict(best["encoder"])
        decoder.load_state_dict(best["decoder"])

    if base_model.param_digest != digest_before:
        raise RuntimeError("base model parameters changed during code training")

    train_eval_groups = train_idx[: min(len(train_idx), 2000 * config.k)]
    train_eval_groups = train_eval_groups[
        : (len(train_eval_groups) // config.k) * config.k].reshape(-1, config.k)
    train_recovery = _recovery_on_groups(
        encoder, decoder, base_model, images_all, train_eval_groups, config,
        scenarios, batch_samples, device)

    trained = TrainedCode(
        encoder=encoder, decoder=decoder, config=config,
        architecture=architecture, loss_name=CANONICAL_LOSS_NAMES[cfg.loss],
        base_digest=digest_before, seed=cfg.seed,
        epoch=best["epoch"] if best["epoch"] >= 0 else cfg.epochs - 1,
        train_recovery=train_recovery, val_recovery=best.get("val_recovery"),
        extra={"l2_convention": "loss-added", "train_config": asdict(cfg)},
        history=history,
    )
    return trained
