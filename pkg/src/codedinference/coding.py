"""Learnable encoding and decoding networks.

The encoder maps k data inputs of shape (channels, n, n) to r parity inputs
of the same shape; the decoder maps the k + r raw base-function outputs (with
unavailable positions zero-filled) to k reconstructions. Multi-channel images
are encoded per channel: a single-channel core is applied to each channel
independently, sharing weights across channels by default.

Forward passes are pure given parameters; parameters change only inside the
training loop.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .exceptions import ConfigurationError, ContractError
from .geometry import CodeConfig, ErasurePattern, availability_mask

__all__ = [
    "MLPEncoder",
    "ConvEncoder",
    "Decoder",
    "build_encoder",
    "decode",
    "init_parameters",
    "TrainedCode",
    "ENCODER_ARCHITECTURES",
]

CONV_DILATIONS = (1, 1, 2, 4, 8, 1)
CONV_WIDTH_PER_INPUT = 20


def _check_encoder_input(x: torch.Tensor, config: CodeConfig) -> tuple[torch.Tensor, bool]:
    """Normalize encoder input to (B, k, C, n, n); returns (tensor, was_single)."""

    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    expected = (config.k, config.channels, config.n, config.n)
    if x.dim() != 5 or tuple(x.shape[1:]) != expected:
        raise ContractError(
            f"encoder expects inputs of shape {expected} or (B, *{expected}), "
            f"got {tuple(x.shape)}"
        )
    return x, single


class _PerChannel(nn.Module):
    """Apply single-channel core(s) to each channel of (B, k, C, n, n) input.

    With one core, channels are folded into the batch dimension (shared
    weights); with per-channel cores, each channel gets its own module.
    """

    def __init__(self, cores: nn.ModuleList, config: CodeConfig):
        super().__init__()
        self.cores = cores
        self.config = config

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, k, c, n, _ = x.shape
        r = self.config.r
        if len(self.cores) == 1:
            folded = x.permute(0, 2, 1, 3, 4).reshape(b * c, k, n, n)
            out = self.cores[0](folded).reshape(b, c, r, n, n)
        else:
            out = torch.stack([self.cores[i](x[:, :, i]) for i in range(c)], dim=1)
        return out.permute(0, 2, 1, 3, 4)  # (B, r, C, n, n)


class _MLPCore(nn.Module):
    """Single-channel MLP core: (B, k, n, n) -> (B, r, n, n) via flat FC layers."""

    def __init__(self, k: int, r: int, n: int):
        super().__init__()
        self.r, self.n = r, n
        kn2 = k * n * n
        self.net = nn.Sequential(nn.Linear(kn2, kn2), nn.ReLU(),
                                 nn.Linear(kn2, r * n * n))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.net(x.reshape(x.shape[0], -1))
        return out.reshape(-1, self.r, self.n, self.n)


class MLPEncoder(nn.Module):
    """Two fully-connected layers over the k flattened inputs, per channel.

    Per channel the k n^2-length vectors are concatenated, passed through
    FC(k n^2 -> k n^2) + ReLU and FC(k n^2 -> r n^2), and reshaped to the r
    parity images. No activation follows the final layer.
    """

    architecture = "mlp"

    def __init__(self, config: CodeConfig, share_channel_weights: bool = True):
        super().__init__()
        self.config = config
        self.share_channel_weights = share_channel_weights
        n_cores = 1 if share_channel_weights else config.channels
        self.body = _PerChannel(nn.ModuleList(
            [_MLPCore(config.k, config.r, config.n) for _ in range(n_cores)]),
            config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, single = _check_encoder_input(x, self.config)
        parities = self.body(x)
        return parities.squeeze(0) if single else parities


class ConvEncoder(nn.Module):
    """Dilated-convolution encoder operating on inputs in their n x n form.

    The k inputs enter as k convolution channels. Six 3x3 stride-1 layers with
    dilations 1, 1, 2, 4, 8, 1 (zero padding equal to the dilation keeps the
    spatial size at n x n) are followed by a 1x1 layer emitting r channels;
    intermediate layers carry 20k feature channels. ReLU follows every layer
    but the last. Multi-channel images reuse one single-channel core per
    channel unless ``share_channel_weights`` is off.
    """

    architecture = "conv"

    def __init__(self, config: CodeConfig, share_channel_weights: bool = True):
        super().__init__()
        max_dilation = max(CONV_DILATIONS)
        if config.n <= max_dilation:
            raise ConfigurationError(
                f"n={config.n} is too small for the dilation-{max_dilation} "
                f"receptive field; need n > {max_dilation}"
            )
        self.config = config
        self.share_channel_weights = share_channel_weights
        width = CONV_WIDTH_PER_INPUT * config.k
        n_cores = 1 if share_channel_weights else config.channels
        self.body = _PerChannel(nn.ModuleList(
            [self._make_core(config.k, width, config.r) for _ in range(n_cores)]),
            config)

    @staticmethod
    def _make_core(k: int, width: int, r: int) -> nn.Sequential:
        layers: list[nn.Module] = []
        in_ch = k
        for d in CONV_DILATIONS:
            layers += [nn.Conv2d(in_ch, width, 3, stride=1, padding=d, dilation=d),
                       nn.ReLU()]
            in_ch = width
        layers.append(nn.Conv2d(width, r, 1, stride=1))
        return nn.Sequential(*layers)

    def dilation_schedule(self) -> list[int]:
        """Dilations read back from the built layers, in forward order."""
        return [m.dilation[0] for m in self.body.cores[0] if isinstance(m, nn.Conv2d)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, single = _check_encoder_input(x, self.config)
        parities = self.body(x)
        return parities.squeeze(0) if single else parities


ENCODER_ARCHITECTURES = {"mlp": MLPEncoder, "conv": ConvEncoder}


def build_encoder(architecture: str, config: CodeConfig,
                  share_channel_weights: bool = True) -> nn.Module:
    try:
        cls = ENCODER_ARCHITECTURES[architecture]
    except KeyError:
        raise ConfigurationError(
            f"unknown encoder architecture {architecture!r}; "
            f"choose from {sorted(ENCODER_ARCHITECTURES)}"
        ) from None
    return cls(config, share_channel_weights=share_channel_weights)


class Decoder(nn.Module):
    """3-layer MLP from the k + r zero-filled raw outputs to k reconstructions.

    Layers: FC((k+r)m -> km) + ReLU, FC(km -> km) + ReLU, FC(km -> km). The
    input keeps positional order (data first, then parities) so the decoder
    can exploit which position went missing.
    """

    def __init__(self, config: CodeConfig):
        super().__init__()
        self.config = config
        in_dim = config.group_size * config.m
        hidden = config.k * config.m
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden),
        )

    def forward(self, outputs: torch.Tensor, availability: torch.Tensor) -> torch.Tensor:
        """Zero-fill unavailable positions and reconstruct all k data outputs.

        outputs: (B, k+r, m) raw base outputs (unavailable entries may hold
        anything; they are zeroed here). availability: bool (k+r,) or
        (B, k+r), True where the output arrived.
        """

        single = outputs.dim() == 2
        if single:
            outputs = outputs.unsqueeze(0)
        expected = (self.config.group_size, self.config.m)
        if outputs.dim() != 3 or tuple(outputs.shape[1:]) != expected:
            raise ContractError(
                f"decoder expects outputs of shape {expected} or (B, *{expected}), "
                f"got {tuple(outputs.shape)}"
            )
        avail = availability.to(device=outputs.device)
        if avail.dim() == 1:
            avail = avail.unsqueeze(0)
        x = outputs * avail.unsqueeze(-1).to(outputs.dtype)
        recons = self.net(x.reshape(x.shape[0], -1))
        recons = recons.reshape(-1, self.config.k, self.config.m)
        return recons.squeeze(0) if single else recons


def decode(decoder: Decoder, outputs: torch.Tensor, pattern: ErasurePattern) -> torch.Tensor:
    """Decode one scenario: validate the pattern, zero-fill, reconstruct.

    Patterns larger than r violate the contract; parity-only patterns are
    accepted (sizes up to r can occur at inference) but flagged, since nothing
    needs reconstruction.
    """

    config = decoder.config
    if len(pattern) > config.r:
        raise ContractError(
            f"pattern of size {len(pattern)} exceeds resilience r={config.r}"
        )
    if pattern.is_parity_only(config.k):
        warnings.warn(
            f"pattern {pattern.unavailable} erases only parities; decoding is a no-op "
            "scenario (all data outputs are available)",
            stacklevel=2,
        )
    mask = torch.from_numpy(availability_mask(pattern, config))
    return decoder(outputs, mask)


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically initialize a module in place.

    Convolution weights get uniform Xavier values, fully-connected weights are
    drawn from N(0, 0.01), and every bias is zeroed. The same seed yields
    bitwise-identical parameters regardless of global RNG state.
    """

    gen = torch.Generator(device="cpu").manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.xavier_uniform_(m.weight, generator=gen)
            elif isinstance(m, nn.Linear):
                m.weight.normal_(0.0, 0.01, generator=gen)
            else:
                continue
            if m.bias is not None:
                m.bias.zero_()
    return module


@dataclass
class TrainedCode:
    """Trained encoder + decoder with provenance for safe reuse.

    ``base_digest`` pins the exact base-model parameters the code was trained
    through; evaluation and simulation refuse to run against anything else.
    """

    encoder: nn.Module
    decoder: Decoder
    config: CodeConfig
    architecture: str
    loss_name: str
    base_digest: str
    seed: int
    epoch: int = 0
    train_recovery: float | None = None
    val_recovery: float | None = None
    extra: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)

    def metadata(self) -> dict:
        return {
            "architecture": self.architecture,
            "code_config": self.config.to_dict(),
            "loss_name": self.loss_name,
            "base_param_digest": self.base_digest,
            "seed": self.seed,
            "epoch": self.epoch,
            "train_recovery_accuracy": self.train_recovery,
            "val_recovery_accuracy": self.val_recovery,
            "encoder_options": {
                "share_channel_weights": getattr(self.encoder, "share_channel_weights", True),
            },
            **self.extra,
        }

    def save(self, directory: str | Path) -> Path:
        """Write encoder.pt + decoder.pt + metadata.json under ``directory``."""

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.encoder.state_dict(), directory / "encoder.pt")
        torch.save(self.decoder.state_dict(), directory / "decoder.pt")
        (directory / "metadata.json").write_text(
            json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "TrainedCode":
        directory = Path(directory)
        meta = json.loads((directory / "metadata.json").read_text())
        config = CodeConfig.from_dict(meta["code_config"])
        encoder = build_encoder(
            meta["architecture"], config,
            share_channel_weights=meta.get("encoder_options", {}).get(
                "share_channel_weights", True))
        decoder = Decoder(config)
        encoder.load_state_dict(torch.load(directory / "encoder.pt",
                                           map_location="cpu", weights_only=True))
        decoder.load_state_dict(torch.load(directory / "decoder.pt",
                                           map_location="cpu", weights_only=True))
        known = {"architecture", "code_config", "loss_name", "base_param_digest",
                 "seed", "epoch", "train_recovery_accuracy",
                 "val_recovery_accuracy", "encoder_options"}
        return cls(
            encoder=encoder, decoder=decoder, config=config,
            architecture=meta["architecture"], loss_name=meta["loss_name"],
            base_digest=meta["base_param_digest"], seed=meta["seed"],
            epoch=meta.get("epoch", 0),
            train_recovery=meta.get("train_recovery_accuracy"),
            val_recovery=meta.get("val_recovery_accuracy"),
            extra={k: v for k, v in meta.items() if k not in known},
        )
