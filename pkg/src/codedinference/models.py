"""Base functions whose distributed outputs the learned code protects.

A :class:`BaseModel` wraps any differentiable map from a (channels, n, n)
input to an m-length raw score vector (no softmax) together with its geometry
and a content digest of its parameters. The wrapped function is frozen: its
parameters never receive gradients, but gradients still flow *through* it to
its inputs, which is what code training needs.

Builders are provided for the three classifier families used in the
experiments (a 3-layer MLP, ResNet-18, multinomial logistic regression) plus
:func:`wrap_function` for arbitrary differentiable callables.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import CompatibilityError, ConfigurationError
from .validation import as_image_batch

__all__ = [
    "BaseModel",
    "build_base_mlp",
    "build_resnet18",
    "build_logistic_regression",
    "wrap_function",
    "train_base",
    "save_base_model",
    "load_base_model",
]


def _digest_state(module: nn.Module) -> str:
    """sha256 over parameter and buffer contents in state-dict order."""

    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        array = tensor.detach().cpu().contiguous().numpy()
        h.update(str(array.dtype).encode())
        h.update(str(array.shape).encode())
        h.update(array.tobytes())
    return h.hexdigest()


class BaseModel:
    """A frozen differentiable function with fixed input/output geometry."""

    def __init__(self, module: nn.Module, *, input_shape: tuple[int, int, int],
                 output_dim: int, name: str = "custom", dataset: str | None = None,
                 test_accuracy: float | None = None, seed: int | None = None):
        self.module = module
        self.input_shape = tuple(input_shape)
        self.output_dim = int(output_dim)
        self.name = name
        self.dataset = dataset
        self.test_accuracy = test_accuracy
        self.seed = seed
        self.freeze()

    def freeze(self) -> None:
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    @property
    def param_digest(self) -> str:
        return _digest_state(self.module)

    def to(self, device) -> "BaseModel":
        self.module.to(device)
        return self

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """Raw m-length score vectors for a batch (B, C, n, n) of inputs."""

        single = x.dim() == len(self.input_shape)
        if single:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigurationError(
                f"input shape {tuple(x.shape[1:])} does not match model geometry "
                f"{self.input_shape}"
            )
        out = self.module(x)
        if out.shape != (x.shape[0], self.output_dim):
            raise ConfigurationError(
                f"base function returned shape {tuple(out.shape)}, expected "
                f"{(x.shape[0], self.output_dim)}"
            )
        return out.squeeze(0) if single else out

    @torch.no_grad()
    def predict_scores(self, images: np.ndarray, batch_size: int = 1024,
                       device: str | torch.device = "cpu") -> np.ndarray:
        """Raw scores for a numpy image batch, computed without gradients."""

        images = as_image_batch(images, channels=self.input_shape[0], n=self.input_shape[1])
        outs = []
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(images[start:start + batch_size]).to(device)
            outs.append(self(chunk).cpu().numpy())
        return np.concatenate(outs, axis=0) if outs else np.empty((0, self.output_dim), np.float32)

    def sidecar(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset,
            "geometry": {"channels": self.input_shape[0], "n": self.input_shape[1],
                         "m": self.output_dim},
            "test_accuracy": self.test_accuracy,
            "param_digest": self.param_digest,
            "seed": self.seed,
        }


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------

def build_base_mlp(seed: int | None = None) -> BaseModel:
    """3-layer MLP classifier for 28x28 single-channel inputs (784-200-100-10)."""

    if seed is not None:
        torch.manual_seed(seed)
    module = nn.Sequential(
        nn.Flatten(),
        nn.Linear(784, 200),
        nn.ReLU(),
        nn.Linear(200, 100),
        nn.ReLU(),
        nn.Linear(100, 10),
    )
    return BaseModel(module, input_shape=(1, 28, 28), output_dim=10,
                     name="base-mlp", seed=seed)


def build_logistic_regression(seed: int | None = None) -> BaseModel:
    """Multinomial logistic regression on flattened 28x28 inputs: A x + b.

    The wrapped function is affine; the softmax belongs downstream of
    decoding, so it is never applied here.
    """

    if seed is not None:
        torch.manual_seed(seed)
    module = nn.Sequential(nn.Flatten(), nn.Linear(784, 10))
    return BaseModel(module, input_shape=(1, 28, 28), output_dim=10,
                     name="logistic", seed=seed)


class _ResidualBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride,
                               padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1,
                               padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class _ResNet18(nn.Module):
    """ResNet-18 with the small-image stem: 3x3 stride-1 conv, no max-pool."""

    def __init__(self, channels=3, num_classes=10):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, 64, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.in_channels = 64
        self.stack1 = self._stack(64, stride=1)
        self.stack2 = self._stack(128, stride=2)
        self.stack3 = self._stack(256, stride=2)
        self.stack4 = self._stack(512, stride=2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(512, num_classes)

    def _stack(self, out_channels, stride):
        blocks = [_ResidualBlock(self.in_channels, out_channels, stride),
                  _ResidualBlock(out_channels, out_channels, 1)]
        self.in_channels = out_channels
        return nn.Sequential(*blocks)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.stack4(self.stack3(self.stack2(self.stack1(out))))
        out = self.pool(out).flatten(1)
        return self.fc(out)


def build_resnet18(channels: int = 3, n: int = 32, m: int = 10,
                   seed: int | None = None) -> BaseModel:
    """ResNet-18 emitting m raw scores; supports 28x28 and 32x32 inputs."""

    if n not in (28, 32):
        raise ConfigurationError(f"resnet18 supports n in (28, 32), got {n}")
    if seed is not None:
        torch.manual_seed(seed)
    module = _ResNet18(channels=channels, num_classes=m)
    return BaseModel(module, input_shape=(channels, n, n), output_dim=m,
                     name="resnet18", seed=seed)


class _FunctionModule(nn.Module):
    """Adapter letting a plain differentiable callable act as an nn.Module."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


def wrap_function(fn, *, input_shape: tuple[int, int, int], output_dim: int,
                  name: str = "custom") -> BaseModel:
    """Wrap any differentiable callable (B, C, n, n) -> (B, m) as a BaseModel.

    The callable is probed with two random batches; a non-constant or wrong
    output arity, or a non-differentiable output, is rejected.
    """

    module = fn if isinstance(fn, nn.Module) else _FunctionModule(fn)
    gen = torch.Generator().manual_seed(0)
    for batch in (1, 2):
        probe = torch.randn((batch, *input_shape), generator=gen, requires_grad=True)
        out = module(probe)
        if out.dim() != 2 or out.shape[0] != batch or out.shape[1] != output_dim:
            raise ConfigurationError(
                f"function output shape {tuple(out.shape)} is not ({batch}, {output_dim})"
            )
        try:
            out.sum().backward()
        except RuntimeError as exc:
            raise ConfigurationError(f"function is not differentiable: {exc}") from exc
        if probe.grad is None:
            raise ConfigurationError("function does not propagate gradients to its input")
    # parameterless callables would otherwise all hash alike; the response to
    # a fixed probe gives the digest a behavioral fingerprint
    with torch.no_grad():
        probe = torch.randn((4, *input_shape),
                            generator=torch.Generator().manual_seed(1))
        module.register_buffer("digest_fingerprint", module(probe).detach().clone())
    return BaseModel(module, input_shape=input_shape, output_dim=output_dim, name=name)


# --------------------------------------------------------------------------
# Base-model training recipe
# --------------------------------------------------------------------------

def _augment_batch(batch: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Random pad-crop plus horizontal flip (the CIFAR-10 recipe)."""

    b, _, n, _ = batch.shape
    padded = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
    out = torch.empty_like(batch)
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    flips = rng.random(b) < 0.5
    for i in range(b):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + n, dx:dx + n]
        out[i] = torch.flip(crop, dims=[2]) if flips[i] else crop
    return out


def train_base(model: BaseModel, train_images: np.ndarray, train_labels: np.ndarray,
               test_images: np.ndarray | None = None,
               test_labels: np.ndarray | None = None, *,
               epochs: int = 30, batch_size: int = 128, optimizer: str = "adam",
               learning_rate: float = 1e-3, momentum: float = 0.9,
               weight_decay: float = 0.0, milestones: tuple[int, ...] = (),
               gamma: float = 0.1, augment: bool = False, seed: int = 0,
               device: str | torch.device = "cpu", log=None) -> BaseModel:
    """Standard supervised training of a base classifier.

    Thaws the module for the duration of the run, refreezes afterwards, and
    fills in ``test_accuracy`` when a test split is given. ``log`` is an
    optional callable receiving one dict per epoch.
    """

    module = model.module.to(device)
    module.train()
    for p in module.parameters():
        p.requires_grad_(True)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if optimizer == "adam":
        opt = torch.optim.Adam(module.parameters(), lr=learning_rate,
                               weight_decay=weight_decay)
    elif optimizer == "sgd":
        opt = torch.optim.SGD(module.parameters(), lr=learning_rate,
                              momentum=momentum, weight_decay=weight_decay)
    else:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    scheduler = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(milestones),
                                                     gamma=gamma)
    criterion = nn.CrossEntropyLoss()

    images = as_image_batch(train_images, channels=model.input_shape[0],
                            n=model.input_shape[1])
    labels = np.asarray(train_labels, dtype=np.int64)
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = torch.from_numpy(images[idx]).to(device)
            if augment:
                xb = _augment_batch(xb, rng)
            yb = torch.from_numpy(labels[idx]).to(device)
            opt.zero_grad()
            loss = criterion(module(xb), yb)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        scheduler.step()
        if log is not None:
            log({"epoch": epoch, "train_loss": total / max(seen, 1),
                 "wall_time": time.time()})

    model.freeze()
    if test_images is not None and test_labels is not None:
        scores = model.predict_scores(test_images, device=device)
        preds = scores.argmax(axis=1)
        model.test_accuracy = float((preds == np.asarray(test_labels)).mean())
    model.seed = seed
    return model


# --------------------------------------------------------------------------
# Checkpoints: parameter blob + JSON sidecar
# --------------------------------------------------------------------------

_BUILDERS = {
    "base-mlp": lambda channels, n, m: build_base_mlp(),
    "logistic": lambda channels, n, m: build_logistic_regression(),
    "resnet18": build_resnet18,
}


def save_base_model(model: BaseModel, path: str | Path) -> Path:
    """Write ``<path>.pt`` (parameters) and ``<path>.json`` (sidecar)."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.module.state_dict(), path.with_suffix(".pt"))
    path.with_suffix(".json").write_text(json.dumps(model.sidecar(), indent=2) + "\n")
    return path.with_suffix(".pt")


def load_base_model(path: str | Path) -> BaseModel:
    """Rebuild a checkpointed base model and verify its parameter digest."""

    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    name = sidecar["name"]
    if name not in _BUILDERS:
        raise ConfigurationError(
            f"cannot rebuild base model {name!r}; known: {sorted(_BUILDERS)}"
        )
    geo = sidecar["geometry"]
    model = _BUILDERS[name](geo["channels"], geo["n"], geo["m"])
    state = torch.load(path.with_suffix(".pt"), map_location="cpu", weights_only=True)
    model.module.load_state_dict(state)
    model.freeze()
    model.dataset = sidecar.get("dataset")
    model.test_accuracy = sidecar.get("test_accuracy")
    model.seed = sidecar.get("seed")
    if model.param_digest != sidecar["param_digest"]:
        raise CompatibilityError(
            f"parameter digest mismatch for {path}: sidecar says "
            f"{sidecar['param_digest'][:12]}…, loaded {model.param_digest[:12]}…"
        )
    return model
