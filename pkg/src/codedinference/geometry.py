"""Code geometry and unavailability-scenario algebra.

A coded group carries ``k`` data inputs and ``r`` encoder-generated parity
inputs. Positions are indexed data-first: ``0 .. k-1`` are data, ``k .. k+r-1``
are parities, and every other module (decoder input layout, checkpoints,
reports) uses this order. An unavailability scenario is the subset of the
``k + r`` outputs that went missing; scenarios whose missing positions are all
parities reconstruct nothing and are excluded from enumeration.

Everything here is a pure value or a pure function and safe to share across
threads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError

__all__ = [
    "CodeConfig",
    "ErasurePattern",
    "enumerate_scenarios",
    "availability_mask",
]


@dataclass(frozen=True)
class CodeConfig:
    """Geometry of one coded group.

    k: data inputs per group; r: parity inputs (resilience parameter);
    n: input spatial side length; channels: input channels; m: length of the
    base function's output vector.
    """

    k: int
    r: int
    n: int
    channels: int = 1
    m: int = 10

    def __post_init__(self):
        for name in ("k", "r", "n", "channels", "m"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(
                    f"CodeConfig.{name} must be a positive integer, got {value!r}"
                )

    @property
    def group_size(self) -> int:
        return self.k + self.r

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.n, self.n)

    def to_dict(self) -> dict:
        return {"k": self.k, "r": self.r, "n": self.n,
                "channels": self.channels, "m": self.m}

    @classmethod
    def from_dict(cls, d: dict) -> "CodeConfig":
        return cls(k=int(d["k"]), r=int(d["r"]), n=int(d["n"]),
                   channels=int(d.get("channels", 1)), m=int(d.get("m", 10)))


@dataclass(frozen=True)
class ErasurePattern:
    """An ordered set of unavailable positions within one coded group.

    Construction only enforces what is knowable without a config (non-empty,
    non-negative, duplicate-free); bounds and size limits are checked by
    :meth:`validate` against a :class:`CodeConfig`.
    """

    unavailable: tuple[int, ...]

    def __post_init__(self):
        positions = tuple(sorted(self.unavailable))
        if not positions:
            raise ConfigurationError("ErasurePattern must name at least one position")
        if len(set(positions)) != len(positions):
            raise ConfigurationError(f"duplicate positions in {positions}")
        if any(not isinstance(p, (int, np.integer)) or p < 0 for p in positions):
            raise ConfigurationError(f"positions must be non-negative ints: {positions}")
        object.__setattr__(self, "unavailable", tuple(int(p) for p in positions))

    def __len__(self) -> int:
        return len(self.unavailable)

    def __iter__(self):
        return iter(self.unavailable)

    def __contains__(self, position) -> bool:
        return position in self.unavailable

    def data_positions(self, k: int) -> tuple[int, ...]:
        """The unavailable positions that are data inputs (index < k)."""
        return tuple(p for p in self.unavailable if p < k)

    def is_parity_only(self, k: int) -> bool:
        return all(p >= k for p in self.unavailable)

    def validate(self, config: CodeConfig, *, max_size: int | None = None) -> None:
        """Check bounds against ``config``; raises ConfigurationError."""
        if self.unavailable[-1] >= config.group_size:
            raise ConfigurationError(
                f"position {self.unavailable[-1]} out of range for group size "
                f"{config.group_size}"
            )
        limit = config.r if max_size is None else max_size
        if len(self) > limit:
            raise ConfigurationError(
                f"pattern of size {len(self)} exceeds the limit of {limit}"
            )


def enumerate_scenarios(config: CodeConfig, *, include_smaller: bool = False) -> list[ErasurePattern]:
    """All unavailability scenarios the code trains and evaluates against.

    Returns every size-r subset of the k + r positions except the single
    all-parity subset, in ascending lexicographic order of the index tuples.
    With ``include_smaller`` the sizes 1 .. r-1 are prepended (same exclusion
    and ordering per size); the default trains the worst case only.
    """

    sizes = range(1, config.r + 1) if include_smaller else (config.r,)
    scenarios = []
    for size in sizes:
        for combo in itertools.combinations(range(config.group_size), size):
            if combo[0] >= config.k:  # ascending, so combo[0] >= k means parity-only
                continue
            scenarios.append(ErasurePattern(combo))
    return scenarios


def availability_mask(pattern: ErasurePattern, config: CodeConfig) -> np.ndarray:
    """Boolean vector of length k + r, False exactly at unavailable positions."""

    if pattern.unavailable[-1] >= config.group_size:
        raise ConfigurationError(
            f"position {pattern.unavailable[-1]} out of range for group size "
            f"{config.group_size}"
        )
    mask = np.ones(config.group_size, dtype=bool)
    mask[list(pattern.unavailable)] = False
    return mask
