"""Physical properties of calorimeter responses.

Images are indexed ``image[row, col]``; the x coordinate is the column and
the y coordinate is the row, both in pixel units in ``[0, 43]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

GRID = 44
HALF = GRID // 2
CENTER = (GRID - 1) / 2  # 21.5

_COORDS = np.arange(GRID, dtype=np.float64)


class NoDeposit(ValueError):
    """Raised when a property needs a non-zero response."""


class UnknownPropertyName(KeyError):
    pass


class ChannelValues(NamedTuple):
    ch1: float
    ch2: float
    ch3: float
    ch4: float
    ch5: float


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-2:] != (GRID, GRID):
        raise ValueError(f"expected {GRID}x{GRID} image(s), got shape {img.shape}")
    return img


def center_of_mass(image) -> tuple[float, float]:
    img = _check_image(image)
    total = img.sum()
    if not total > 0:
        raise NoDeposit("center of mass is undefined for a response without deposit")
    com_x = float((img.sum(axis=0) * _COORDS).sum() / total)
    com_y = float((img.sum(axis=1) * _COORDS).sum() / total)
    return com_x, com_y


def batch_center_of_mass(images) -> np.ndarray:
    """(N, 2) array of (com_x, com_y); rows without deposit are NaN."""
    imgs = _check_image(images).reshape(-1, GRID, GRID)
    totals = imgs.sum(axis=(1, 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        cx = (imgs.sum(axis=1) * _COORDS).sum(axis=1) / totals
        cy = (imgs.sum(axis=2) * _COORDS).sum(axis=1) / totals
    out = np.stack([cx, cy], axis=1)
    out[~(totals > 0)] = np.nan
    return out


def total_deposit(image) -> float:
    return float(_check_image(image).sum())


def channel_values(image) -> ChannelValues:
    """Four quadrant sums plus the total.

    ch1 = top-left, ch2 = top-right, ch3 = bottom-left, ch4 = bottom-right
    (rows 0-21 are the top half).
    """
    return ChannelValues(*batch_channel_values(image)[0].tolist())


def batch_channel_values(images) -> np.ndarray:
    imgs = _check_image(images).reshape(-1, GRID, GRID)
    q1 = imgs[:, :HALF, :HALF].sum(axis=(1, 2))
    q2 = imgs[:, :HALF, HALF:].sum(axis=(1, 2))
    q3 = imgs[:, HALF:, :HALF].sum(axis=(1, 2))
    q4 = imgs[:, HALF:, HALF:].sum(axis=(1, 2))
    total = imgs.sum(axis=(1, 2))
    return np.stack([q1, q2, q3, q4, total], axis=1)


def _com_x(images):
    return batch_center_of_mass(images)[:, 0]


def _com_y(images):
    return batch_center_of_mass(images)[:, 1]


def _total(images):
    return _check_image(images).reshape(-1, GRID, GRID).sum(axis=(1, 2))


# name -> (batch extractor, default affine (scale, offset) into [-1, 1])
PROPERTY_EXTRACTORS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], tuple[float, float]]] = {
    "com_x": (_com_x, (1.0 / CENTER, -1.0)),
    "com_y": (_com_y, (1.0 / CENTER, -1.0)),
    "total_deposit": (_total, (1.0, 0.0)),
}


@dataclass
class PropertySpec:
    """Controllable properties and their affine maps ``p -> scale * p + offset``."""

    names: list[str] = field(default_factory=lambda: ["com_x", "com_y"])
    scales: list[float] | None = None
    offsets: list[float] | None = None

    def __post_init__(self):
        self.names = list(self.names)
        if not self.names:
            raise ValueError("PropertySpec needs at least one property")
        if len(set(self.names)) != len(self.names):
            raise ValueError("property names must be unique")
        for name in self.names:
            if name not in PROPERTY_EXTRACTORS:
                raise UnknownPropertyName(name)
        if self.scales is None:
            self.scales = [PROPERTY_EXTRACTORS[n][1][0] for n in self.names]
        if self.offsets is None:
            self.offsets = [PROPERTY_EXTRACTORS[n][1][1] for n in self.names]
        self.scales = [float(s) for s in self.scales]
        self.offsets = [float(o) for o in self.offsets]
        if not (len(self.scales) == len(self.offsets) == len(self.names)):
            raise ValueError("scales/offsets must match names")
        if any(s == 0 for s in self.scales):
            raise ValueError("property scales must be non-zero")

    @property
    def n_properties(self) -> int:
        return len(self.names)

    def normalize(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        return raw * np.asarray(self.scales) + np.asarray(self.offsets)

    def denormalize(self, normalized) -> np.ndarray:
        normalized = np.asarray(normalized, dtype=np.float64)
        return (normalized - np.asarray(self.offsets)) / np.asarray(self.scales)

    def to_json(self) -> dict:
        return {"names": self.names, "scales": self.scales, "offsets": self.offsets}

    @classmethod
    def from_json(cls, data: dict) -> "PropertySpec":
        return cls(**data)


def raw_properties(images, names: Sequence[str]) -> np.ndarray:
    """(N, P) un-normalized property values."""
    for name in names:
        if name not in PROPERTY_EXTRACTORS:
            raise UnknownPropertyName(name)
    imgs = _check_image(images).reshape(-1, GRID, GRID)
    cols = [PROPERTY_EXTRACTORS[n][0](imgs) for n in names]
    return np.stack(cols, axis=1) if cols else np.zeros((len(imgs), 0))


def property_vector(image, spec: PropertySpec | None = None) -> np.ndarray:
    spec = spec or PropertySpec()
    out = batch_property_vectors(image, spec)[0]
    if not np.all(np.isfinite(out)):
        raise NoDeposit("property vector needs a response with deposit")
    return out


def batch_property_vectors(images, spec: PropertySpec) -> np.ndarray:
    """(N, P) normalized properties; NaN rows for responses without deposit."""
    return spec.normalize(raw_properties(images, spec.names))
