"""Response datasets: storage, toy synthesis, splits and normalization."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

from .container import read_container, write_container
from .physics import GRID

PARTICLE_FEATURES = ("px", "py", "pz", "vx", "vy", "vz", "mass", "charge", "energy")
N_FEATURES = len(PARTICLE_FEATURES)
IMAGE_TRANSFORMS = ("identity", "log1p")
STD_FLOOR = 1e-6


class DatasetError(ValueError):
    pass


class ShapeMismatch(DatasetError):
    pass


class NegativePixel(DatasetError):
    pass


class NonFinite(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class BadFractions(DatasetError):
    pass


class ResponseRecord(NamedTuple):
    image: np.ndarray
    particle: np.ndarray


@dataclass(frozen=True)
class Normalization:
    """Particle z-scoring plus the image transform used inside the model.

    ``image_scale`` divides (transformed) images before they enter the
    encoders and multiplies decoder outputs; losses stay in transformed units.
    """

    particle_mean: tuple[float, ...]
    particle_std: tuple[float, ...]
    image_transform: str = "identity"
    image_scale: float = 1.0

    def __post_init__(self):
        if self.image_transform not in IMAGE_TRANSFORMS:
            raise ValueError(f"image_transform must be one of {IMAGE_TRANSFORMS}")

    def normalize_particles(self, particles) -> np.ndarray:
        p = np.asarray(particles, dtype=np.float32)
        mean = np.asarray(self.particle_mean, dtype=np.float32)
        std = np.asarray(self.particle_std, dtype=np.float32)
        return (p - mean) / std

    def transform_images(self, images) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float32)
        if self.image_transform == "log1p":
            return np.log1p(imgs)
        return imgs

    def inverse_images(self, images) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float32)
        if self.image_transform == "log1p":
            return np.maximum(np.expm1(imgs), 0.0)
        return imgs

    def to_json(self) -> dict:
        d = asdict(self)
        d["particle_mean"] = list(self.particle_mean)
        d["particle_std"] = list(self.particle_std)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "Normalization":
        return cls(
            particle_mean=tuple(float(x) for x in data["particle_mean"]),
            particle_std=tuple(float(x) for x in data["particle_std"]),
            image_transform=data.get("image_transform", "identity"),
            image_scale=float(data.get("image_scale", 1.0)),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, 44, 44) float32
    particles: np.ndarray  # (N, 9) float32
    index: np.ndarray | None = None  # original record ids, int64
    normalization: Normalization | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        particles = np.ascontiguousarray(self.particles, dtype=np.float32)
        if images.ndim != 3 or images.shape[1:] != (GRID, GRID):
            raise ShapeMismatch(f"images must be N x {GRID} x {GRID}, got {images.shape}")
        if particles.ndim != 2 or particles.shape[1] != N_FEATURES:
            raise ShapeMismatch(f"particles must be N x {N_FEATURES}, got {particles.shape}")
        if len(images) != len(particles):
            raise ShapeMismatch("images and particles disagree on N")
        if not (np.isfinite(images).all() and np.isfinite(particles).all()):
            raise NonFinite("dataset contains non-finite values")
        if (images < 0).any():
            raise NegativePixel("dataset contains negative pixels")
        index = np.arange(len(images), dtype=np.int64) if self.index is None else self.index
        index = np.ascontiguousarray(index, dtype=np.int64)
        if index.shape != (len(images),):
            raise ShapeMismatch("index must have one entry per record")
        images.setflags(write=False)
        particles.setflags(write=False)
        index.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> ResponseRecord:
        return ResponseRecord(self.images[i], self.particles[i])

    @property
    def records(self) -> Iterator[ResponseRecord]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            images=self.images[rows],
            particles=self.particles[rows],
            index=self.index[rows],
        )

    def with_normalization(self, normalization: Normalization | None) -> "Dataset":
        return replace(self, normalization=normalization)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and self.particles.tobytes() == other.particles.tobytes()
            and self.index.tobytes() == other.index.tobytes()
            and self.normalization == other.normalization
            and self.provenance == other.provenance
        )


def empty_dataset(**provenance) -> Dataset:
    return Dataset(
        np.zeros((0, GRID, GRID), np.float32),
        np.zeros((0, N_FEATURES), np.float32),
        provenance=dict(provenance),
    )


# --- toy calorimeter --------------------------------------------------------


@dataclass(frozen=True)
class ToyShowerConfig:
    sigma: float = 1.5
    position_scale: float = 10.0
    amplitude_per_energy: float = 50.0
    poisson_noise: bool = True
    center_offset: float = 21.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not self.amplitude_per_energy >= 0:
            raise ValueError("amplitude_per_energy must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


TOY_PARTICLE_DISTRIBUTIONS = {
    "px": "Uniform(-1, 1)",
    "py": "Uniform(-1, 1)",
    "pz": "Uniform(1, 2)",
    "mass": "Uniform(0.1, 1)",
    "charge": "uniform choice of {-1, 0, 1}",
    "energy": "Uniform(1, 100)",
    "vx, vy, vz": "p / sqrt(|p|^2 + mass^2)",
}

CENTER_CLAMP = (2.0, 41.0)
_PIX = np.arange(GRID, dtype=np.float64)


def sample_toy_particles(n: int, rng: np.random.Generator) -> np.ndarray:
    px = rng.uniform(-1.0, 1.0, n)
    py = rng.uniform(-1.0, 1.0, n)
    pz = rng.uniform(1.0, 2.0, n)
    mass = rng.uniform(0.1, 1.0, n)
    charge = rng.integers(-1, 2, n).astype(np.float64)
    energy = rng.uniform(1.0, 100.0, n)
    norm = np.sqrt(px**2 + py**2 + pz**2 + mass**2)
    return np.stack([px, py, pz, px / norm, py / norm, pz / norm, mass, charge, energy], axis=1)


def shower_centers(particles, config: ToyShowerConfig) -> np.ndarray:
    """(N, 2) deposit centers (cx, cy) in pixel coordinates."""
    p = np.asarray(particles, dtype=np.float64).reshape(-1, N_FEATURES)
    cx = config.center_offset + config.position_scale * p[:, 0] / p[:, 2]
    cy = config.center_offset + config.position_scale * p[:, 1] / p[:, 2]
    return np.clip(np.stack([cx, cy], axis=1), *CENTER_CLAMP)


def expected_responses(particles, config: ToyShowerConfig) -> np.ndarray:
    """Noise-free responses A * G with G a unit-sum isotropic Gaussian."""
    p = np.asarray(particles, dtype=np.float64).reshape(-1, N_FEATURES)
    centers = shower_centers(p, config)
    gx = np.exp(-((_PIX[None, :] - centers[:, 0:1]) ** 2) / (2 * config.sigma**2))
    gy = np.exp(-((_PIX[None, :] - centers[:, 1:2]) ** 2) / (2 * config.sigma**2))
    profile = gy[:, :, None] * gx[:, None, :]
    profile /= profile.sum(axis=(1, 2), keepdims=True)
    amplitude = config.amplitude_per_energy * np.maximum(p[:, 8], 0.0)
    return amplitude[:, None, None] * profile


def render_toy_responses(particles, config: ToyShowerConfig, rng: np.random.Generator) -> np.ndarray:
    expected = expected_responses(particles, config)
    if config.poisson_noise:
        return rng.poisson(expected).astype(np.float32)
    return expected.astype(np.float32)


def synthesize_toy_dataset(n: int, config: ToyShowerConfig | None = None, seed: int = 0) -> Dataset:
    if n < 0:
        raise ValueError("n must be >= 0")
    config = config or ToyShowerConfig()
    rng = np.random.default_rng(seed)
    particles = sample_toy_particles(n, rng)
    images = render_toy_responses(particles, config, rng)
    return Dataset(
        images.reshape(n, GRID, GRID),
        particles.astype(np.float32),
        provenance={
            "source": "toy",
            "seed": int(seed),
            "synthesizer": config.to_json(),
            "particle_distributions": TOY_PARTICLE_DISTRIBUTIONS,
        },
    )


# --- storage -----------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    metadata = {
        "format_kind": "dataset",
        "source": dataset.provenance.get("source", "unknown"),
        "seed": dataset.provenance.get("seed"),
        "provenance": dataset.provenance,
        "normalization": dataset.normalization.to_json() if dataset.normalization else None,
    }
    write_container(
        path,
        metadata,
        {"images": dataset.images, "particles": dataset.particles, "index": dataset.index},
    )


def load_dataset(path) -> Dataset:
    c = read_container(path)
    if c.format_kind != "dataset":
        raise DatasetError(f"expected a dataset container, got format_kind={c.format_kind!r}")
    try:
        images = c.arrays["images"]
        particles = c.arrays["particles"]
    except KeyError as exc:
        raise ShapeMismatch(f"dataset container lacks array {exc}") from None
    if images.dtype != np.float32 or particles.dtype != np.float32:
        raise ShapeMismatch("images and particles must be f32")
    norm = c.metadata.get("normalization")
    return Dataset(
        images,
        particles,
        index=c.arrays.get("index"),
        normalization=Normalization.from_json(norm) if norm else None,
        provenance=c.metadata.get("provenance") or {"source": c.metadata.get("source")},
    )


# --- splits & statistics --------------------------------------------------------


def split_dataset(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(not f > 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_val = math.floor(n * fr[1] + 1e-9)
    n_test = math.floor(n * fr[2] + 1e-9)
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    train = dataset.subset(perm[:n_train])
    val = dataset.subset(perm[n_train : n_train + n_val])
    test = dataset.subset(perm[n_train + n_val :])
    return train, val, test


def compute_normalization(train: Dataset, image_transform: str = "identity") -> Normalization:
    if len(train) == 0:
        raise EmptyDataset("normalization needs a non-empty training split")
    p = train.particles.astype(np.float64)
    mean = p.mean(axis=0)
    std = np.maximum(p.std(axis=0), STD_FLOOR)
    imgs = np.log1p(train.images.astype(np.float64)) if image_transform == "log1p" else train.images
    scale = float(np.std(imgs))
    return Normalization(
        particle_mean=tuple(mean.tolist()),
        particle_std=tuple(std.tolist()),
        image_transform=image_transform,
        image_scale=scale if scale > STD_FLOOR else 1.0,
    )
