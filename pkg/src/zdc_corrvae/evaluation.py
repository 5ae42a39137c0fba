"""Metrics (pixel MSE, channel Wasserstein), traversal and disentanglement
diagnostics, and report emission (JSON, CSV, P5 graymap grids)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .datasets import Dataset, EmptyDataset
from .inference import (
    GenerationRequest, WOptimizerConfig, encode_particles, generate, generate_batch,
    reconstruct, traverse,
)
from .model import Checkpoint
from .physics import GRID, NoDeposit, batch_center_of_mass, batch_channel_values, batch_property_vectors

REPORT_VERSION = 1


class EmptyInput(ValueError):
    pass


class TooFewImages(ValueError):
    pass


def wasserstein_1d(samples_a, samples_b) -> float:
    """W1 between two empirical distributions: the integral of |F_a - F_b|."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptyInput("wasserstein_1d needs two non-empty samples")
    knots = np.sort(np.concatenate([a, b]))
    widths = np.diff(knots)
    cdf_a = np.searchsorted(a, knots[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, knots[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def _images_of(x) -> np.ndarray:
    return x.images if isinstance(x, Dataset) else np.asarray(x)


def channel_wasserstein(generated, reference) -> tuple[np.ndarray, float]:
    gen = batch_channel_values(_images_of(generated))
    ref = batch_channel_values(_images_of(reference))
    if len(gen) == 0 or len(ref) == 0:
        raise EmptyInput("channel_wasserstein needs non-empty inputs")
    per_channel = np.array([wasserstein_1d(gen[:, k], ref[:, k]) for k in range(5)])
    return per_channel, float(per_channel.mean())


def normalized_channel_wasserstein(generated, reference) -> np.ndarray:
    """Per-channel W1 divided by the reference channel's standard deviation."""
    per_channel, _ = channel_wasserstein(generated, reference)
    std = batch_channel_values(_images_of(reference)).std(axis=0)
    return per_channel / np.where(std > 0, std, 1.0)


def reconstruction_mse_over(dataset: Dataset, model: Checkpoint | Callable) -> float:
    """Mean over records of the per-pixel squared reconstruction error.

    ``model`` is a checkpoint or any ``f(images, particles) -> images``.
    """
    if len(dataset) == 0:
        raise EmptyDataset("reconstruction MSE needs a non-empty dataset")
    if isinstance(model, Checkpoint):
        recon = reconstruct(model, dataset.images, dataset.particles)
    else:
        recon = np.asarray(model(dataset.images, dataset.particles))
    per_record = ((recon.astype(np.float64) - dataset.images) ** 2).mean(axis=(1, 2))
    return float(per_record.mean())


def spearman(x, y) -> float:
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


def traversal_monotonicity(images, axis: str) -> float:
    """Spearman rho between position in the sequence and the CoM on ``axis``."""
    imgs = np.asarray(images).reshape(-1, GRID, GRID)
    if len(imgs) < 3:
        raise TooFewImages("need at least 3 images")
    com = batch_center_of_mass(imgs)
    if not np.isfinite(com).all():
        raise NoDeposit("every traversal image needs a deposit")
    col = {"x": 0, "y": 1}[axis]
    return spearman(np.arange(len(imgs)), com[:, col])


def disentanglement_probe(ckpt: Checkpoint, n_draws: int, seed: int, particle, targets,
                          wopt: WOptimizerConfig | None = None) -> np.ndarray:
    """Std (pixels) of the CoM over z redraws with (w*, c) fixed; one entry per axis."""
    out = generate(ckpt, GenerationRequest(particle, targets, n_samples=n_draws, seed=seed), wopt)
    com = batch_center_of_mass(out.images)
    if not np.isfinite(com).all():
        raise NoDeposit("a probe sample has no deposit")
    return com.std(axis=0)


def control_axes(ckpt: Checkpoint) -> list[tuple[int, str]]:
    """(w index, axis) for each CoM property owned by exactly one w-dimension."""
    out = []
    for i, name in enumerate(ckpt.config.property_spec.names):
        if name in ("com_x", "com_y"):
            cols = np.flatnonzero(ckpt.mask[i])
            out.append((int(cols[0]), name[-1]))
    return out


def traversal_scores(ckpt: Checkpoint, contexts: int, seed: int, particles,
                     values=None) -> dict[str, float]:
    """Mean Spearman rho of CoM along each controlled axis, over random (z, c) contexts."""
    values = np.linspace(-2, 2, 11) if values is None else np.asarray(values)
    rng = np.random.default_rng(seed)
    particles = np.asarray(particles).reshape(-1, 9)
    pick = rng.choice(len(particles), size=contexts, replace=len(particles) < contexts)
    cs = encode_particles(ckpt, particles[pick])
    zs = rng.standard_normal((contexts, ckpt.config.dim_z))
    scores = {}
    for j, axis in control_axes(ckpt):
        rhos = []
        for k in range(contexts):
            w = np.zeros(ckpt.config.dim_w)
            imgs = traverse(ckpt, (w, zs[k], cs[k]), j, values)
            try:
                rhos.append(traversal_monotonicity(imgs, axis))
            except NoDeposit:
                rhos.append(0.0)
        scores[f"w{j}"] = float(np.mean(rhos))
    return scores


# -- reports ------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    reconstruction_mse: float
    per_channel_wasserstein: list[float]
    mean_wasserstein: float
    normalized_wasserstein: list[float]
    mean_normalized_wasserstein: float
    traversal_spearman: dict[str, float] = field(default_factory=dict)
    disentanglement_com_std: list[float] = field(default_factory=list)
    n_reference: int = 0
    n_generated: int = 0
    seed: int = 0
    checkpoint: str = ""
    notes: list[str] = field(default_factory=list)
    grid_maps: dict[str, dict] = field(default_factory=dict)
    report_version: int = REPORT_VERSION
    mse_definition: str = "mean per-pixel squared reconstruction error (posterior means) over the evaluated split"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "EvaluationReport":
        return cls(**data)


def evaluate(ckpt: Checkpoint, reference: Dataset, seed: int = 0, n_generated: int | None = None,
             traversal_contexts: int = 10, probe_draws: int = 50,
             wopt: WOptimizerConfig | None = None, checkpoint_id: str = ""):
    """Full report against ``reference``; also returns the generated images."""
    if len(reference) == 0:
        raise EmptyDataset("evaluation needs a non-empty reference split")
    spec = ckpt.config.property_spec
    targets_all = batch_property_vectors(reference.images, spec)
    usable = np.flatnonzero(np.isfinite(targets_all).all(axis=1))
    if len(usable) == 0:
        raise EmptyDataset("no reference record has a deposit")
    n_generated = len(reference) if n_generated is None else n_generated
    rows = usable[np.arange(n_generated) % len(usable)]
    gen = generate_batch(ckpt, reference.particles[rows], targets_all[rows], seed=seed, wopt=wopt)

    per_channel, mean = channel_wasserstein(gen.images, reference.images)
    normalized = normalized_channel_wasserstein(gen.images, reference.images)
    traversal = traversal_scores(ckpt, traversal_contexts, seed, reference.particles[usable])
    probe_row = usable[0]
    probe = disentanglement_probe(ckpt, probe_draws, seed, reference.particles[probe_row],
                                  np.clip(targets_all[probe_row], -1.5, 1.5), wopt)
    report = EvaluationReport(
        reconstruction_mse=reconstruction_mse_over(reference, ckpt),
        per_channel_wasserstein=per_channel.tolist(),
        mean_wasserstein=mean,
        normalized_wasserstein=normalized.tolist(),
        mean_normalized_wasserstein=float(normalized.mean()),
        traversal_spearman=traversal,
        disentanglement_com_std=probe.tolist(),
        n_reference=len(reference),
        n_generated=int(n_generated),
        seed=seed,
        checkpoint=checkpoint_id,
    )
    return report, gen


def to_gray(grid: np.ndarray) -> tuple[np.ndarray, dict]:
    """Affine map to 0..255; returns the bytes and the map used."""
    lo, hi = float(np.min(grid)), float(np.max(grid))
    span = hi - lo if hi > lo else 1.0
    gray = np.clip(np.rint((grid - lo) / span * 255.0), 0, 255).astype(np.uint8)
    return gray, {"low": lo, "high": hi, "maps_to": [0, 255]}


def tile(images: np.ndarray, rows: int, cols: int, separator: float | None = None) -> np.ndarray:
    """Tile (rows*cols, 44, 44) images with 1-pixel separators between tiles."""
    imgs = np.asarray(images, dtype=np.float64).reshape(-1, GRID, GRID)
    if len(imgs) > rows * cols:
        raise ValueError("more images than grid cells")
    fill = imgs.max() if separator is None and imgs.size else (separator or 0.0)
    out = np.full((rows * GRID + rows - 1, cols * GRID + cols - 1), fill, dtype=np.float64)
    for k, img in enumerate(imgs):
        r, c = divmod(k, cols)
        out[r * (GRID + 1) : r * (GRID + 1) + GRID, c * (GRID + 1) : c * (GRID + 1) + GRID] = img
    return out


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h, maxval = (int(x) for x in fields[1:])
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def write_grid(path, images, rows: int, cols: int) -> dict:
    gray, mapping = to_gray(tile(images, rows, cols))
    write_pgm(path, gray)
    return mapping


def emit_report(report: EvaluationReport, out_dir, reference_images=None, reconstructions=None,
                generated_images=None, traversals: dict[str, np.ndarray] | None = None) -> list[Path]:
    """Write report.json, channels.csv and P5 grids into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    traversals = traversals or {}
    if reference_images is not None and reconstructions is not None:
        n = min(8, len(reference_images))
        pair = np.concatenate([np.asarray(reference_images[:n]), np.asarray(reconstructions[:n])])
        path = out / "reconstructions.pgm"
        report.grid_maps["reconstructions"] = write_grid(path, pair, 2, n)
        written.append(path)
    if not traversals:
        if "no traversal strips emitted" not in report.notes:
            report.notes.append("no traversal strips emitted")
    for name, strip in traversals.items():
        path = out / f"traversal_{name}.pgm"
        report.grid_maps[f"traversal_{name}"] = write_grid(path, strip, 1, len(strip))
        written.append(path)

    if reference_images is not None or generated_images is not None:
        path = out / "channels.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["side", "index", "ch1", "ch2", "ch3", "ch4", "ch5"])
            for side, imgs in (("generated", generated_images), ("reference", reference_images)):
                if imgs is None:
                    continue
                for i, row in enumerate(batch_channel_values(imgs)):
                    writer.writerow([side, i, *(repr(float(v)) for v in row)])
        written.append(path)

    path = out / "report.json"
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
