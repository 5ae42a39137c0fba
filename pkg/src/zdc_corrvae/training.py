"""Composite loss and the minibatch training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .datasets import Dataset, EmptyDataset, compute_normalization
from .model import CorrVAE, ModelConfig, save_checkpoint
from .physics import batch_property_vectors

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "total", "recon", "kl_w", "kl_z", "prop", "val_recon", "val_prop", "seconds")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, last_good_epoch: int):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class LengthMismatch(ValueError):
    pass


@dataclass
class LossWeights:
    beta_w: float = 1.0
    beta_z: float = 1.0
    lambda_prop: float = 1000.0

    def __post_init__(self):
        if min(self.beta_w, self.beta_z, self.lambda_prop) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 10
    validation_fraction: float = 0.1
    image_transform: str = "identity"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1, learning_rate > 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")


class LossTerms(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    kl_w: torch.Tensor
    kl_z: torch.Tensor
    prop: torch.Tensor


# -- loss components (batched: leading dim is the record) ---------------------------


def kl_standard_normal(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over the last axis."""
    return 0.5 * (mean**2 + torch.exp(logvar) - logvar - 1.0).sum(dim=-1)


def reconstruction_loss(reconstruction, target):
    """Per-record mean squared error over the 44x44 pixels."""
    return ((reconstruction - target) ** 2).flatten(start_dim=-2).mean(dim=-1)


def property_loss(predicted, target):
    if predicted.shape[-1] != target.shape[-1]:
        raise LengthMismatch(f"{predicted.shape[-1]} predictions vs {target.shape[-1]} targets")
    return ((predicted - target) ** 2).mean(dim=-1)


def total_loss(images, targets, output, weights: LossWeights) -> LossTerms:
    """Batch-mean loss terms; ``total`` is the weighted sum of the others."""
    lat = output.latents
    recon = reconstruction_loss(output.reconstruction, images).mean()
    kl_w = kl_standard_normal(lat.w_mean, lat.w_logvar).mean()
    kl_z = kl_standard_normal(lat.z_mean, lat.z_logvar).mean()
    prop = property_loss(output.properties, targets).mean()
    total = recon + weights.beta_w * kl_w + weights.beta_z * kl_z + weights.lambda_prop * prop
    return LossTerms(total, recon, kl_w, kl_z, prop)


# -- tensors for a dataset ------------------------------------------------------------


@dataclass
class TrainingTensors:
    images: torch.Tensor  # model space
    particles: torch.Tensor  # z-scored
    targets: torch.Tensor  # normalized properties


def prepare_tensors(dataset: Dataset, model: CorrVAE, normalization) -> TrainingTensors:
    """Model-space tensors; records without deposit are dropped."""
    spec = model.config.property_spec
    targets = batch_property_vectors(dataset.images, spec)
    keep = np.isfinite(targets).all(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropping %d record(s) without deposit", dropped)
    dtype = model.dtype
    return TrainingTensors(
        torch.tensor(normalization.transform_images(dataset.images[keep]), dtype=dtype),
        torch.tensor(normalization.normalize_particles(dataset.particles[keep]), dtype=dtype),
        torch.tensor(targets[keep], dtype=dtype),
    )


@torch.no_grad()
def evaluate_deterministic(model: CorrVAE, data: TrainingTensors, weights: LossWeights,
                           batch_size: int = 256) -> dict:
    """Loss terms with posterior means (zero noise), averaged over records."""
    n = len(data.images)
    sums = dict(total=0.0, recon=0.0, kl_w=0.0, kl_z=0.0, prop=0.0)
    for start in range(0, n, batch_size):
        x = data.images[start : start + batch_size]
        p = data.particles[start : start + batch_size]
        t = data.targets[start : start + batch_size]
        nw = torch.zeros(len(x), model.config.dim_w, dtype=x.dtype)
        nz = torch.zeros(len(x), model.config.dim_z, dtype=x.dtype)
        terms = total_loss(x, t, model(x, p, nw, nz), weights)
        for k, v in terms._asdict().items():
            sums[k] += v.item() * len(x)
    return {k: v / max(n, 1) for k, v in sums.items()}


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: CorrVAE
    normalization: object
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint_path: Path | None = None


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig | None = None,
          weights: LossWeights | None = None, out_dir=None, val: Dataset | None = None,
          mask=None, dtype=torch.float32, progress=None, extra=None) -> TrainResult:
    """Fit a CorrVAE on ``dataset``.

    When ``val`` is omitted a ``validation_fraction`` of ``dataset`` is held
    out. Normalization statistics come from the training part only. The
    returned model holds the weights of the best validation epoch, which are
    also written to ``out_dir/checkpoint.zdc1`` with ``history.csv``;
    ``extra`` entries are stored alongside in the checkpoint metadata.
    """
    train_config = train_config or TrainConfig()
    weights = weights or LossWeights()
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if val is None and train_config.validation_fraction > 0 and len(dataset) > 1:
        n_val = max(1, math.floor(len(dataset) * train_config.validation_fraction))
        perm = np.random.default_rng(train_config.seed).permutation(len(dataset))
        dataset, val = dataset.subset(perm[n_val:]), dataset.subset(perm[:n_val])

    normalization = compute_normalization(dataset, train_config.image_transform)
    model = CorrVAE(model_config, mask=mask, image_scale=normalization.image_scale, dtype=dtype)
    data = prepare_tensors(dataset, model, normalization)
    if len(data.images) == 0:
        raise EmptyDataset("no training record has a deposit")
    val_data = prepare_tensors(val, model, normalization) if val is not None and len(val) else None

    torch.manual_seed(train_config.seed)
    gen = torch.Generator().manual_seed(train_config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best_score, best_epoch, stale = math.inf, 0, 0
    n = len(data.images)
    for epoch in range(1, train_config.epochs + 1):
        started = time.perf_counter()
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums = dict(total=0.0, recon=0.0, kl_w=0.0, kl_z=0.0, prop=0.0)
        for start in range(0, n, train_config.batch_size):
            idx = perm[start : start + train_config.batch_size]
            x, p, t = data.images[idx], data.particles[idx], data.targets[idx]
            nw = torch.randn(len(idx), model_config.dim_w, generator=gen, dtype=x.dtype)
            nz = torch.randn(len(idx), model_config.dim_z, generator=gen, dtype=x.dtype)
            terms = total_loss(x, t, model(x, p, nw, nz), weights)
            if not torch.isfinite(terms.total):
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}", epoch - 1)
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            for k, v in terms._asdict().items():
                sums[k] += v.item() * len(idx)
        model.eval()
        if not all(torch.isfinite(q).all() for q in model.parameters()):
            raise NonFiniteLoss(f"non-finite parameters after epoch {epoch}", epoch - 1)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        if val_data is not None and len(val_data.images):
            v = evaluate_deterministic(model, val_data, weights)
            row["val_recon"], row["val_prop"], score = v["recon"], v["prop"], v["total"]
        else:
            row["val_recon"], row["val_prop"], score = None, None, row["total"]
        row["seconds"] = time.perf_counter() - started
        history.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d: %s", epoch, {k: v if v is None else round(v, 5) for k, v in row.items()})

        if score < best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if train_config.patience and stale >= train_config.patience:
                log.info("early stop after epoch %d (best %d)", epoch, best_epoch)
                break

    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(model, normalization, history, best_epoch)
    if out_dir is not None:
        ckpt = out_dir / "checkpoint.zdc1"
        save_checkpoint(
            model, normalization, ckpt, history=history,
            extra={"best_epoch": best_epoch, "train_config": asdict(train_config),
                   "loss_weights": asdict(weights), **(extra or {})},
        )
        write_history_csv(history, out_dir / "history.csv")
        result.checkpoint_path = ckpt
    return result
