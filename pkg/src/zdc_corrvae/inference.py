"""Generation (c from the particle, w optimized against the property heads,
z from the standard normal), latent traversal, reconstruction and the
threshold post-processing."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .model import PROPERTY_BOUND, Checkpoint, CorrVAE
from .training import property_loss


class IndexOutOfRange(IndexError):
    pass


@dataclass
class WOptimizerConfig:
    """Gradient descent on the masked property heads.

    ``step_size`` is the initial step. An accepted step (loss decreased)
    grows the row's step by ``grow``; a rejected step is undone and the step
    is multiplied by ``shrink``.
    """

    steps: int = 200
    step_size: float = 0.05
    init: str = "zero"
    seed: int = 0
    tolerance: float = 1e-5
    ridge: float = 1e-3
    grow: float = 1.5
    shrink: float = 0.5

    def __post_init__(self):
        if self.steps < 1 or not self.step_size > 0:
            raise ValueError("need steps >= 1 and step_size > 0")
        if self.init not in ("zero", "random"):
            raise ValueError("init must be 'zero' or 'random'")


@dataclass
class GenerationRequest:
    particle: Sequence[float]
    target_properties: Sequence[float]
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.target_properties, dtype=np.float64)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not np.isfinite(t).all() or (np.abs(t) > PROPERTY_BOUND).any():
            raise ValueError("targets must be finite and within [-1.5, 1.5]")
        if np.asarray(self.particle).shape != (9,):
            raise ValueError("particle must have 9 components")


class Generated(NamedTuple):
    images: np.ndarray  # (N, 44, 44) raw units
    w: np.ndarray
    z: np.ndarray
    c: np.ndarray
    targets: np.ndarray
    final_loss: np.ndarray


def _objective(model: CorrVAE, w, targets, ridge, mask):
    return property_loss(model.property_decode(w, mask), targets) + ridge * (w**2).sum(dim=-1)


def optimize_w(model: CorrVAE, targets, config: WOptimizerConfig | None = None, mask=None):
    """Find w whose masked property predictions match ``targets``.

    ``targets`` is (P,) or (B, P). Returns ``(w, loss)`` as numpy arrays; each
    row is the best iterate seen, so its loss never exceeds the loss at init.
    """
    config = config or WOptimizerConfig()
    dtype = model.dtype
    t = torch.as_tensor(np.asarray(targets, dtype=np.float64), dtype=dtype)
    single = t.dim() == 1
    t = t.reshape(-1, model.config.n_properties)
    if not torch.isfinite(t).all():
        raise ValueError("targets must be finite")
    B, dim_w = len(t), model.config.dim_w
    if config.init == "random":
        gen = torch.Generator().manual_seed(config.seed)
        w = torch.randn(B, dim_w, generator=gen, dtype=torch.float64).to(dtype)
    else:
        w = torch.zeros(B, dim_w, dtype=dtype)
    step = torch.full((B, 1), config.step_size, dtype=dtype)

    def loss_and_grad(x):
        x = x.detach().requires_grad_(True)
        loss = _objective(model, x, t, config.ridge, mask)
        (grad,) = torch.autograd.grad(loss.sum(), x)
        return loss.detach(), grad

    loss, grad = loss_and_grad(w)
    for _ in range(config.steps):
        if grad.norm(dim=1).max() < config.tolerance:
            break
        cand = w - step * grad
        cand_loss, cand_grad = loss_and_grad(cand)
        if not torch.isfinite(cand_loss).all():
            raise FloatingPointError("non-finite loss while optimizing w")
        accept = (cand_loss < loss).unsqueeze(1)
        w = torch.where(accept, cand, w)
        loss = torch.where(accept[:, 0], cand_loss, loss)
        grad = torch.where(accept, cand_grad, grad)
        step = torch.where(accept, step * config.grow, step * config.shrink)
    w_np, loss_np = w.detach().numpy(), loss.numpy()
    return (w_np[0], float(loss_np[0])) if single else (w_np, loss_np)


# -- generation ----------------------------------------------------------------------


def _decode_raw(ckpt: Checkpoint, w, z, c) -> np.ndarray:
    dtype = ckpt.model.dtype
    with torch.no_grad():
        out = ckpt.model.decode(
            torch.as_tensor(w, dtype=dtype), torch.as_tensor(z, dtype=dtype), torch.as_tensor(c, dtype=dtype)
        )
    return ckpt.normalization.inverse_images(out.numpy().astype(np.float32))


def encode_particles(ckpt: Checkpoint, particles) -> np.ndarray:
    p = ckpt.normalization.normalize_particles(np.asarray(particles, dtype=np.float32).reshape(-1, 9))
    with torch.no_grad():
        return ckpt.model.encode_c(torch.tensor(p, dtype=ckpt.model.dtype)).numpy()


def generate_batch(ckpt: Checkpoint, particles, targets, seed: int = 0,
                   wopt: WOptimizerConfig | None = None, z=None) -> Generated:
    """One response per row of ``particles``/``targets`` with fresh z draws."""
    particles = np.asarray(particles, dtype=np.float32).reshape(-1, 9)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(particles), -1)
    c = encode_particles(ckpt, particles)
    w, loss = optimize_w(ckpt.model, targets, wopt)
    if z is None:
        z = np.random.default_rng(seed).standard_normal((len(particles), ckpt.config.dim_z))
    images = _decode_raw(ckpt, w, z, c)
    return Generated(images, w, np.asarray(z), c, targets, np.asarray(loss))


def generate(ckpt: Checkpoint, request: GenerationRequest, wopt: WOptimizerConfig | None = None) -> Generated:
    """``n_samples`` responses for one particle; w* is shared, z is redrawn per sample."""
    c = encode_particles(ckpt, request.particle)
    w, loss = optimize_w(ckpt.model, np.asarray(request.target_properties, dtype=np.float64), wopt)
    n = request.n_samples
    z = np.random.default_rng(request.seed).standard_normal((n, ckpt.config.dim_z))
    W = np.repeat(w[None, :], n, axis=0)
    C = np.repeat(c, n, axis=0)
    images = _decode_raw(ckpt, W, z, C)
    return Generated(
        images, W, z, C,
        np.repeat(np.asarray(request.target_properties, dtype=np.float64)[None, :], n, axis=0),
        np.full(n, loss),
    )


def traverse(ckpt: Checkpoint, base, dim_index: int, values) -> np.ndarray:
    """Decode ``base = (w, z, c)`` with ``w[dim_index]`` swept over ``values``."""
    w, z, c = (np.asarray(a, dtype=np.float64).reshape(-1) for a in base)
    if not 0 <= dim_index < ckpt.config.dim_w:
        raise IndexOutOfRange(f"dim_index {dim_index} outside [0, {ckpt.config.dim_w})")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(values) == 0:
        raise ValueError("traversal needs at least one value")
    W = np.repeat(w[None, :], len(values), axis=0)
    W[:, dim_index] = values
    Z = np.repeat(z[None, :], len(values), axis=0)
    C = np.repeat(c[None, :], len(values), axis=0)
    return _decode_raw(ckpt, W, Z, C)


def reconstruct(ckpt: Checkpoint, images, particles) -> np.ndarray:
    """Decode posterior means; batched over leading axis."""
    imgs = np.asarray(images, dtype=np.float32)
    single = imgs.ndim == 2
    imgs = imgs.reshape(-1, 44, 44)
    model, norm = ckpt.model, ckpt.normalization
    x = torch.tensor(norm.transform_images(imgs), dtype=model.dtype)
    c = encode_particles(ckpt, particles)
    with torch.no_grad():
        w, _ = model.encode_w(x)
        z, _ = model.encode_z(x)
        out = model.decode(w, z, torch.as_tensor(c, dtype=model.dtype))
    out = norm.inverse_images(out.numpy().astype(np.float32))
    return out[0] if single else out


def postprocess(image, threshold: float = 0.5) -> np.ndarray:
    """Zero every pixel below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    img = np.array(image, copy=True)
    img[img < threshold] = 0
    return img


def wopt_json(config: WOptimizerConfig) -> dict:
    return asdict(config)
