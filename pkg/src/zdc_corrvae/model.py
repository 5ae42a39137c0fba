"""The adapted CorrVAE: w/z image encoders, particle encoder, ReLU image decoder,
binary property mask and masked property heads.

All tensors are batched: images ``(B, 44, 44)`` in model space (after the
normalization's image transform), particles ``(B, 9)`` z-scored.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .container import read_container, write_container
from .datasets import N_FEATURES, PARTICLE_FEATURES, Normalization
from .physics import GRID, PropertySpec

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
PROPERTY_BOUND = 1.5
ARCHITECTURES = ("conv", "mlp")
# Transverse kinematics fix the impact position, which is owned by w.
DEFAULT_CONDITION_FEATURES = ("pz", "mass", "charge", "energy")


class ConfigMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    dim_w: int = 8
    dim_z: int = 8
    dim_c: int = 4
    property_spec: PropertySpec = field(default_factory=PropertySpec)
    architecture: str = "conv"
    conv_channels: tuple[int, ...] = (32, 64, 128, 128)
    mlp_widths: tuple[int, ...] = (512, 256)
    c_width: int = 64
    head_width: int = 64  # 0 gives a single linear layer per head
    condition_features: tuple[str, ...] = DEFAULT_CONDITION_FEATURES
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.property_spec, dict):
            self.property_spec = PropertySpec.from_json(self.property_spec)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.mlp_widths = tuple(int(c) for c in self.mlp_widths)
        self.condition_features = tuple(self.condition_features)
        unknown = set(self.condition_features) - set(PARTICLE_FEATURES)
        if unknown:
            raise ValueError(f"unknown particle features {sorted(unknown)}")
        if min(self.dim_w, self.dim_z, self.dim_c) < 1:
            raise ValueError("latent dims must be >= 1")
        if self.dim_w < self.property_spec.n_properties:
            raise ValueError("dim_w must be >= number of controllable properties")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.architecture == "conv" and len(self.conv_channels) != 4:
            raise ValueError("conv architecture needs exactly four channel widths")
        if self.head_width < 0 or self.c_width < 1:
            raise ValueError("bad head/c widths")

    @property
    def n_properties(self) -> int:
        return self.property_spec.n_properties

    def condition_gate(self) -> np.ndarray:
        return np.array([f in self.condition_features for f in PARTICLE_FEATURES], dtype=np.float32)

    def to_json(self) -> dict:
        return {
            "dim_w": self.dim_w,
            "dim_z": self.dim_z,
            "dim_c": self.dim_c,
            "property_spec": self.property_spec.to_json(),
            "architecture": self.architecture,
            "conv_channels": list(self.conv_channels),
            "mlp_widths": list(self.mlp_widths),
            "c_width": self.c_width,
            "head_width": self.head_width,
            "condition_features": list(self.condition_features),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def default_mask(n_properties: int, dim_w: int) -> np.ndarray:
    """Property i owned by w_i."""
    return np.eye(n_properties, dim_w, dtype=np.float32)


def validate_mask(mask, n_properties: int, dim_w: int) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float32)
    if m.shape != (n_properties, dim_w):
        raise ValueError(f"mask must be {n_properties} x {dim_w}, got {m.shape}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("mask entries must be 0 or 1")
    if not (m.sum(axis=1) >= 1).all():
        raise ValueError("every mask row needs at least one 1")
    return m


def squash(x: torch.Tensor) -> torch.Tensor:
    """Identity near zero, bounded to (-1.5, 1.5)."""
    return PROPERTY_BOUND * torch.tanh(x / PROPERTY_BOUND)


def reparameterize(mean, logvar, noise):
    return mean + torch.exp(0.5 * logvar) * noise


class LatentCodes(NamedTuple):
    w_mean: torch.Tensor
    w_logvar: torch.Tensor
    z_mean: torch.Tensor
    z_logvar: torch.Tensor
    c: torch.Tensor
    w_sample: torch.Tensor
    z_sample: torch.Tensor


class ForwardOutput(NamedTuple):
    reconstruction: torch.Tensor
    latents: LatentCodes
    properties: torch.Tensor


# Conv stack: kernel 3, stride 2, padding 1 takes 44 -> 22 -> 11 -> 6 -> 3.
# The decoder mirrors it; output_padding restores 3 -> 6 -> 11 -> 22 -> 44.
_CONV_SIZES = (44, 22, 11, 6, 3)
_DECONV_OUTPUT_PADDING = (1, 0, 1, 1)


def _conv_encoder(channels, out_dim) -> nn.Sequential:
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    c_in = 1
    for i, c_out in enumerate(channels):
        layers[f"conv{i}"] = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        layers[f"act{i}"] = nn.ReLU()
        c_in = c_out
    layers["flatten"] = nn.Flatten()
    layers["dense"] = nn.Linear(c_in * _CONV_SIZES[-1] ** 2, out_dim)
    return nn.Sequential(layers)


def _mlp(sizes, final_act: bool = False, act=nn.ReLU) -> "OrderedDict[str, nn.Module]":
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers[f"fc{i}"] = nn.Linear(a, b)
        if i < len(sizes) - 2 or final_act:
            layers[f"act{i}"] = act()
    return layers


def _mlp_encoder(widths, out_dim) -> nn.Sequential:
    layers = OrderedDict(flatten=nn.Flatten())
    layers.update(_mlp([GRID * GRID, *widths, out_dim]))
    return nn.Sequential(layers)


class _Unflatten(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


def _conv_decoder(channels, in_dim) -> nn.Sequential:
    rev = list(reversed(channels))  # 128, 128, 64, 32
    s = _CONV_SIZES[-1]
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    layers["dense"] = nn.Linear(in_dim, rev[0] * s * s)
    layers["act_dense"] = nn.ReLU()
    layers["unflatten"] = _Unflatten((rev[0], s, s))
    outs = rev[1:] + [1]
    c_in = rev[0]
    for i, (c_out, op) in enumerate(zip(outs, _DECONV_OUTPUT_PADDING)):
        layers[f"deconv{i}"] = nn.ConvTranspose2d(
            c_in, c_out, 3, stride=2, padding=1, output_padding=op
        )
        if i < len(outs) - 1:
            layers[f"act{i}"] = nn.ReLU()
        c_in = c_out
    return nn.Sequential(layers)


def _mlp_decoder(widths, in_dim) -> nn.Sequential:
    return nn.Sequential(_mlp([in_dim, *reversed(widths), GRID * GRID]))


class CorrVAE(nn.Module):
    def __init__(self, config: ModelConfig, mask=None, image_scale: float = 1.0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.image_scale = float(image_scale)
        P = config.n_properties
        mask = default_mask(P, config.dim_w) if mask is None else mask
        self.register_buffer(
            "mask", torch.as_tensor(validate_mask(mask, P, config.dim_w)), persistent=False
        )
        self.register_buffer("condition_gate", torch.as_tensor(config.condition_gate()), persistent=False)
        if config.architecture == "conv":
            self.w_encoder = _conv_encoder(config.conv_channels, 2 * config.dim_w)
            self.z_encoder = _conv_encoder(config.conv_channels, 2 * config.dim_z)
        else:
            self.w_encoder = _mlp_encoder(config.mlp_widths, 2 * config.dim_w)
            self.z_encoder = _mlp_encoder(config.mlp_widths, 2 * config.dim_z)
        self.c_encoder = nn.Sequential(_mlp([N_FEATURES, config.c_width, config.dim_c]))
        latent = config.dim_w + config.dim_z + config.dim_c
        if config.architecture == "conv":
            self.decoder = _conv_decoder(config.conv_channels, latent)
        else:
            self.decoder = _mlp_decoder(config.mlp_widths, latent)
        head_sizes = [config.dim_w, config.head_width, 1] if config.head_width else [config.dim_w, 1]
        self.heads = nn.ModuleDict(
            {name: nn.Sequential(_mlp(head_sizes, act=nn.Tanh)) for name in config.property_spec.names}
        )
        self.to(dtype)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Weights ~ U(-b, b) with b = sqrt(6 / fan_in); biases zero."""
        gen = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                    w = module.weight
                    if isinstance(module, nn.ConvTranspose2d):
                        fan_in = w.shape[0] * w[0, 0].numel()
                    else:
                        fan_in = w[0].numel()
                    bound = math.sqrt(6.0 / fan_in)
                    w.copy_((torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
                    module.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    # -- encoders ----------------------------------------------------------

    def _image_input(self, images):
        x = images / self.image_scale
        if self.config.architecture == "conv":
            return x.reshape(-1, 1, GRID, GRID)
        return x.reshape(-1, GRID * GRID)

    @staticmethod
    def _split(out, dim):
        mean, logvar = out[:, :dim], out[:, dim:]
        return mean, torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)

    def encode_w(self, images):
        return self._split(self.w_encoder(self._image_input(images)), self.config.dim_w)

    def encode_z(self, images):
        return self._split(self.z_encoder(self._image_input(images)), self.config.dim_z)

    def encode_c(self, particles):
        """Deterministic embedding of the gated particle features."""
        return self.c_encoder(particles * self.condition_gate)

    # -- decoders ----------------------------------------------------------

    def decode(self, w, z, c):
        h = self.decoder(torch.cat([w, z, c], dim=1))
        h = h.reshape(-1, *h.shape[-2:]) if h.dim() == 4 else h.reshape(-1, GRID, GRID)
        return torch.relu(h[:, :GRID, :GRID]) * self.image_scale

    def property_decode(self, w, mask=None):
        """Head i sees ``mask[i] * w`` and predicts property i."""
        mask = self.mask if mask is None else torch.as_tensor(mask, dtype=w.dtype)
        outs = [head(mask[i] * w) for i, head in enumerate(self.heads.values())]
        return squash(torch.cat(outs, dim=1))

    def forward(self, images, particles, noise_w, noise_z) -> ForwardOutput:
        w_mean, w_logvar = self.encode_w(images)
        z_mean, z_logvar = self.encode_z(images)
        c = self.encode_c(particles)
        w = reparameterize(w_mean, w_logvar, noise_w)
        z = reparameterize(z_mean, z_logvar, noise_z)
        recon = self.decode(w, z, c)
        props = self.property_decode(w)
        return ForwardOutput(recon, LatentCodes(w_mean, w_logvar, z_mean, z_logvar, c, w, z), props)


def init_model(config: ModelConfig, mask=None, image_scale: float = 1.0, dtype=torch.float32) -> CorrVAE:
    return CorrVAE(config, mask=mask, image_scale=image_scale, dtype=dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- checkpoints -------------------------------------------------------------


def array_name(key: str) -> str:
    """state_dict key -> "<network>/<layer>/<tensor>"."""
    parts = key.split(".")
    if parts[0] == "heads":
        parts = [f"head_{parts[1]}", *parts[2:]]
    return "/".join(parts)


def parameter_arrays(model: CorrVAE) -> dict[str, np.ndarray]:
    return {array_name(k): v.detach().cpu().numpy() for k, v in model.state_dict().items()}


@dataclass
class Checkpoint:
    model: CorrVAE
    normalization: Normalization
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def mask(self) -> np.ndarray:
        return self.model.mask.cpu().numpy()


def save_checkpoint(model: CorrVAE, normalization: Normalization, path,
                    history=None, extra=None) -> None:
    metadata = {
        "format_kind": "checkpoint",
        "config": model.config.to_json(),
        "mask": model.mask.cpu().numpy().astype(int).tolist(),
        "normalization": normalization.to_json(),
        "property_spec": model.config.property_spec.to_json(),
        "image_scale": model.image_scale,
        "dtype": "f64" if model.dtype == torch.float64 else "f32",
        "history": list(history or []),
        "extra": dict(extra or {}),
    }
    write_container(path, metadata, parameter_arrays(model))


def load_checkpoint(path) -> Checkpoint:
    c = read_container(path)
    meta = c.metadata
    if c.format_kind != "checkpoint":
        raise ConfigMismatch(f"expected a checkpoint container, got format_kind={c.format_kind!r}")
    try:
        config = ModelConfig.from_json(meta["config"])
        if meta.get("property_spec") != config.property_spec.to_json():
            raise ConfigMismatch("property_spec disagrees with config")
        normalization = Normalization.from_json(meta["normalization"])
        dtype = torch.float64 if meta.get("dtype") == "f64" else torch.float32
        model = CorrVAE(config, mask=meta["mask"], image_scale=meta["image_scale"], dtype=dtype)
    except ConfigMismatch:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigMismatch(f"checkpoint metadata is inconsistent: {exc}") from exc

    expected = model.state_dict()
    names = {array_name(k): k for k in expected}
    if set(names) != set(c.arrays):
        missing = sorted(set(names) - set(c.arrays))
        unexpected = sorted(set(c.arrays) - set(names))
        raise ConfigMismatch(f"weight names disagree with config (missing {missing}, unexpected {unexpected})")
    state = {}
    for name, key in names.items():
        arr = c.arrays[name]
        if tuple(arr.shape) != tuple(expected[key].shape):
            raise ConfigMismatch(f"{name} has shape {arr.shape}, config implies {tuple(expected[key].shape)}")
        if not np.isfinite(arr).all():
            raise ConfigMismatch(f"{name} contains non-finite values")
        state[key] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, normalization, meta.get("history", []), meta.get("extra", {}))
