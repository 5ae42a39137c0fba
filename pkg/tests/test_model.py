import numpy as np
import pytest
import torch

from zdc_corrvae.container import read_container, write_container
from zdc_corrvae.datasets import Normalization
from zdc_corrvae.model import (
    ConfigMismatch, ModelConfig, array_name, default_mask, init_model, load_checkpoint,
    parameter_count, save_checkpoint, squash, validate_mask,
)
from zdc_corrvae.physics import PropertySpec


def tiny(arch="mlp", **kw):
    base = dict(dim_w=3, dim_z=2, dim_c=2, architecture=arch, mlp_widths=(16,), conv_channels=(2, 2, 2, 2),
                c_width=4, head_width=4)
    base.update(kw)
    return ModelConfig(**base)


def norm():
    return Normalization((0.0,) * 9, (1.0,) * 9, "identity", 1.0)


def inputs(cfg, n=4, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 44, 44, generator=g, dtype=dtype), torch.randn(n, 9, generator=g, dtype=dtype),
            torch.randn(n, cfg.dim_w, generator=g, dtype=dtype), torch.randn(n, cfg.dim_z, generator=g, dtype=dtype))


def test_parameter_counts_match_hand_computation():
    # conv encoder: convs 320 + 18496 + 73856 + 147584, dense 1152 -> 16: 18448
    enc = 320 + 18496 + 73856 + 147584 + (128 * 9 * 16 + 16)
    c_enc = 9 * 64 + 64 + 64 * 4 + 4
    # decoder: dense 20 -> 1152, deconvs 128->128->64->32->1
    dec = (20 * 1152 + 1152) + (128 * 128 * 9 + 128) + (128 * 64 * 9 + 64) + (64 * 32 * 9 + 32) + (32 * 9 + 1)
    head = 8 * 64 + 64 + 64 + 1
    assert parameter_count(init_model(ModelConfig())) == 2 * enc + c_enc + dec + 2 * head == 783911
    mlp_enc = 1936 * 512 + 512 + 512 * 256 + 256 + 256 * 16 + 16
    mlp_dec = 20 * 256 + 256 + 256 * 512 + 512 + 512 * 1936 + 1936
    assert parameter_count(init_model(ModelConfig(architecture="mlp"))) == 2 * mlp_enc + c_enc + mlp_dec + 2 * head


@pytest.mark.parametrize("arch", ["conv", "mlp"])
def test_forward_shapes_and_range(arch):
    cfg = tiny(arch)
    model = init_model(cfg, image_scale=3.0)
    out = model(*inputs(cfg))
    assert out.reconstruction.shape == (4, 44, 44)
    assert (out.reconstruction >= 0).all()
    assert out.properties.shape == (4, 2)
    assert (out.properties.abs() < 1.5).all()
    lat = out.latents
    assert lat.w_mean.shape == (4, 3) and lat.z_mean.shape == (4, 2) and lat.c.shape == (4, 2)
    assert lat.w_logvar.min() >= -10 and lat.w_logvar.max() <= 10


def test_initialization_deterministic_per_seed():
    a, b, c = (init_model(tiny(seed=s)) for s in (5, 5, 6))
    for (k, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), k
    assert any(not torch.equal(x, y) for x, y in zip(a.state_dict().values(), c.state_dict().values()))


def test_initialization_bounds():
    model = init_model(tiny())
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            assert not p.any()
        else:
            bound = np.sqrt(6.0 / p[0].numel())
            assert p.abs().max() <= bound


def test_mask_barrier_exact():
    cfg = tiny(dim_w=4)
    mask = np.array([[1, 0, 1, 0], [0, 1, 0, 0]], np.float32)
    model = init_model(cfg, mask=mask)
    g = torch.Generator().manual_seed(1)
    w = torch.randn(1, 4, generator=g)
    base = model.property_decode(w)
    for _ in range(100):
        for i in range(2):
            off = torch.as_tensor(mask[i] == 0)
            w2 = w + torch.randn(1, 4, generator=g) * off
            assert torch.equal(model.property_decode(w2)[0, i], base[0, i])


def test_squash():
    x = torch.tensor([0.0, 1e-4, 50.0, -50.0])
    y = squash(x)
    assert y[0] == 0 and abs(y[1] - 1e-4) < 1e-9 and y[2] <= 1.5 and y[3] >= -1.5


def test_condition_gate_masks_features():
    model = init_model(tiny())
    p = torch.randn(3, 9)
    q = p.clone()
    q[:, [0, 1, 3, 4, 5]] = torch.randn(3, 5)  # px, py, vx, vy, vz are outside the default gate
    assert torch.equal(model.encode_c(p), model.encode_c(q))
    q[:, 8] += 1
    assert not torch.equal(model.encode_c(p), model.encode_c(q))


def test_mask_validation():
    assert default_mask(2, 8).tolist()[0][:3] == [1, 0, 0]
    with pytest.raises(ValueError):
        validate_mask([[1, 0], [0, 0]], 2, 2)
    with pytest.raises(ValueError):
        validate_mask([[1, 0, 0]], 2, 3)
    with pytest.raises(ValueError):
        validate_mask([[2, 0], [0, 1]], 2, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim_w=1)
    with pytest.raises(ValueError):
        ModelConfig(architecture="transformer")
    with pytest.raises(ValueError):
        ModelConfig(condition_features=("spin",))
    cfg = tiny(property_spec=PropertySpec(["com_y", "total_deposit"], [0.1, 1e-3], [-1.0, -1.0]))
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_array_names():
    assert array_name("heads.com_x.fc0.weight") == "head_com_x/fc0/weight"
    assert array_name("decoder.0.bias") == "decoder/0/bias"


@pytest.mark.parametrize("arch, dtype", [("conv", torch.float32), ("mlp", torch.float64)])
def test_checkpoint_round_trip_bit_exact(tmp_path, arch, dtype):
    cfg = tiny(arch, seed=3)
    mask = np.array([[1, 0, 1], [0, 1, 0]], np.float32)
    model = init_model(cfg, mask=mask, image_scale=2.5, dtype=dtype)
    path = tmp_path / "m.zdc1"
    save_checkpoint(model, norm(), path, history=[{"epoch": 1}], extra={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.mask.tolist() == mask.tolist()
    assert ck.history == [{"epoch": 1}] and ck.extra == {"note": "x"}
    assert ck.model.dtype == dtype and ck.model.image_scale == 2.5
    x = inputs(cfg, n=10, dtype=dtype)
    with torch.no_grad():
        a, b = model(*x), ck.model(*x)
    assert torch.equal(a.reconstruction, b.reconstruction) and torch.equal(a.properties, b.properties)
    save_checkpoint(ck.model, ck.normalization, tmp_path / "again.zdc1", ck.history, ck.extra)
    assert (tmp_path / "again.zdc1").read_bytes() == path.read_bytes()


def test_checkpoint_mismatches(tmp_path):
    path = tmp_path / "m.zdc1"
    save_checkpoint(init_model(tiny()), norm(), path)
    c = read_container(path)

    meta = dict(c.metadata, config={**c.metadata["config"], "dim_w": 4})
    write_container(tmp_path / "shape.zdc1", meta, c.arrays)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "shape.zdc1")

    arrays = dict(c.arrays)
    arrays.pop(next(iter(arrays)))
    write_container(tmp_path / "missing.zdc1", c.metadata, arrays)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "missing.zdc1")

    write_container(tmp_path / "kind.zdc1", dict(c.metadata, format_kind="dataset"), c.arrays)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "kind.zdc1")
