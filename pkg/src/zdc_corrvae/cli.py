"""Command line entry points: synth, train, generate, traverse, eval, inspect.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .container import ContainerError, read_container, write_container
from .datasets import (
    Dataset, DatasetError, EmptyDataset, ToyShowerConfig, load_dataset, save_dataset,
    split_dataset, synthesize_toy_dataset,
)
from .evaluation import (
    control_axes, emit_report, evaluate, traversal_monotonicity, write_grid,
)
from .inference import (
    GenerationRequest, encode_particles, generate, postprocess, reconstruct, traverse, wopt_json,
)
from .model import ConfigMismatch, load_checkpoint
from .physics import batch_center_of_mass, batch_property_vectors

log = logging.getLogger("zdc_corrvae")


class UsageError(Exception):
    """Bad arguments detected after parsing; exits with code 2."""


def _apply_thread_hint() -> None:
    hint = os.environ.get("ZDC_CORRVAE_THREADS")
    if hint:
        import torch

        torch.set_num_threads(max(1, int(hint)))


def _json_arg(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is neither a readable file nor inline JSON: {exc}") from None


# -- synth -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    toy = {}
    if args.config:
        toy = json.loads(Path(args.config).read_text())
        unknown = set(toy) - set(ToyShowerConfig().to_json())
        if unknown:
            raise UsageError(f"unknown synthesizer config key(s): {sorted(unknown)}")
    toy_cfg = ToyShowerConfig(**toy)
    ds = synthesize_toy_dataset(args.n, toy_cfg, args.seed)
    save_dataset(ds, args.out)
    resolved = {"n": args.n, "seed": args.seed, "config": toy_cfg.to_json()}
    Path(str(args.out) + ".config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    totals = ds.images.sum(axis=(1, 2))
    print(f"records: {len(ds)}")
    if len(ds):
        print(f"total deposit: mean {totals.mean():.2f}, std {totals.std():.2f}, "
              f"min {totals.min():.0f}, max {totals.max():.0f}")
    return 0


# -- train -------------------------------------------------------------------------


def _splits(ds: Dataset, cfg: dict):
    split = cfg["data"]["split"]
    return split_dataset(ds, split["fractions"], split["seed"])


def cmd_train(args) -> int:
    from .training import NonFiniteLoss, train

    cfg = cfgmod.load_config(args.config)
    cfg["data"]["path"] = str(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg["output"]["dir"] = str(out)
    cfg["reproducibility"] = (
        "bitwise for a fixed seed on the same torch build and thread count; "
        "floating-point reduction order may differ across builds or thread counts"
    )
    cfgmod.write_config(cfg, out / "config.json")

    train_ds, val_ds, _ = _splits(load_dataset(args.data), cfg)
    tc, weights = cfgmod.build_train_configs(cfg)

    def report(row):
        print(f"epoch {row['epoch']:3d}  total {row['total']:.4f}  recon {row['recon']:.4f}  "
              f"prop {row['prop']:.5f}  val_recon {row['val_recon'] if row['val_recon'] is None else round(row['val_recon'], 4)}")

    try:
        result = train(train_ds, cfgmod.build_model_config(cfg), tc, weights, out_dir=out,
                       val=val_ds if len(val_ds) else None, mask=cfgmod.mask_of(cfg), progress=report,
                       extra={"run_config": cfg})
    except NonFiniteLoss as exc:
        print(f"error: {exc}; last good epoch: {exc.last_good_epoch}", file=sys.stderr)
        return 1
    print(f"checkpoint: {result.checkpoint_path} (best epoch {result.best_epoch})")
    return 0


# -- generate ----------------------------------------------------------------------


def _load_particles(spec: str):
    """Particles from a dataset container or inline JSON; returns (particles, dataset or None)."""
    path = Path(spec)
    if path.is_file():
        if path.suffix == ".json":
            return np.asarray(json.loads(path.read_text()), dtype=np.float32).reshape(-1, 9), None
        ds = load_dataset(path)
        return ds.particles, ds
    arr = np.asarray(_json_arg(spec, "--particles"), dtype=np.float32)
    if arr.size % 9 or arr.size == 0:
        raise UsageError("--particles needs one or more 9-component vectors")
    return arr.reshape(-1, 9), None


def cmd_generate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    wopt = cfgmod.build_wopt(_run_config(ckpt))
    particles, source = _load_particles(args.particles)
    P = ckpt.config.n_properties
    if args.targets == "from-record":
        if source is None:
            raise UsageError("--targets from-record needs --particles to be a dataset file")
        targets = batch_property_vectors(source.images, ckpt.config.property_spec)
        if not np.isfinite(targets).all():
            raise UsageError("a reference record has no deposit")
    else:
        targets = np.asarray(_json_arg(args.targets, "--targets"), dtype=np.float64).reshape(-1, P)
    if len(particles) == 1 and len(targets) > 1:
        particles = np.repeat(particles, len(targets), axis=0)
    if len(targets) == 1 and len(particles) > 1:
        targets = np.repeat(targets, len(particles), axis=0)
    if len(targets) != len(particles):
        raise UsageError(f"{len(particles)} particles vs {len(targets)} target vectors")

    images, ws, zs, cs, rows = [], [], [], [], []
    measured = []
    for k, (p, t) in enumerate(zip(particles, targets)):
        try:
            req = GenerationRequest(p.tolist(), t.tolist(), n_samples=args.n, seed=args.seed + k)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        out = generate(ckpt, req, wopt)
        imgs = out.images
        if args.postproc_threshold is not None:
            imgs = postprocess(imgs, args.postproc_threshold)
        images.append(imgs)
        ws.append(out.w), zs.append(out.z), cs.append(out.c)
        rows.extend([k] * args.n)
        com = batch_center_of_mass(imgs)
        target_px = ckpt.config.property_spec.denormalize(t).tolist()
        entry = {"set": k, "target": t.tolist(), "target_pixels": target_px,
                 "measured_com": np.nanmean(com, axis=0).tolist() if np.isfinite(com).any() else None}
        measured.append(entry)
        print(f"set {k}: target {np.round(target_px, 2).tolist()} -> measured CoM "
              f"{None if entry['measured_com'] is None else np.round(entry['measured_com'], 2).tolist()}")

    rows = np.asarray(rows)
    metadata = {
        "format_kind": "samples",
        "request": {"particles": particles.tolist(), "targets": targets.tolist(), "n": args.n,
                    "seed": args.seed, "checkpoint": str(args.checkpoint)},
        "postprocess": None if args.postproc_threshold is None else {"threshold": args.postproc_threshold},
        "inference": wopt_json(wopt),
        "measured": measured,
    }
    write_container(args.out, metadata, {
        "images": np.concatenate(images).astype(np.float32),
        "particles": particles[rows].astype(np.float32),
        "targets": targets[rows].astype(np.float32),
        "w": np.concatenate(ws).astype(np.float32),
        "z": np.concatenate(zs).astype(np.float32),
        "c": np.concatenate(cs).astype(np.float32),
    })
    return 0


# -- traverse ----------------------------------------------------------------------


def _run_config(ckpt) -> dict:
    stored = ckpt.extra.get("run_config")
    return cfgmod.resolve_config({k: v for k, v in stored.items() if k != "reproducibility"}) \
        if stored else cfgmod.resolve_config({})


def cmd_traverse(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not 0 <= args.dim < ckpt.config.dim_w:
        raise UsageError(f"--dim must be in [0, {ckpt.config.dim_w})")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    particle = (np.asarray(_json_arg(args.particle, "--particle"), dtype=np.float32)
                if args.particle else np.asarray(ckpt.normalization.particle_mean, dtype=np.float32))
    rng = np.random.default_rng(args.seed)
    z = rng.standard_normal(ckpt.config.dim_z)
    c = encode_particles(ckpt, particle)[0]
    values = np.linspace(args.from_, args.to, args.steps)
    images = traverse(ckpt, (np.zeros(ckpt.config.dim_w), z, c), args.dim, values)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mapping = write_grid(out / f"traversal_w{args.dim}.pgm", images, 1, len(images))
    com = batch_center_of_mass(images)
    with open(out / f"traversal_w{args.dim}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "value", "com_x", "com_y"])
        for k, (v, (cx, cy)) in enumerate(zip(values, com)):
            writer.writerow([k, repr(float(v)), repr(float(cx)), repr(float(cy))])
    rho = {}
    if len(images) >= 3 and np.isfinite(com).all():
        for axis in ("x", "y"):
            rho[axis] = traversal_monotonicity(images, axis)
    owned = dict(control_axes(ckpt)).get(args.dim)
    summary = {"dim": args.dim, "values": values.tolist(), "spearman": rho, "controls_axis": owned,
               "grid_map": mapping, "seed": args.seed, "particle": particle.tolist()}
    (out / f"traversal_w{args.dim}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"traversal of w{args.dim}: {len(images)} image(s); spearman {rho or 'n/a (fewer than 3 images)'}")
    return 0


# -- eval --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _run_config(ckpt)
    ev = cfg["evaluation"]
    ds = load_dataset(args.data)
    test = ds if args.split == "all" else _splits(ds, cfg)[2]
    if len(test) == 0:
        raise EmptyDataset("the evaluation split is empty")
    seed = ev["seed"] if args.seed is None else args.seed
    report, gen = evaluate(ckpt, test, seed=seed, n_generated=ev["n_generated"],
                           traversal_contexts=ev["traversal_contexts"], probe_draws=ev["probe_draws"],
                           wopt=cfgmod.build_wopt(cfg), checkpoint_id=Path(args.checkpoint).name)
    gen_images = gen.images
    if ev["postproc_threshold"] is not None:
        gen_images = postprocess(gen_images, ev["postproc_threshold"])
        report.notes.append(f"generated samples post-processed with threshold {ev['postproc_threshold']}")
    tv = ev["traversal_values"]
    values = np.linspace(tv["from"], tv["to"], tv["steps"])
    c = encode_particles(ckpt, test.particles[0])[0]
    z = np.zeros(ckpt.config.dim_z)
    strips = {f"w{j}": traverse(ckpt, (np.zeros(ckpt.config.dim_w), z, c), j, values)
              for j, _ in control_axes(ckpt)}
    n = min(8, len(test))
    emit_report(report, args.out, reference_images=test.images,
                reconstructions=reconstruct(ckpt, test.images[:n], test.particles[:n]),
                generated_images=gen_images, traversals=strips)
    cfgmod.write_config(cfg, Path(args.out) / "config.json")
    print(json.dumps({k: getattr(report, k) for k in (
        "reconstruction_mse", "mean_wasserstein", "mean_normalized_wasserstein",
        "traversal_spearman", "disentanglement_com_std")}, indent=2))
    return 0


# -- inspect -----------------------------------------------------------------------


def cmd_inspect(args) -> int:
    c = read_container(args.file)
    print(f"format_kind: {c.format_kind}")
    print(f"version: {c.version}")
    print("arrays:")
    for d in c.descriptors():
        shape = "x".join(str(s) for s in d.shape) or "scalar"
        print(f"  {d.name}: {d.dtype} {shape}")
    meta = {k: v for k, v in c.metadata.items() if k != "history"}
    if "history" in c.metadata:
        meta["history"] = f"<{len(c.metadata['history'])} epoch(s)>"
    print("metadata:")
    print(json.dumps(meta, indent=2, sort_keys=True))
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zdc-corrvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a toy calorimeter dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with synthesizer settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="run config JSON (defaults filled in)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate responses for particles and property targets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--particles", required=True, help="dataset file, JSON file, or inline JSON")
    p.add_argument("--targets", required=True, help="inline JSON (normalized units) or 'from-record'")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--postproc-threshold", type=float, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("traverse", help="sweep one w coordinate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--from", dest="from_", type=float, default=-2.0)
    p.add_argument("--to", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--particle", help="inline JSON 9-vector (default: training mean particle)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="summarize any ZDC1 container")
    p.add_argument("--file", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_thread_hint()
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, DatasetError, ConfigMismatch, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
