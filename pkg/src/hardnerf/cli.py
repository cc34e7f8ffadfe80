"""Command-line entry point: ``hardnerf <command> [flags]``.

Commands: generate, train, render, compare, export, occupancy.
Errors print a single ``error: <kind>: <reason>`` line to stderr and exit 1
(2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import imageio
from .evalbench import PSNR_CAP, export_ray_importance, pdf_histogram, psnr, skewness
from .field import FieldParams, forward_inference
from .hardmine import importance
from .renderer import backward_to_preactivations, composite, pixel_loss
from .sampler import OccupancyGrid, PixelPool, default_step, sample_pixels, sample_points
from .scene import PRESETS, Camera, Dataset, eval_scene, generate_scene, make_dataset
from .trainer import TrainerConfig, read_metrics_csv, render_image, train
from . import rng as rngmod

COMPARE_REQUIRED = ("iter", "loss", "B", "b", "macs_cum", "psnr_val")


class CliError(Exception):
    kind = "runtime"


class UsageError(CliError):
    kind = "usage"


class SchemaError(CliError):
    kind = "schema"


class ConfigMismatch(CliError):
    kind = "config_mismatch"


@dataclass
class RunConfig:
    command: str
    out: str | None = None
    scene: str = "spheres"
    dataset: str | None = None
    seed: int = 0
    views: int = 16
    resolution: int = 64
    steps_per_ray: int = 256
    deterministic: bool = True
    checkpoint: str | None = None
    early_termination: float | None = None
    path_frames: int = 0
    baseline: str | None = None
    hardmine: str | None = None
    target_psnr: float | None = None
    ray: int = 0
    trainer: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.trainer_config()  # validates trainer keys
        return cfg

    def trainer_config(self) -> TrainerConfig:
        try:
            return TrainerConfig.from_dict({"seed": self.seed, "deterministic": self.deterministic, **self.trainer})
        except (TypeError, ValueError) as e:
            raise UsageError(str(e)) from None

    def write(self, directory) -> Path:
        path = Path(directory) / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message.replace("\n", " "))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hardnerf", description="Desk-scale NeRF training with online hard sample mining.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="fixed-order reductions and wall-clock-free metrics (default on)")

    g = sub.add_parser("generate", help="render a synthetic dataset")
    common(g)
    g.add_argument("--scene", default="spheres", choices=PRESETS)
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--steps", dest="steps_per_ray", type=int, default=256)

    t = sub.add_parser("train", help="train a field in baseline or hardmine mode")
    common(t)
    t.add_argument("--dataset", help="dataset directory from 'generate'")
    t.add_argument("--mode", choices=("baseline", "hardmine"), default="hardmine")
    t.add_argument("--iters", type=int)
    t.add_argument("--budget-macs", type=int)
    t.add_argument("--rays", type=int, help="rays per iteration")
    t.add_argument("--eval-period", type=int)
    t.add_argument("--bmin", type=int)
    t.add_argument("--with-replacement", action="store_true", default=None)
    t.add_argument("--reweight", action="store_true", default=None)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any trainer default, e.g. --set lr_hash=0.005")
    t.add_argument("--config", help="JSON file with a full run config")

    r = sub.add_parser("render", help="render views from a trained checkpoint")
    common(r)
    r.add_argument("--checkpoint", required=True, help="output directory of 'train'")
    r.add_argument("--dataset")
    r.add_argument("--early-termination", type=float)
    r.add_argument("--path-frames", type=int, default=0, help="also render an orbit of N novel views")

    c = sub.add_parser("compare", help="compare baseline and hardmine metrics")
    common(c)
    c.add_argument("baseline", help="baseline metrics.csv")
    c.add_argument("hardmine", help="hardmine metrics.csv")
    c.add_argument("--target-psnr", type=float, help="defaults to the baseline's final PSNR")

    e = sub.add_parser("export", help="loss/weight/importance PDFs and a per-ray PLY")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--rays", type=int, default=1024)
    e.add_argument("--ray", type=int, default=0, help="which ray of the batch goes to the PLY")

    o = sub.add_parser("occupancy", help="dump an occupancy bitfield")
    common(o)
    src = o.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--scene", choices=PRESETS)
    return p


def resolve(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise CliError(f"cannot read config {args.config}: {e.strerror}") from None
        cfg = RunConfig.from_dict(d)
        cfg.command = args.command
        if args.out:
            cfg.out = args.out
        return cfg
    cfg = RunConfig(command=args.command, out=args.out, seed=args.seed, deterministic=args.deterministic)
    for name in ("scene", "dataset", "views", "resolution", "steps_per_ray", "checkpoint",
                 "early_termination", "path_frames", "baseline", "hardmine", "target_psnr", "ray"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if args.command == "train":
        tr = {}
        for flag, key in (("mode", "mode"), ("iters", "iterations"), ("budget_macs", "budget_macs"),
                          ("rays", "n_rays"), ("eval_period", "eval_period"), ("bmin", "b_min"),
                          ("with_replacement", "with_replacement"), ("reweight", "reweight")):
            v = getattr(args, flag)
            if v is not None:
                tr[key] = v
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            tr[k] = _parse_value(v)
        cfg.trainer = tr
    if args.command == "export":
        cfg.trainer = {"n_rays": args.rays}
    cfg.trainer_config()
    return cfg


def _require_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _load_dataset(path) -> Dataset:
    if not path:
        raise CliError("missing dataset: pass --dataset")
    try:
        return Dataset.load(path)
    except FileNotFoundError:
        raise CliError(f"missing dataset: no manifest.json under {path}") from None


def _load_checkpoint(cfg: RunConfig):
    ck = Path(cfg.checkpoint)
    if not (ck / "field.bin").exists():
        raise CliError(f"missing checkpoint: no field.bin under {ck}")
    params = FieldParams.load(ck / "field.bin")
    occ = OccupancyGrid.load_dump(ck / "occupancy.bin")
    dataset_path = cfg.dataset
    if dataset_path is None and (ck / "config.json").exists():
        dataset_path = json.loads((ck / "config.json").read_text()).get("dataset")
    trainer_cfg = TrainerConfig()
    if (ck / "trainer_config.json").exists():
        trainer_cfg = TrainerConfig.from_dict(json.loads((ck / "trainer_config.json").read_text()))
    return params, occ, _load_dataset(dataset_path), trainer_cfg


def _json_safe(d: dict) -> dict:
    """NaN/inf become null so the output stays strict JSON."""
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands -----------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> dict:
    out = _require_out(cfg)
    scene = generate_scene(cfg.scene, cfg.seed)
    ds = make_dataset(scene, cfg.views, cfg.resolution, cfg.seed, steps_per_ray=cfg.steps_per_ray)
    manifest = ds.save(out)
    cfg.write(out)
    info = {"views": len(ds.cameras), "train": len(ds.train_indices), "val": len(ds.val_indices),
            "manifest_sha256": file_digest(manifest)}
    print(f"generated {cfg.scene}: {info['train']} train / {info['val']} val views -> {out}")
    return info


def cmd_train(cfg: RunConfig) -> dict:
    ds = _load_dataset(cfg.dataset)
    out = _require_out(cfg)
    tcfg = cfg.trainer_config()
    cfg.write(out)

    def progress(m):
        print(f"iter {m.iter + 1} loss {m.loss:.6g} B {m.B} b {m.b} macs {m.macs_cum} psnr {min(m.psnr_val, PSNR_CAP):.3f}",
              flush=True)

    result = train(tcfg, ds, out_dir=out, progress=progress)
    return {"iterations": result.trainer.iteration, "final_psnr": result.final_psnr}


def cmd_render(cfg: RunConfig) -> dict:
    params, occ, ds, tcfg = _load_checkpoint(cfg)
    out = _require_out(cfg)
    cfg.write(out)
    step = default_step(ds.scene, tcfg.samples_across)
    args = (occ, step, ds.scene.bounds, ds.scene.background)
    rows = []
    for i in ds.val_indices:
        img = render_image(params, ds.cameras[i], *args, early_termination=cfg.early_termination)
        imageio.write_pfm(out / f"val_{i:03d}.pfm", img)
        imageio.write_ppm(out / f"val_{i:03d}.ppm", img)
        rows.append((i, min(psnr(img, ds.images[i]), PSNR_CAP)))
    with open(out / "psnr.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "psnr"])
        w.writerows((i, repr(v)) for i, v in rows)
    if cfg.path_frames > 0:
        ref = ds.cameras[0]
        center = ds.scene.bounds.mean(axis=0)
        radius = float(np.linalg.norm(ref.translation - center))
        height = float(ref.translation[2] - center[2])
        planar = np.sqrt(max(radius**2 - height**2, 0.0))
        for k in range(cfg.path_frames):
            phi = 2 * np.pi * k / cfg.path_frames
            eye = center + np.array([planar * np.cos(phi), planar * np.sin(phi), height])
            cam = Camera.look_at(eye, center, ref.focal, ref.width, ref.height)
            img = render_image(params, cam, *args, early_termination=cfg.early_termination)
            imageio.write_ppm(out / f"path_{k:03d}.ppm", img)
    mean = float(np.mean([v for _, v in rows])) if rows else float("nan")
    print(f"rendered {len(rows)} validation views, mean psnr {mean:.3f}")
    return {"mean_psnr": mean, "views": len(rows)}


def _read_checked(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing metrics file {p}")
    data = read_metrics_csv(p)
    missing = [c for c in COMPARE_REQUIRED if c not in data]
    if missing:
        raise SchemaError(f"{p} lacks column(s) {','.join(missing)}")
    return data


def _sibling_config(csv_path) -> dict | None:
    p = Path(csv_path).parent / "config.json"
    return json.loads(p.read_text()) if p.exists() else None


def check_matched(base_csv, hm_csv) -> None:
    """Runs must share dataset, seed and every trainer setting except the
    mode and the stopping rule."""
    a, b = _sibling_config(base_csv), _sibling_config(hm_csv)
    if a is None or b is None:
        return
    ignore = {"mode", "iterations", "budget_macs", "b_min", "with_replacement", "reweight", "eval_period"}
    for key in ("dataset", "seed"):
        if a.get(key) != b.get(key):
            raise ConfigMismatch(f"{key} differs: {a.get(key)!r} vs {b.get(key)!r}")
    ta = {k: v for k, v in a.get("trainer", {}).items() if k not in ignore}
    tb = {k: v for k, v in b.get("trainer", {}).items() if k not in ignore}
    if ta != tb:
        keys = sorted(k for k in set(ta) | set(tb) if ta.get(k) != tb.get(k))
        raise ConfigMismatch(f"trainer settings differ: {','.join(keys)}")


def eval_curve(data) -> tuple[np.ndarray, np.ndarray]:
    """(macs_cum, psnr_val) at the evaluated iterations."""
    mask = ~np.isnan(data["psnr_val"])
    return data["macs_cum"][mask], data["psnr_val"][mask]


def psnr_at_budget(macs, psnrs, budget) -> float:
    """Latest evaluated PSNR whose cumulative MACs do not exceed ``budget``."""
    ok = macs <= budget
    return float(psnrs[ok][-1]) if ok.any() else float("nan")


def budget_to_reach(macs, psnrs, target) -> float:
    """Cumulative MACs at the first evaluation reaching ``target`` (nan if never)."""
    hit = np.flatnonzero(psnrs >= target)
    return float(macs[hit[0]]) if len(hit) else float("nan")


def compare_runs(base: dict, hm: dict, target_psnr: float | None = None) -> dict:
    mb, pb = eval_curve(base)
    mh, ph = eval_curve(hm)
    if len(pb) == 0 or len(ph) == 0:
        raise SchemaError("no evaluated rows (psnr_val empty) in one of the runs")
    budget = float(mb[-1])
    target = float(pb[-1]) if target_psnr is None else float(target_psnr)
    base_at, hm_at = psnr_at_budget(mb, pb, budget), psnr_at_budget(mh, ph, budget)
    frac_base = budget_to_reach(mb, pb, target) / budget
    frac_hm = budget_to_reach(mh, ph, target) / budget
    return {
        "budget_macs": budget,
        "target_psnr": target,
        "psnr_baseline_at_budget": base_at,
        "psnr_hardmine_at_budget": hm_at,
        "psnr_delta_at_budget": hm_at - base_at,
        "budget_fraction_baseline": frac_base,
        "budget_fraction_hardmine": frac_hm,
        "budget_fraction_delta": frac_hm - frac_base,
    }


def cmd_compare(cfg: RunConfig) -> dict:
    base, hm = _read_checked(cfg.baseline), _read_checked(cfg.hardmine)
    check_matched(cfg.baseline, cfg.hardmine)
    out = _require_out(cfg)
    cfg.write(out)
    summary = compare_runs(base, hm, cfg.target_psnr)
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "iter", "macs_cum", "psnr_val", "loss"])
        for name, d in (("baseline", base), ("hardmine", hm)):
            for i in np.flatnonzero(~np.isnan(d["psnr_val"])):
                w.writerow([name, int(d["iter"][i]), int(d["macs_cum"][i]), repr(float(d["psnr_val"][i])),
                            repr(float(d["loss"][i]))])
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=1, sort_keys=True))
    print(f"psnr delta at matched budget {summary['psnr_delta_at_budget']:+.3f} dB; "
          f"hardmine reaches {summary['target_psnr']:.3f} dB at {summary['budget_fraction_hardmine']:.3f} of budget")
    return summary


def cmd_export(cfg: RunConfig) -> dict:
    params, occ, ds, tcfg = _load_checkpoint(cfg)
    out = _require_out(cfg)
    cfg.write(out)
    n_rays = cfg.trainer_config().n_rays
    pool = PixelPool(ds)
    rays, gt, _ = sample_pixels(pool, n_rays, rngmod.stream(cfg.seed, rngmod.PIXELS))
    step = default_step(ds.scene, tcfg.samples_across)
    batch = sample_points(rays, occ, step, ds.scene.bounds, rngmod.stream(cfg.seed, rngmod.JITTER))
    outputs = forward_inference(params, batch.positions, batch.view_dirs)
    render = composite(batch, outputs, background=ds.scene.background)
    _, per_ray = pixel_loss(render.color, gt)
    G = importance(backward_to_preactivations(batch, outputs, render, gt))
    pdf_histogram(per_ray, 50, log_scale=bool(np.any(per_ray > 0))).to_csv(out / "loss_pdf.csv")
    pdf_histogram(render.weights, 50, log_scale=bool(np.any(render.weights > 0))).to_csv(out / "weight_pdf.csv")
    G_hat = G / G.sum() if G.sum() > 0 else G
    pdf_histogram(G_hat, 50, log_scale=bool(np.any(G_hat > 0))).to_csv(out / "importance_pdf.csv")
    if not 0 <= cfg.ray < batch.n_rays:
        raise UsageError(f"--ray must lie in [0, {batch.n_rays})")
    s, e = batch.ray_offsets[cfg.ray], batch.ray_offsets[cfg.ray + 1]
    world = ds.scene.to_world(batch.positions[s:e])
    n = export_ray_importance(world, G[s:e], out / f"ray_{cfg.ray:04d}.ply",
                              extra={"weight": render.weights[s:e], "transmittance": render.transmittance[s:e]})
    try:
        skew = skewness(G_hat)
    except ValueError:
        skew = float("nan")
    stats = {"samples": int(batch.size), "ray_samples": n, "importance_skewness": skew}
    (out / "export.json").write_text(json.dumps(_json_safe(stats), indent=1, sort_keys=True))
    print(f"exported PDFs over {batch.size} samples and {n} ray samples")
    return stats


def cmd_occupancy(cfg: RunConfig) -> dict:
    out = _require_out(cfg)
    cfg.write(out)
    if cfg.checkpoint:
        _, occ, _, _ = _load_checkpoint(cfg)
    else:
        scene = generate_scene(cfg.scene, cfg.seed)
        occ = oracle_occupancy(scene, step_size=default_step(scene))
    occ.dump(out / "occupancy.bin")
    print(f"occupied fraction {occ.occupied_fraction:.4f}")
    return {"occupied_fraction": occ.occupied_fraction}


def oracle_occupancy(scene, resolution: int = 64, samples_per_axis: int = 3, threshold: float = 0.01,
                     step_size: float | None = None) -> OccupancyGrid:
    """Voxelise the analytic scene: each cell keeps the largest density
    among its sub-sample points, thresholded like the training grid."""
    grid = OccupancyGrid(resolution, threshold=threshold, step_size=step_size)
    r, s = resolution, samples_per_axis
    sub = (np.arange(s) + 0.5) / s
    offsets = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), -1).reshape(-1, 3)
    ijk = np.stack(np.meshgrid(*(np.arange(r),) * 3, indexing="ij"), -1).reshape(-1, 3)
    best = np.zeros(len(ijk))
    for off in offsets:
        d, _ = eval_scene(scene, scene.to_world((ijk + off) / r))
        best = np.maximum(best, d)
    grid.ema = best.reshape(r, r, r).astype(np.float32)
    grid.refresh()
    return grid


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "render": cmd_render,
    "compare": cmd_compare,
    "export": cmd_export,
    "occupancy": cmd_occupancy,
}


def run(argv=None) -> dict:
    cfg = resolve(argv)
    return COMMANDS[cfg.command](cfg)


def main(argv=None) -> int:
    try:
        run(argv)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except CliError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
