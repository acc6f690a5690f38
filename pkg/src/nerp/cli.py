"""Command-line front end: simulate measurements, reconstruct, sweep, score.

Experiments are driven by a strict JSON config (unknown keys are rejected)
plus a handful of overriding flags.  Every run writes a manifest with the
resolved config, its hash, and tool versions, so results can be re-executed
exactly.  Outputs land in a temp directory first and are promoted on
success; any error exits nonzero.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
import uuid
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from platform import python_version

import numpy as np

from . import __version__
from .images import ImageGrid, normalize_to_range
from .metrics import psnr, ssim
from .operators import (
    SamplingSpec,
    fbp_reconstruct,
    load_kspace,
    load_sinogram,
    nudft_adjoint,
    radon_forward,
    sample_kspace,
    save_kspace,
    save_sinogram,
)
from .phantoms import LesionSpec, load_image, perturb_lesion, save_image, shepp_logan
from .pipeline import RECON_MODES, ReconConfig, config_hash, reconstruct

ANALYTIC_MODES = ("fbp", "adjoint_nufft")

DEFAULT_CONFIG = {
    "seed": 0,
    "size": 64,
    "modality": "ct",
    "sampling": {
        "views": 20,
        "spokes": 40,
        "detector_bins": None,
        "samples_per_spoke": None,
        "noise_sigma": 0.0,
    },
    "lesions": [
        {"center": [0.42, 0.58], "axes": [0.09, 0.06], "angle": 0.5,
         "delta_intensity": 0.3}
    ],
    "network": {
        "depth": 8,
        "width": 256,
        "activation": "sine",
        "omega0": 30.0,
        "fourier_m": 256,
        "fourier_sigma": 4.0,
    },
    "training": {
        "prior_iters": 1000,
        "recon_iters": 1000,
        "prior_lr": 1e-4,
        "recon_lr": 1e-5,
        "dtype": "float32",
    },
    "normalization": "joint_prior",
    "prior_path": None,
    "target_path": None,
    "data": None,
    "modes": ["nerp", "nerp_no_prior", "fbp"],
    "out": "nerp-run",
}

_LESION_KEYS = {"center", "axes", "angle", "delta_intensity"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _check_keys(doc: dict, template: dict, path: str = "") -> None:
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in template:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(template[key], dict) and isinstance(value, dict):
            _check_keys(value, template[key], where)


def load_config(path=None, overrides=None) -> dict:
    """Merge defaults, an optional JSON config file, and flag overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        _check_keys(doc, DEFAULT_CONFIG)
        for lesion in doc.get("lesions", []):
            extra = set(lesion) - _LESION_KEYS
            if extra:
                raise ConfigError(f"unknown lesion key(s): {sorted(extra)}")
        for key, value in doc.items():
            if isinstance(value, dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "views":
            cfg["sampling"]["views"] = value
        elif key == "spokes":
            cfg["sampling"]["spokes"] = value
        else:
            cfg[key] = value
    if cfg["modality"] not in ("ct", "mri"):
        raise ConfigError(f"modality must be 'ct' or 'mri', got {cfg['modality']!r}")
    for mode in cfg["modes"]:
        if mode not in RECON_MODES + ANALYTIC_MODES:
            raise ConfigError(f"unknown mode {mode!r}")
    return cfg


def _sampling_spec(cfg: dict) -> SamplingSpec:
    s = cfg["sampling"]
    if cfg["modality"] == "ct":
        return SamplingSpec("ct", int(s["views"]), detector_bins=s["detector_bins"],
                            noise_sigma=float(s["noise_sigma"]),
                            noise_seed=int(cfg["seed"]))
    return SamplingSpec("mri", int(s["spokes"]),
                        samples_per_spoke=s["samples_per_spoke"],
                        noise_sigma=float(s["noise_sigma"]),
                        noise_seed=int(cfg["seed"]))


def _recon_config(cfg: dict) -> ReconConfig:
    net = cfg["network"]
    tr = cfg["training"]
    return ReconConfig(
        fourier_m=int(net["fourier_m"]),
        fourier_sigma=float(net["fourier_sigma"]),
        depth=int(net["depth"]),
        width=int(net["width"]),
        activation=net["activation"],
        omega0=float(net["omega0"]),
        prior_iters=int(tr["prior_iters"]),
        recon_iters=int(tr["recon_iters"]),
        prior_lr=float(tr["prior_lr"]),
        recon_lr=float(tr["recon_lr"]),
        seed=int(cfg["seed"]),
        sampling=_sampling_spec(cfg),
        dtype=tr["dtype"],
        normalization=cfg["normalization"],
    )


def _make_pair(cfg: dict) -> tuple[ImageGrid, ImageGrid]:
    """Prior/target images: loaded from disk or generated as a phantom pair."""
    if cfg["prior_path"]:
        prior = load_image(cfg["prior_path"])
    else:
        prior = shepp_logan(int(cfg["size"]))
    if cfg["target_path"]:
        target = load_image(cfg["target_path"])
    else:
        target = prior
        for spec in cfg["lesions"]:
            target = perturb_lesion(
                target,
                LesionSpec(tuple(spec["center"]), tuple(spec["axes"]),
                           float(spec.get("angle", 0.0)),
                           float(spec.get("delta_intensity", 0.0))),
            )
    if cfg["normalization"] == "joint_prior":
        lo, hi = float(prior.values.min()), float(prior.values.max())
        if (lo, hi) != (0.0, 1.0):
            prior = ImageGrid(normalize_to_range(prior.values, lo, hi), (lo, hi))
            target = ImageGrid(np.clip(normalize_to_range(target.values, lo, hi),
                                       0.0, 1.0), (lo, hi))
    elif cfg["normalization"] != "none":
        raise ConfigError(f"unknown normalization {cfg['normalization']!r}")
    return prior, target


def _measure(target: ImageGrid, cfg: dict):
    spec = _sampling_spec(cfg)
    if spec.modality == "ct":
        return radon_forward(target, spec)
    return sample_kspace(target, spec)


def _manifest(cfg: dict) -> dict:
    return {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "versions": {"python": python_version(), "numpy": np.__version__,
                     "nerp": __version__},
    }


class _RunDir:
    """Stage outputs in a temp directory, promote into place on success."""

    def __init__(self, out: Path):
        self.out = Path(out)
        if not self.out.parent.exists():
            raise ConfigError(f"output parent directory {self.out.parent} does not exist")
        self.tmp = self.out.parent / f"{self.out.name}.tmp-{uuid.uuid4().hex[:8]}"
        self.tmp.mkdir()

    def promote(self) -> None:
        if not self.out.exists():
            os.replace(self.tmp, self.out)
            return
        for entry in sorted(self.tmp.iterdir()):
            os.replace(entry, self.out / entry.name)
        self.tmp.rmdir()


def _validate_paths(cfg: dict) -> None:
    for key in ("prior_path", "target_path"):
        if cfg[key] and not Path(cfg[key]).exists():
            raise ConfigError(f"{key} {cfg[key]!r} does not exist")
    if cfg["data"]:
        data = Path(cfg["data"])
        if not data.is_dir():
            raise ConfigError(f"data directory {data} does not exist")
        meas = "sinogram.bin" if cfg["modality"] == "ct" else "kspace.bin"
        if not (data / meas).exists():
            raise ConfigError(f"data directory {data} is missing {meas}")
        if "nerp" in cfg["modes"] and not (data / "prior.raw").exists():
            raise ConfigError("nerp mode requires prior.raw in the data directory")


def cmd_simulate(cfg: dict) -> int:
    _validate_paths(cfg)
    run = _RunDir(Path(cfg["out"]))
    prior, target = _make_pair(cfg)
    measurements = _measure(target, cfg)
    save_image(prior, run.tmp / "prior.raw")
    save_image(target, run.tmp / "target.raw")
    if cfg["modality"] == "ct":
        save_sinogram(measurements, run.tmp / "sinogram.bin")
    else:
        save_kspace(measurements, run.tmp / "kspace.bin")
    (run.tmp / "manifest.json").write_text(json.dumps(_manifest(cfg), indent=2))
    run.promote()
    print(f"wrote prior/target/measurements to {run.out}")
    return 0


def _load_data_dir(cfg: dict):
    data = Path(cfg["data"])
    prior = load_image(data / "prior.raw") if (data / "prior.raw").exists() else None
    target = load_image(data / "target.raw") if (data / "target.raw").exists() else None
    expected = (int(cfg["size"]), int(cfg["size"]))
    for name, img in (("prior", prior), ("target", target)):
        if img is not None and img.shape != expected:
            raise ConfigError(
                f"{name}.raw has shape {img.shape}, config size expects {expected}"
            )
    if cfg["modality"] == "ct":
        measurements = load_sinogram(data / "sinogram.bin")
    else:
        measurements = load_kspace(data / "kspace.bin")
    return prior, target, measurements


def _run_one_mode(mode, prior, measurements, cfg):
    """Returns (image ndarray, iterations, losses or None)."""
    shape = (int(cfg["size"]), int(cfg["size"]))
    if mode == "fbp":
        if cfg["modality"] != "ct":
            raise ConfigError("fbp mode requires ct measurements")
        return fbp_reconstruct(measurements, shape), 0, None
    if mode == "adjoint_nufft":
        if cfg["modality"] != "mri":
            raise ConfigError("adjoint_nufft mode requires mri measurements")
        return nudft_adjoint(measurements, shape, apply_density_compensation=True), 0, None
    rc = _recon_config(cfg)
    image, losses = reconstruct(prior, measurements, rc, mode=mode, image_shape=shape)
    return image.values, rc.recon_iters, losses


def cmd_reconstruct(cfg: dict) -> int:
    _validate_paths(cfg)
    run = _RunDir(Path(cfg["out"]))

    if cfg["data"]:
        prior, target, measurements = _load_data_dir(cfg)
    else:
        prior, target = _make_pair(cfg)
        measurements = _measure(target, cfg)
    if "nerp" in cfg["modes"] and prior is None:
        raise ConfigError("nerp mode requires a prior image")

    rows = []
    timings = []
    for mode in cfg["modes"]:
        t0 = time.perf_counter()
        image, iters, losses = _run_one_mode(mode, prior, measurements, cfg)
        timings.append((mode, time.perf_counter() - t0))
        save_image(ImageGrid(image), run.tmp / f"{mode}.raw")
        clipped = np.clip(image, 0.0, 1.0)
        if target is not None:
            rows.append((mode, psnr(clipped, target.values), ssim(clipped, target.values),
                         iters))
        if losses is not None:
            with open(run.tmp / f"{mode}_loss.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iteration", "loss"])
                writer.writerows(enumerate(losses))

    with open(run.tmp / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "psnr", "ssim", "iters"])
        writer.writerows(rows)
    with open(run.tmp / "timings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "wall_time_s"])
        writer.writerows((m, f"{t:.3f}") for m, t in timings)
    (run.tmp / "manifest.json").write_text(json.dumps(_manifest(cfg), indent=2))
    run.promote()
    for row in rows:
        print(f"{row[0]}: psnr={row[1]:.2f} dB ssim={row[2]:.4f}")
    return 0


def _sweep_point(args) -> list:
    cfg, axis, value = args
    point = copy.deepcopy(cfg)
    if axis == "views":
        point["sampling"]["views"] = value
    elif axis == "spokes":
        point["sampling"]["spokes"] = value
    elif axis == "depth":
        point["network"]["depth"] = value
    elif axis == "width":
        point["network"]["width"] = value
    point["out"] = str(Path(cfg["out"]) / f"{axis}_{value}")
    cmd_reconstruct(point)
    rows = []
    with open(Path(point["out"]) / "metrics.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((value, rec["mode"], rec["psnr"], rec["ssim"]))
    return rows


def cmd_sweep(cfg: dict, axis: str, values: list[int]) -> int:
    if axis not in ("views", "spokes", "depth", "width"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    _validate_paths(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(cfg, axis, v) for v in values]
    workers = min(len(values), max(1, int(os.environ.get("NERP_THREADS", "1"))))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(job) for job in jobs]

    tmp_csv = out / f"sweep.csv.tmp-{uuid.uuid4().hex[:8]}"
    with open(tmp_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "mode", "psnr", "ssim"])
        for rows in results:
            writer.writerows(rows)
    os.replace(tmp_csv, out / "sweep.csv")
    manifest = _manifest(cfg)
    manifest["sweep"] = {"axis": axis, "values": values}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_metrics(test_path, ref_path, out_csv=None) -> int:
    test = load_image(test_path)
    ref = load_image(ref_path)
    clipped = np.clip(test.values, 0.0, 1.0)
    p = psnr(clipped, ref.values)
    s = ssim(clipped, ref.values)
    print(f"psnr={p} ssim={s}")
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["psnr", "ssim"])
            writer.writerow([p, s])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nerp", description="Sparse-measurement image reconstruction experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--mode", type=str, default=None,
                       help="comma-separated mode list")
        p.add_argument("--views", type=int, default=None)
        p.add_argument("--spokes", type=int, default=None)

    add_common(sub.add_parser("simulate", help="generate phantoms and measurements"))
    add_common(sub.add_parser("reconstruct", help="run reconstruction modes"))
    p_sweep = sub.add_parser("sweep", help="repeat reconstruction over an axis")
    add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True,
                         choices=["views", "spokes", "depth", "width"])
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated integer values")
    p_metrics = sub.add_parser("metrics", help="score one image against a reference")
    p_metrics.add_argument("--test", required=True)
    p_metrics.add_argument("--ref", required=True)
    p_metrics.add_argument("--out", default=None, help="optional CSV output path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "metrics":
            return cmd_metrics(args.test, args.ref, args.out)
        overrides = {
            "seed": args.seed,
            "out": args.out,
            "views": args.views,
            "spokes": args.spokes,
            "modes": args.mode.split(",") if args.mode else None,
        }
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg)
        if args.command == "sweep":
            values = [int(v) for v in args.values.split(",")]
            return cmd_sweep(cfg, args.axis, values)
        raise ConfigError(f"unknown command {args.command!r}")
    except Exception as exc:  # CLI contract: nonzero exit on any error
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
