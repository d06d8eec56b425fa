"""Command-line pipeline driver.

Subcommands: phantom, train, super-resolve, eval, gridsearch. Every
command is a pure function of (config, input files, seeds): primary
outputs are byte-identical across re-runs, and each output directory
carries a provenance manifest sufficient to reproduce it.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, fileio
from . import metrics as mt
from . import phantom as ph
from .config import (ConfigError, ExperimentConfig, apply_overrides,
                     experiment_from_dict, experiment_to_dict, load_experiment)
from .diffusion import (NonFiniteLossError, TrainState, make_schedule,
                        train_step)
from .model import DiffusionTransformer, ModelConfig
from .sampler import (GuidanceWeights, SamplerError, grid_search_weights, sample)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

ENV_OUTPUT_ROOT = "QSPACE_ASR_OUT"
ENV_THREADS = "QSPACE_ASR_THREADS"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(path_str: str) -> Path:
    root = os.environ.get(ENV_OUTPUT_ROOT)
    path = Path(path_str)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(ENV_THREADS)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _write_provenance(outdir: Path, command: str, config: dict, inputs: dict,
                      seeds: dict):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": inputs,
        "seeds": seeds,
    }
    (outdir / "provenance.json").write_text(json.dumps(manifest, indent=1))


def _load_config(args) -> ExperimentConfig:
    if args.config:
        data = json.loads(Path(args.config).read_text())
    else:
        data = {}
    data = apply_overrides(data, args.set or [])
    return experiment_from_dict(data)


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = _load_config(args)
    p = cfg.phantom
    outdir = _out_dir(args.out)
    table = ph.make_gradient_table(p.n_directions, p.bvalue, seed=p.scheme_seed)
    fileio.write_gradient_table(outdir, table)

    spec = ph.PhantomSpec(height=p.height, width=p.width,
                          n_directions=p.n_directions, bvalue=p.bvalue,
                          noise_sigma=p.noise_sigma, seed=p.seed,
                          scheme_seed=p.scheme_seed)
    splits = {"train": (p.n_train, 0),
              "val": (p.n_val, p.n_train),
              "test": (p.n_test, p.n_train + p.n_val)}
    n_threads = _threads(args)

    files = []
    for name, (count, offset) in splits.items():
        split_dir = outdir / name
        split_dir.mkdir(exist_ok=True)
        if n_threads > 1 and count > 1:
            # per-slice seeds derive from (seed, slice index): chunked parallel
            # generation is bit-identical to the serial loop
            chunks = np.array_split(np.arange(count), min(n_threads, count))
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                parts = list(pool.map(
                    lambda ch: ph.make_slice_stack(spec, len(ch), table,
                                                   seed_offset=offset + int(ch[0])),
                    chunks))
            noisy = np.concatenate([pt[0] for pt in parts])
            tensors = np.concatenate([pt[2] for pt in parts])
        else:
            noisy, _, tensors = ph.make_slice_stack(spec, count, table,
                                                    seed_offset=offset)
        dwi_bin, dwi_json = fileio.write_volume(
            split_dir / "dwi", noisy, extra={"bvalue": p.bvalue, "split": name})
        tens_bin, tens_json = fileio.write_volume(
            split_dir / "tensors",
            tensors.reshape(count, p.height, p.width, -1),
            b0_normalized=False,
            extra={"layout": "per voxel: compartments x row-major 3x3",
                   "split": name})
        for logical, (b, s) in (("dwi", (dwi_bin, dwi_json)),
                                ("tensors", (tens_bin, tens_json))):
            files.append({
                "split": name, "kind": logical,
                "data": str(b.relative_to(outdir)),
                "sidecar": str(s.relative_to(outdir)),
                "sha256": fileio.sha256_file(b),
            })

    (outdir / "manifest.json").write_text(json.dumps({"files": files}, indent=1))
    _write_provenance(outdir, "phantom", experiment_to_dict(cfg), inputs={},
                      seeds={"phantom": p.seed, "scheme": p.scheme_seed})
    print(f"wrote {len(files)} data files under {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _checkpoint_state(state: TrainState) -> tuple[dict, dict]:
    tensors = {f"param/{k}": v.values for k, v in state.model.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.optimizer.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.optimizer.v.items()})
    meta = {
        "iteration": state.iteration,
        "adam_steps": state.optimizer.step_count,
        "model_config": state.model.config.to_dict(),
        "train_config": state.config.__dict__,
        "rng_state": json.loads(json.dumps(state.rng.bit_generator.state)),
    }
    return tensors, meta


def save_train_state(path, state: TrainState):
    tensors, meta = _checkpoint_state(state)
    fileio.save_tensors(path, tensors, meta)


def load_train_state(path) -> TrainState:
    from .diffusion import AdamW, TrainConfig

    tensors, meta = fileio.load_tensors(path)
    model = DiffusionTransformer.create(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items()
                           if k.startswith("param/")})
    tc = TrainConfig(**meta["train_config"])
    opt = AdamW(lr=tc.lr, weight_decay=tc.weight_decay,
                step_count=meta["adam_steps"])
    opt.m = {k[len("adam_m/"):]: v for k, v in tensors.items()
             if k.startswith("adam_m/")}
    opt.v = {k[len("adam_v/"):]: v for k, v in tensors.items()
             if k.startswith("adam_v/")}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model=model, optimizer=opt, iteration=meta["iteration"],
                      rng=rng, config=tc)


def _val_loss(state: TrainState, val: np.ndarray, table, schedule) -> float:
    """Masked-denoising loss on validation slices with a fixed evaluation RNG."""
    from .diffusion import forward_diffuse, masked_noise_mse, sample_mask
    from .model import predict_noise

    rng = np.random.default_rng(1234)
    t = rng.integers(1, schedule.n_steps + 1, size=len(val))
    observed = np.stack([sample_mask(0.9, val.shape[-1], rng).observed
                         for _ in range(len(val))])
    noise = rng.standard_normal(val.shape)
    x_t = forward_diffuse(val, t, noise, schedule)
    eps_hat = predict_noise(state.model, x_t, val, observed, t, table)
    return float(masked_noise_mse(eps_hat, noise, observed[:, None, None, :]).values)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = Path(args.dataset)
    outdir = _out_dir(args.out)
    table = fileio.read_gradient_table(dataset)
    train_x, _ = fileio.read_volume(dataset / "train" / "dwi")
    val_x, _ = fileio.read_volume(dataset / "val" / "dwi")

    if args.resume:
        state = load_train_state(args.resume)
        state.config = cfg.train  # the new run's budget governs the ramp
        log_mode = "a"
    else:
        state = TrainState.create(cfg.model, cfg.train)
        log_mode = "w"
    schedule = make_schedule(cfg.train.n_timesteps, cfg.train.beta_min,
                             cfg.train.beta_max)

    log_path = outdir / "loss_log.csv"
    best_val, best_path = np.inf, outdir / "checkpoint_best.ntar"
    try:
        with open(log_path, log_mode, newline="") as fh:
            writer = csv.writer(fh)
            if log_mode == "w":
                writer.writerow(["iteration", "mask_ratio", "t_mean", "loss"])
            while state.iteration < cfg.train.total_iterations:
                idx = state.rng.integers(0, len(train_x), size=cfg.train.batch_size)
                it = state.iteration
                loss = train_step(state, train_x[idx], table, schedule)
                writer.writerow([it, f"{state.last_info['mask_ratio']:.4f}",
                                 f"{state.last_info['t_mean']:.1f}", f"{loss:.8e}"])
                if (it + 1) % max(1, args.val_every) == 0 or \
                        state.iteration == cfg.train.total_iterations:
                    v = _val_loss(state, val_x, table, schedule)
                    if v < best_val:
                        best_val = v
                        save_train_state(best_path, state)
    except NonFiniteLossError as exc:
        (outdir / "failure_snapshot.json").write_text(json.dumps(exc.snapshot))
        raise CliError(str(exc), EXIT_NUMERIC) from None

    final_path = outdir / "checkpoint_final.ntar"
    save_train_state(final_path, state)
    if not best_path.exists():
        save_train_state(best_path, state)
    _write_provenance(
        outdir, "train", experiment_to_dict(cfg),
        inputs={"dataset": str(dataset),
                "train_sha256": fileio.sha256_file(dataset / "train" / "dwi.f32")},
        seeds={"train": cfg.train.seed})
    print(f"trained to iteration {state.iteration}; checkpoints in {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# super-resolve
# ---------------------------------------------------------------------------

def _resolve_mask(table, args) -> ph.AngularMask:
    if args.mask_file:
        data = json.loads(Path(args.mask_file).read_text())
        idx = np.asarray(data["observed_indices"], dtype=int)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= len(table):
            raise CliError("mask indices do not fit the gradient table", EXIT_CONFIG)
        observed = np.zeros(len(table), dtype=bool)
        observed[idx] = True
        mask = ph.AngularMask(observed=observed)
    elif args.n_in is not None:
        mask = ph.subsample_directions(table, args.n_in)
    else:
        raise CliError("one of --n-in or --mask-file is required", EXIT_CONFIG)
    if mask.n_directions != len(table):
        raise CliError("mask length does not match gradient table", EXIT_CONFIG)
    return mask


def cmd_super_resolve(args) -> int:
    cfg = _load_config(args)
    dataset = Path(args.dataset)
    outdir = _out_dir(args.out)
    table = fileio.read_gradient_table(dataset)
    data, _ = fileio.read_volume(dataset / args.split / "dwi")
    if args.slices:
        lo, hi = (int(v) for v in args.slices.split(":"))
        data = data[lo:hi]
    mask = _resolve_mask(table, args)

    state = load_train_state(args.checkpoint)
    schedule = make_schedule(cfg.train.n_timesteps, cfg.train.beta_min,
                             cfg.train.beta_max)
    weights = GuidanceWeights(lambda_obs=cfg.lambda_obs,
                              lambda_coef=cfg.lambda_coef)
    x_obs = data * mask.observed
    try:
        recon, trace = sample(x_obs, mask, table, state.model, schedule, weights,
                              seed=cfg.sample_seed, config=cfg.sampler)
    except SamplerError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None

    fileio.write_volume(outdir / "har", recon,
                        extra={"observed_indices": mask.observed_indices.tolist()})
    trace.to_csv(outdir / "trace.csv")
    (outdir / "mask.json").write_text(json.dumps(
        {"observed_indices": mask.observed_indices.tolist()}))
    _write_provenance(
        outdir, "super-resolve", experiment_to_dict(cfg),
        inputs={"dataset": str(dataset), "checkpoint": str(args.checkpoint),
                "checkpoint_sha256": fileio.sha256_file(args.checkpoint),
                "dwi_sha256": fileio.sha256_file(dataset / args.split / "dwi.f32")},
        seeds={"sample": cfg.sample_seed})
    print(f"super-resolved {data.shape} -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _psnr_or_none(x, y):
    v = mt.psnr(x, y)
    return None if np.isinf(v) else v


def _stat(values):
    nums = [v for v in values if v is not None]
    mean = float(np.mean(nums)) if nums else None
    std = float(np.std(nums)) if nums else None
    return {"mean": mean, "std": std, "per_slice": values}


def cmd_eval(args) -> int:
    outdir = _out_dir(args.out)
    gt, _ = fileio.read_volume(args.reference)
    recon, _ = fileio.read_volume(args.reconstruction)
    if gt.shape != recon.shape:
        raise CliError(f"shape mismatch {gt.shape} vs {recon.shape}", EXIT_CONFIG)
    table = fileio.read_gradient_table(Path(args.table))
    if gt.ndim == 3:
        gt, recon = gt[None], recon[None]

    psnr_slices, ssim_slices = [], []
    for s in range(gt.shape[0]):
        psnr_slices.append(_psnr_or_none(gt[s], recon[s]))
        ssim_slices.append(float(np.mean([
            mt.ssim(gt[s, :, :, d], recon[s, :, :, d])
            for d in range(gt.shape[-1])])))
    psnr_dirs = [_psnr_or_none(gt[..., d], recon[..., d])
                 for d in range(gt.shape[-1])]
    try:
        pearson = mt.pearson_r(gt, recon)
    except mt.MetricError:
        pearson = None  # constant input: correlation undefined

    dti_report = {}
    maps = {}
    for name, vol in (("reference", gt), ("reconstruction", recon)):
        field = mt.fit_dti(vol, table)
        maps[name] = mt.dti_scalars(field)
    for key in ("fa", "md", "ad"):
        ref_map, rec_map = maps["reference"][key], maps["reconstruction"][key]
        if key in ("md", "ad"):
            ref_map, rec_map = mt.normalize_map(ref_map), mt.normalize_map(rec_map)
        dti_report[key] = {
            "psnr": _psnr_or_none(ref_map, rec_map),
            "ssim": float(np.mean([mt.ssim(ref_map[s], rec_map[s])
                                   for s in range(ref_map.shape[0])])),
        }
        fileio.write_volume(outdir / f"{key}_reference", ref_map,
                            b0_normalized=False)
        fileio.write_volume(outdir / f"{key}_reconstruction", rec_map,
                            b0_normalized=False)

    report = {
        "dwi": {
            "psnr": {**_stat(psnr_slices), "per_direction": psnr_dirs},
            "ssim": _stat(ssim_slices),
            "pearson_r": pearson,
        },
        "dti": dti_report,
        "provenance": {
            "command": "eval",
            "version": __version__,
            "inputs": {
                "reference": str(args.reference),
                "reconstruction": str(args.reconstruction),
            },
        },
    }
    (outdir / "report.json").write_text(json.dumps(report, indent=1))
    with open(outdir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["psnr_mean", report["dwi"]["psnr"]["mean"]])
        writer.writerow(["ssim_mean", report["dwi"]["ssim"]["mean"]])
        writer.writerow(["pearson_r", pearson])
        for key in ("fa", "md", "ad"):
            writer.writerow([f"{key}_psnr", dti_report[key]["psnr"]])
            writer.writerow([f"{key}_ssim", dti_report[key]["ssim"]])
    print(f"report written to {outdir / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gridsearch
# ---------------------------------------------------------------------------

def cmd_gridsearch(args) -> int:
    cfg = _load_config(args)
    dataset = Path(args.dataset)
    outdir = _out_dir(args.out)
    table = fileio.read_gradient_table(dataset)
    val, _ = fileio.read_volume(dataset / "val" / "dwi")
    if args.slices:
        lo, hi = (int(v) for v in args.slices.split(":"))
        val = val[lo:hi]
    mask = _resolve_mask(table, args)
    state = load_train_state(args.checkpoint)
    schedule = make_schedule(cfg.train.n_timesteps, cfg.train.beta_min,
                             cfg.train.beta_max)
    x_obs = val * mask.observed
    best = grid_search_weights(x_obs, val, mask, table, state.model, schedule,
                               seed=cfg.sample_seed, config=cfg.sampler,
                               grid_obs=cfg.weight_grid[0],
                               grid_coef=cfg.weight_grid[1])
    (outdir / "weights.json").write_text(json.dumps(
        {"lambda_obs": best.lambda_obs, "lambda_coef": best.lambda_coef}))
    _write_provenance(outdir, "gridsearch", experiment_to_dict(cfg),
                      inputs={"dataset": str(dataset),
                              "checkpoint": str(args.checkpoint)},
                      seeds={"sample": cfg.sample_seed})
    print(f"selected lambda_obs={best.lambda_obs} lambda_coef={best.lambda_coef}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qspace-asr",
        description="Angular super-resolution experiments on synthetic dMRI phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, checkpoint=False):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="dotted-path config override, e.g. train.lr=1e-4")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for per-slice stages "
                            f"(default: ${ENV_THREADS} or all cores)")
        if dataset:
            p.add_argument("--dataset", required=True,
                           help="dataset directory from the phantom command")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("phantom", help="generate a phantom dataset")
    common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="masked-denoising pretraining")
    common(p, dataset=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--val-every", type=int, default=200)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("super-resolve", help="reconstruct all directions")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--n-in", type=int, default=None,
                   help="observed direction count (electrostatic subset)")
    p.add_argument("--mask-file", help="JSON with observed_indices")
    p.add_argument("--slices", help="slice range lo:hi")
    p.set_defaults(func=cmd_super_resolve)

    p = sub.add_parser("eval", help="metrics + DTI map comparison")
    p.add_argument("--reference", required=True, help="volume base path (no suffix)")
    p.add_argument("--reconstruction", required=True)
    p.add_argument("--table", required=True, help="directory with bvals/bvecs")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="guidance weight selection")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--n-in", type=int, default=None)
    p.add_argument("--mask-file", help="JSON with observed_indices")
    p.add_argument("--slices", help="slice range lo:hi")
    p.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ph.PhantomError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SamplerError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
