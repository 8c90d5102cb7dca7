"""``diffunfold`` command line.

Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 numeric divergence,
5 integrity (corrupt checkpoint or operator blob).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_INTEGRITY = range(6)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int:
    raw = os.environ.get("DU_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise UsageError(f"DU_THREADS must be an integer, got {raw!r}") from None


def _cap_blas_threads() -> None:
    # Must happen before numpy loads its BLAS.
    n = os.environ.get("DU_THREADS")
    if n and n.isdigit():
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _load_cfg(args):
    from .config import Config, load_config

    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "nfe", None) is not None:
        if args.nfe < 1:
            from .config import ConfigError
            raise ConfigError(f"--nfe must be >= 1, got {args.nfe}")
        cfg.sampler.nfe = args.nfe
    return cfg


def _out(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _model(cfg, args, shape=None):
    from .experiment import build_model, load_model

    if args.checkpoint:
        return load_model(cfg, args.checkpoint, image_shape=shape)
    print("warning: no --checkpoint given; using an untrained denoiser", file=sys.stderr)
    return build_model(cfg, shape)[0]


# -- subcommands ----------------------------------------------------------------

def cmd_train(args) -> int:
    from . import experiment

    cfg = _load_cfg(args)
    out = _out(args)
    _, _, ck = experiment.train(cfg, out, resume=not args.fresh)
    print(json.dumps({"step": ck.step, "checkpoint": experiment.checkpoint_path(out),
                      "fingerprint": cfg.fingerprint}))
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from .data import gen_synthetic, load_images, save_png
    from .experiment import sampler_of, schedule_of
    from .numerics import Rng
    from .operators import Measurement, load_operator, measure
    from .sampling import sample

    cfg = _load_cfg(args)
    out = _out(args)
    if not args.op:
        raise UsageError("sample needs --op BLOB")
    op = load_operator(args.op)
    rng = Rng(cfg.seed)
    sched = schedule_of(cfg)
    # x_T comes first so a saved measurement replays the same trajectory
    x_init = sched.sigma_max * rng.normal((1,) + op.input_shape)
    if args.measurement:
        y = np.load(args.measurement)
        meas = Measurement(y=y, sigma_y=cfg.data.sigma_y, operator_id=op.op_id)
        clean = None
    else:
        if args.image:
            clean = load_images(args.image).items[0]
        else:
            clean = gen_synthetic("shapes", 1, op.input_shape[-1], Rng(cfg.data.eval_seed)).items[0]
        if clean.shape != op.input_shape:
            from .data import DataError
            raise DataError(f"image shape {clean.shape} does not match operator input {op.input_shape}")
        meas = measure(op, clean, cfg.data.sigma_y, rng)
        np.save(os.path.join(out, "measurement.npy"), meas.y)
    den = _model(cfg, args, op.input_shape)
    x_init = x_init.astype(den.reg.out.w.value.dtype)
    dump = os.path.join(out, "trajectory") if args.dump_trajectory else None
    x0 = sample([meas], [op], den, sched, sampler_of(cfg), x_init=x_init, dump_dir=dump)[0]
    np.save(os.path.join(out, "reconstruction.npy"), x0)
    if x0.shape[0] == 1:
        save_png(os.path.join(out, "reconstruction.png"), x0)
    result = {"op": op.op_id, "nfe": cfg.sampler.nfe, "out": os.path.join(out, "reconstruction.npy")}
    if clean is not None:
        from .metrics import psnr
        result["psnr"] = float(psnr(np.clip(x0, 0, 1), clean))
        result["baseline_psnr"] = float(psnr(np.clip(op.adjoint(meas.y), 0, 1), clean))
    print(json.dumps(result))
    return EXIT_OK


def cmd_eval(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from .config import fingerprint
    from .data import load_images
    from .experiment import build_datasets, evaluate_task, sampler_of, schedule_of
    from .metrics import MetricReport

    cfg = _load_cfg(args)
    out = _out(args)
    fp = fingerprint(cfg)
    if args.input or args.reference:
        if not (args.input and args.reference):
            raise UsageError("eval needs both --input and --reference, or neither")
        xs, refs = load_images(args.input), load_images(args.reference)
        if xs.items.shape != refs.items.shape:
            from .data import DataError
            raise DataError(f"input {xs.items.shape} and reference {refs.items.shape} differ in shape")
        report = MetricReport(fingerprint=fp)
        for i, (x, r) in enumerate(zip(xs.items, refs.items)):
            report.add(f"image_{i:03d}", x, r)
        report.to_csv(os.path.join(out, "metrics.csv"))
        report.to_jsonl(os.path.join(out, "metrics.jsonl"))
        print(json.dumps(report.summary()))
        return EXIT_OK

    _, held = build_datasets(cfg)
    den = _model(cfg, args, held.items.shape[1:])
    sched, samp = schedule_of(cfg), sampler_of(cfg)
    specs = cfg.task_specs("eval")

    def run(ix):
        i, spec = ix
        return evaluate_task(den, held.items, spec, cfg.data.sigma_y, sched, samp, seed=cfg.seed + i,
                             name=f"{spec.kind}{i}")

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(run, enumerate(specs)))
    lines = []
    for r in results:
        r["report"].fingerprint = fp
        r["report"].to_csv(os.path.join(out, f"metrics_{r['task']}.csv"))
        r["report"].to_jsonl(os.path.join(out, f"metrics_{r['task']}.jsonl"))
        lines.append({k: v for k, v in r.items() if k != "report"})
    for line in lines:
        print(json.dumps(line))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    from .oracle import identity_sweep

    seed = 0 if args.seed is None else args.seed
    res = identity_sweep(seed=seed, n_configs=args.n)
    res["ok"] = res["max_score_residual"] < 1e-10 and res["max_argmin_residual"] < 1e-8
    print(json.dumps(res))
    return EXIT_OK


def cmd_bench(args) -> int:
    import numpy as np

    from .experiment import sampler_of, schedule_of
    from .numerics import Rng
    from .operators import make_gaussian_blur, measure
    from .sampling import sample

    cfg = _load_cfg(args)
    shape = (1, args.size, args.size)
    den = _model(cfg, args, shape)
    op = make_gaussian_blur(9, 1.5, 1.5, shape=shape)
    rng = Rng(cfg.seed)
    meas = measure(op, rng.uniform(size=shape), 0.05, rng)
    dtype = den.reg.out.w.value.dtype
    times = []
    for _ in range(args.repeats):
        x_init = (schedule_of(cfg).sigma_max * rng.normal((1,) + shape)).astype(dtype)
        t0 = time.perf_counter()
        sample([meas], [op], den, schedule_of(cfg), sampler_of(cfg), x_init=x_init)
        times.append(time.perf_counter() - t0)
    print(json.dumps({"size": args.size, "nfe": cfg.sampler.nfe, "K": den.K,
                      "seconds_per_image": float(np.median(times)), "repeats": args.repeats}))
    return EXIT_OK


def cmd_make_op(args) -> int:
    from .numerics import Rng
    from .operators import MaskSpec, make_gaussian_blur, make_inpainting, make_mri, make_superres, save_operator

    if not args.out:
        raise UsageError("make-op needs --out PATH")
    shape = (1, args.size, args.size)
    seed = 0 if args.seed is None else args.seed
    rng = Rng(seed)
    if args.kind == "blur":
        op = make_gaussian_blur(args.kernel, args.sigma, args.sigma2 or args.sigma, args.angle, shape=shape)
    elif args.kind == "inpaint":
        op = make_inpainting(args.drop_p, shape, rng)
    elif args.kind == "superres":
        op = make_superres(args.factor, shape=shape)
    else:
        op = make_mri((args.size, args.size), args.coils,
                      MaskSpec(args.pattern, acceleration=args.acceleration, seed=seed), rng)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_operator(args.out, op)
    print(json.dumps({"op": op.op_id, "kind": op.kind, "input_shape": list(op.input_shape),
                      "output_shape": list(op.output_shape), "path": args.out}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffunfold", description="Diffusion posterior sampling with an unfolded denoiser.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if model:
            sp.add_argument("--checkpoint", help="DUCK checkpoint")
            sp.add_argument("--nfe", type=int)

    sp = sub.add_parser("train", help="train a denoiser")
    common(sp, model=False)
    sp.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in --out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="reconstruct from a measurement")
    common(sp)
    sp.add_argument("--op", help="operator blob")
    sp.add_argument("--measurement", help=".npy measurement (else a test image is measured)")
    sp.add_argument("--image", help="directory whose first PNG is measured")
    sp.add_argument("--dump-trajectory", action="store_true")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="held-out reconstruction metrics, or metrics between two folders")
    common(sp)
    sp.add_argument("--input", help="directory of reconstructions")
    sp.add_argument("--reference", help="directory of references")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("oracle-check", help="Gaussian identity sweeps")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n", type=int, default=100)
    sp.set_defaults(func=cmd_oracle_check)

    sp = sub.add_parser("bench", help="seconds per sampled image")
    common(sp)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--repeats", type=int, default=1)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("make-op", help="export an operator blob")
    sp.add_argument("--kind", choices=["blur", "inpaint", "superres", "mri"], required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--kernel", type=int, default=9)
    sp.add_argument("--sigma", type=float, default=1.5)
    sp.add_argument("--sigma2", type=float)
    sp.add_argument("--angle", type=float, default=0.0)
    sp.add_argument("--drop-p", type=float, default=0.4)
    sp.add_argument("--factor", type=int, default=2)
    sp.add_argument("--coils", type=int, default=4)
    sp.add_argument("--pattern", default="gaussian1d")
    sp.add_argument("--acceleration", type=float, default=4.0)
    sp.set_defaults(func=cmd_make_op)
    return p


def run(argv=None) -> int:
    _cap_blas_threads()
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DataError
    from .operators import OperatorFormatError
    from .training import TrainingDivergence

    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OperatorFormatError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}; snapshot: {json.dumps(exc.snapshot)[:2000]}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except FloatingPointError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
