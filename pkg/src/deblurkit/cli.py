"""Command-line front door: profile, synth, train, infer, eval, gradcheck.

Exit codes: 0 ok, 1 missing input, 2 usage, 3 corrupt data,
4 verification failure. All subcommands are non-interactive and print
machine-parseable (tab-separated or JSON) output. A config file of
``key = value`` lines can seed any subcommand's options; explicit flags
override it, unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import losses as L
from . import ops
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .data import PpmError, denormalize, apply_blur, gen_motion_kernel, \
    load_dataset, normalize, read_image, write_image
from .models import GeneratorConfig, build_discriminator, build_generator, \
    cast_graph, forward_discriminator, forward_generator, init_weights, \
    parameters
from .profiler import count_macs, report_json
from .tensor import Tensor
from .train import TrainConfig, config_from_json, evaluate, fine_tune, \
    train, _restore_weights

EXIT_OK = 0
EXIT_MISSING_INPUT = 1
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_VERIFICATION = 4


class UsageError(Exception):
    pass


def _parse_resolution(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"resolution must look like 256x256, got '{text}'")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"resolution must be integers, got '{text}'")
    if h <= 0 or w <= 0:
        raise UsageError(f"resolution must be positive, got '{text}'")
    return h, w


def _read_config_file(path: Path) -> dict:
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(
                f"{path}:{lineno}: expected 'key = value', got '{raw}'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(args: argparse.Namespace, defaults: dict) -> None:
    """Resolution order: explicit flag > config file > default."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = _read_config_file(Path(args.config))
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(
                f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, default in defaults.items():
        if getattr(args, key, None) is not None:
            continue
        if key in file_cfg:
            text = file_cfg[key]
            caster = type(default) if default is not None else str
            if caster is bool:
                value = text.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    value = caster(text)
                except ValueError:
                    raise UsageError(
                        f"config key '{key}': cannot parse '{text}'")
            setattr(args, key, value)
        else:
            setattr(args, key, default)


# ------------------------------------------------------------------ profile

_PROFILE_DEFAULTS = {
    "ngf": 64,
    "n_blocks": 9,
    "decomposition": "res_only",
    "resolution": "256x256",
    "json_out": "",
}


def cmd_profile(args) -> int:
    _apply_config(args, _PROFILE_DEFAULTS)
    if args.ngf < 1 or args.n_blocks < 1:
        raise UsageError("ngf and n-blocks must be positive")
    res = _parse_resolution(args.resolution)
    cfg = GeneratorConfig(args.ngf, args.n_blocks, args.decomposition)
    try:
        graph = build_generator(cfg)
    except ValueError as e:
        raise UsageError(str(e))
    report = count_macs(graph, res)
    text = report_json(report)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    print(text)
    print(f"total_params\t{report.total_params}")
    print(f"total_macs\t{report.total_macs}")
    return EXIT_OK


# -------------------------------------------------------------------- synth

_SYNTH_DEFAULTS = {
    "kernel_size": 9,
    "steps": 6,
    "noise_sigma": 1.0,
    "seed": 0,
}


def cmd_synth(args) -> int:
    _apply_config(args, _SYNTH_DEFAULTS)
    src = Path(args.src)
    out = Path(args.out)
    if not src.is_dir():
        print(f"error: source directory not found: {src}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    sources = sorted(src.glob("*.ppm"))
    if not sources:
        print(f"error: no .ppm images in {src}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    (out / "blur").mkdir(parents=True, exist_ok=True)
    (out / "sharp").mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(sources):
        sharp = read_image(path)
        kseed, nseed = np.random.SeedSequence(
            [args.seed, i]).generate_state(2)
        kernel = gen_motion_kernel(int(kseed), args.kernel_size, args.steps)
        blurred = apply_blur(sharp, kernel, args.noise_sigma, int(nseed))
        write_image(sharp, out / "sharp" / path.name)
        write_image(blurred, out / "blur" / path.name)
        print(f"pair\t{path.name}")
    print(f"pairs_written\t{len(sources)}")
    return EXIT_OK


# -------------------------------------------------------------------- train

_TRAIN_DEFAULTS = {
    "split": "train",
    "lr": 1e-4,
    "epochs_constant": 150,
    "epochs_decay": 150,
    "lambda_content": 100.0,
    "adv_loss": "hinge",
    "crop": 256,
    "seed": 0,
    "ngf": 64,
    "n_blocks": 9,
    "decomposition": "res_only",
    "ndf": 64,
    "dropout_rate": 0.0,
    "max_steps": 0,
    "checkpoint_every": 0,
    "desk": False,
    "resume": "",
    "feature_net": "",
}


def cmd_train(args) -> int:
    _apply_config(args, _TRAIN_DEFAULTS)
    data_root = Path(args.data)
    if not data_root.is_dir():
        print(f"error: dataset root not found: {data_root}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    dataset = load_dataset(data_root, args.split)
    for line in dataset.warnings:
        print(f"warning\t{line}", file=sys.stderr)
    if len(dataset) == 0:
        print("error: dataset has no aligned pairs", file=sys.stderr)
        return EXIT_MISSING_INPUT
    kwargs = dict(
        lr=args.lr, epochs_constant=args.epochs_constant,
        epochs_decay=args.epochs_decay, lambda_content=args.lambda_content,
        adv_loss=args.adv_loss, crop=args.crop, seed=args.seed, ngf=args.ngf,
        n_blocks=args.n_blocks, decomposition=args.decomposition,
        ndf=args.ndf, dropout_rate=args.dropout_rate,
        max_steps=args.max_steps or None,
        checkpoint_every=args.checkpoint_every)
    if args.desk:
        base = TrainConfig.desk_scale()
        for key in ("crop", "epochs_constant", "epochs_decay"):
            if getattr(args, key) == _TRAIN_DEFAULTS[key]:
                kwargs[key] = getattr(base, key)
    try:
        cfg = TrainConfig(**kwargs).validate()
    except ValueError as e:
        raise UsageError(str(e))
    feat = L.load_feature_net(args.feature_net) if args.feature_net else None
    ckpt_path, history = train(cfg, dataset, args.out, feature_net=feat,
                               resume_from=args.resume or None)
    print(f"checkpoint\t{ckpt_path}")
    print(f"steps\t{len(history)}")
    return EXIT_OK


# -------------------------------------------------------------------- infer

def _load_generator_from_checkpoint(path: Path):
    ck = load_checkpoint(path)
    cfg = config_from_json(ck.metadata["config"])
    g_net = build_generator(cfg.generator_config())
    d_net = build_discriminator(cfg.ndf)
    _restore_weights(ck, g_net, d_net)
    return g_net


def cmd_infer(args) -> int:
    ckpt_path = Path(args.ckpt)
    in_path = Path(args.input)
    if not ckpt_path.is_file():
        print(f"error: checkpoint not found: {ckpt_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    if not in_path.is_file():
        print(f"error: input image not found: {in_path}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    g_net = _load_generator_from_checkpoint(ckpt_path)
    img = read_image(in_path)
    h, w = img.shape[:2]
    ph = (-h) % 4
    pw = (-w) % 4
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    with T.no_grad():
        restored = forward_generator(
            g_net, Tensor(normalize(padded).data[None]))
    out_img = denormalize(restored)[:h, :w]
    write_image(out_img, args.output)
    print(f"wrote\t{args.output}")
    print(f"size\t{w}x{h}")
    return EXIT_OK


# --------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    data_root = Path(args.data)
    if not data_root.is_dir():
        print(f"error: dataset root not found: {data_root}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    dataset = load_dataset(data_root, args.split)
    if len(dataset) == 0:
        print("error: dataset has no aligned pairs", file=sys.stderr)
        return EXIT_MISSING_INPUT
    if args.identity:
        g_net = build_generator(GeneratorConfig(ngf=args.ngf, n_blocks=1))
        # zero weights make the residual branch vanish: pure skip
        for _, t in parameters(g_net):
            t.data = np.zeros_like(t.data)
    elif args.ckpt:
        path = Path(args.ckpt)
        if not path.is_file():
            print(f"error: checkpoint not found: {path}", file=sys.stderr)
            return EXIT_MISSING_INPUT
        g_net = _load_generator_from_checkpoint(path)
    else:
        raise UsageError("eval requires --ckpt or --identity")
    with T.no_grad():
        scores = evaluate(g_net, dataset, crop=args.crop, cap=None)
    print(f"pairs\t{len(dataset)}")
    print(f"psnr\t{scores['psnr']}")
    print(f"ssim\t{scores['ssim']}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def _gradcheck_suite(dtype, cases: int, seed: int) -> dict:
    """Finite-difference verification of every differentiable op plus the
    composed generator and discriminator; returns worst error per group."""
    rng = np.random.default_rng(seed)
    results = {}

    def away_from_kinks(shape, margin=0.08):
        x = rng.uniform(-1.0, 1.0, shape)
        return np.sign(x) * (np.abs(x) + margin)

    def check(name, f, x):
        err = T.grad_check(f, Tensor(x, dtype=dtype))
        results[name] = max(results.get(name, 0.0), err)

    for _ in range(cases):
        shape = (1, 2, rng.integers(5, 8) * 1, rng.integers(5, 8) * 1)
        x = away_from_kinks(shape)
        y = Tensor(away_from_kinks(shape), dtype=dtype)
        check("elementwise", lambda t: T.mean_all(
            T.mul(T.add(t, y), T.sub(t, y))), x)
        check("clamp", lambda t: T.mean_all(
            T.clamp(T.scalar_mul(t, 1.5), -1.0, 1.0)), x)
        check("activations", lambda t: T.sum_all(
            T.tanh(T.leaky_relu(t, 0.2))), x)
        check("instance_norm", lambda t: T.mean_all(
            T.mul(ops.instance_norm(t), y)), x)
        check("reflect_pad", lambda t: T.mean_all(
            T.mul(T.reflect_pad(t, 2), T.reflect_pad(y, 2))), x)
        check("concat", lambda t: T.mean_all(
            T.mul(T.concat_channels(t, y), T.concat_channels(y, t))), x)
        check("maxpool", lambda t: T.mean_all(ops.maxpool2(t)), x)

        w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, dtype=dtype)
        b = Tensor(rng.standard_normal(3) * 0.2, dtype=dtype)
        spec = ops.ConvSpec(2, 3, 3, 2, "zero", 1)
        check("conv2d.x", lambda t: T.mean_all(
            T.mul(ops.conv2d(t, spec, w, b),
                  ops.conv2d(Tensor(x, dtype=dtype), spec, w, b))), x)
        check("conv2d.w", lambda t: T.sum_all(ops.conv2d(
            Tensor(x, dtype=dtype),
            ops.ConvSpec(2, 3, 3, 1, "reflect", 1), t, b)), w.data)

        dw = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5, dtype=dtype)
        pw = Tensor(rng.standard_normal((4, 2, 1, 1)) * 0.5, dtype=dtype)
        check("depthwise", lambda t: T.mean_all(T.mul(
            ops.depthwise_conv2d(t, ops.ConvSpec(2, 2, 3, 1, "zero", 1), dw),
            t)), x)
        check("separable", lambda t: T.sum_all(T.tanh(
            ops.separable_conv2d(t, dw, pw, stride=2, padding=1))), x)

        wt = Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.5, dtype=dtype)
        check("conv_transpose", lambda t: T.mean_all(T.tanh(
            ops.conv2d_transposed(t, ops.ConvSpec(2, 3, 3, 2, "zero", 1),
                                  wt))), x)
        check("conv_transpose.w", lambda t: T.mean_all(
            ops.conv2d_transposed(Tensor(x, dtype=dtype),
                                  ops.ConvSpec(2, 3, 3, 2, "zero", 1), t)),
              wt.data)

    # composed networks, gradient with respect to the input image
    for i in range(max(1, cases // 4)):
        g_net = build_generator(GeneratorConfig(ngf=4, n_blocks=1))
        init_weights(g_net, seed + i)
        cast_graph(g_net, dtype)
        xg = rng.uniform(-0.85, 0.85, (1, 3, 8, 8))
        proj = Tensor(rng.standard_normal((1, 3, 8, 8)), dtype=dtype)
        check("generator", lambda t: T.mean_all(
            T.mul(forward_generator(g_net, t), proj)), xg)

        d_net = build_discriminator(ndf=4)
        init_weights(d_net, seed + 100 + i)
        cast_graph(d_net, dtype)
        xd = rng.uniform(-1.0, 1.0, (1, 6, 24, 24))
        check("discriminator", lambda t: T.mean_all(
            forward_discriminator(d_net, t)), xd)

        feat = L.builtin_tiny_featurenet(seed + i)
        for layer in feat.graph.layers:
            for t in layer.weights.values():
                t.data = t.data.astype(dtype)
        xr = rng.uniform(-0.9, 0.9, (1, 3, 8, 8))
        ref = Tensor(rng.uniform(-0.9, 0.9, (1, 3, 8, 8)), dtype=dtype)
        check("perceptual", lambda t: L.perceptual_loss(feat, t, ref), xr)
    return results


_GRADCHECK_DEFAULTS = {"precision": 64, "cases": 5, "seed": 0,
                       "tolerance": 0.0}


def cmd_gradcheck(args) -> int:
    _apply_config(args, _GRADCHECK_DEFAULTS)
    if args.precision not in (32, 64):
        raise UsageError("precision must be 32 or 64")
    dtype = np.float64 if args.precision == 64 else np.float32
    tol = args.tolerance or (1e-5 if args.precision == 64 else 3e-2)
    results = _gradcheck_suite(dtype, args.cases, args.seed)
    worst = 0.0
    for name in sorted(results):
        print(f"{name}\t{results[name]:.3e}")
        worst = max(worst, results[name])
    print(f"worst\t{worst:.3e}")
    print(f"tolerance\t{tol:.3e}")
    if worst >= tol:
        print("verification FAILED", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deblurkit",
        description="desk-scale blind motion deblurring toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="parameter and MAC accounting")
    p.add_argument("--ngf", type=int)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--decomposition",
                   choices=["res_only", "down_and_res", "up_and_res"])
    p.add_argument("--resolution")
    p.add_argument("--json", dest="json_out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("synth", help="synthesize blur/sharp training pairs")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kernel-size", dest="kernel_size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs-constant", dest="epochs_constant", type=int)
    p.add_argument("--epochs-decay", dest="epochs_decay", type=int)
    p.add_argument("--lambda-content", dest="lambda_content", type=float)
    p.add_argument("--adv-loss", dest="adv_loss",
                   choices=["hinge", "wgan_gp"])
    p.add_argument("--crop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ngf", type=int)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--decomposition",
                   choices=["res_only", "down_and_res", "up_and_res"])
    p.add_argument("--ndf", type=int)
    p.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--desk", action="store_const", const=True)
    p.add_argument("--resume")
    p.add_argument("--feature-net", dest="feature_net")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="deblur one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mean PSNR/SSIM over a paired folder")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--ckpt")
    p.add_argument("--identity", action="store_true")
    p.add_argument("--ngf", type=int, default=64)
    p.add_argument("--crop", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--precision", type=int)
    p.add_argument("--cases", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (CheckpointError, PpmError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
