"""Command line entry point: ``layerlat {invert,edit,train-toy,ablate,metrics}``."""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import codec
from .ddim import invert, make_schedule
from .denoiser import TOY_PRESET, ToyDenoiser, init_params, load_params, save_params
from .editing import union
from .errors import ContractError, DimensionError, FormatError, NumericError, ParameterError, ValidationError
from .fileio import load_pgm, load_ppm, save_latent, save_pgm, save_ppm
from .pipeline import json_safe, metrics, parse_plan, run, write_outputs
from .train import ShapesConfig, make_scene, moving_average, train_toy

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def env_seed(default):
    raw = os.environ.get("LAYERLAT_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"LAYERLAT_SEED: expected an integer, got {raw!r}") from None


def load_model(params_path, seed):
    """Trained model from an LPAR file, or a seeded untrained toy model."""
    if params_path:
        config, params = load_params(params_path)
        return ToyDenoiser(config, params)
    config = TOY_PRESET.from_dict({**TOY_PRESET.__dict__, "seed": seed})
    return ToyDenoiser(config, init_params(config))


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(json_safe(obj), indent=2, sort_keys=True) + "\n")


def cmd_invert(args):
    seed = env_seed(args.seed)
    model = load_model(args.params, seed)
    img = codec.check_image(load_ppm(args.image))
    traj = invert(codec.encode(img), model, make_schedule(args.steps))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, z in enumerate(traj):
        save_latent(out / f"z_{t:03d}.llat", z)
    return EXIT_OK


def cmd_edit(args):
    plan = parse_plan(args.plan)
    plan.hyper.seed = env_seed(plan.hyper.seed)
    model = load_model(args.params, plan.hyper.seed)
    result = run(plan, model, record_trajectory=args.dump_trajectory, record_heatmaps=args.dump_heatmaps)
    write_outputs(result, args.out, dump_stages=args.dump_stages, dump_heatmaps=args.dump_heatmaps,
                  dump_trajectory=args.dump_trajectory)
    return EXIT_OK


def cmd_train(args):
    seed = env_seed(args.seed)
    config = TOY_PRESET.from_dict({**TOY_PRESET.__dict__, "seed": seed})
    params, trace = train_toy(config, steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=seed,
                              optimizer=args.optimizer, log_every=args.log_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, config, params)
    smooth = moving_average(trace) if trace else []
    _dump_json(out.with_suffix(".trace.json"), {
        "steps": args.steps, "seed": seed, "optimizer": args.optimizer, "lr": args.lr,
        "loss": [float(v) for v in trace],
        "final_smoothed": float(smooth[-1]) if len(smooth) else None,
    })
    return EXIT_OK


def cmd_metrics(args):
    a, b = load_ppm(args.a), load_ppm(args.b)
    mask = load_pgm(args.mask) if args.mask else None
    print(json.dumps(json_safe(metrics(a, b, mask)), sort_keys=True))
    return EXIT_OK


# --- ablations -----------------------------------------------------------------

def _write_scene(out, seed):
    """Procedural scene with a known clean background; returns (scene, mask file names)."""
    rng = np.random.default_rng(seed)
    scene = make_scene(rng, ShapesConfig(min_objects=1, max_objects=2))
    inputs = out / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)
    save_ppm(inputs / "source.ppm", scene.image)
    save_ppm(inputs / "background.ppm", scene.background)
    names = []
    for i, m in enumerate(scene.masks):
        name = f"inputs/object{i}.pgm"
        save_pgm(out / name, m)
        names.append(name)
    return scene, names


def _variants(mode, masks):
    """(name, plan document) pairs for one ablation family."""
    base = {"source_image": "inputs/source.ppm", "reference_image": "inputs/background.ppm"}
    removal = dict(base, task="removal", layers=[{"index": 0, "mask": masks}])
    if mode == "mask-placement":
        return [(m, dict(removal, hyper={"mask_mode": m})) for m in ("key", "query", "value", "none")]
    if mode == "effect-range":
        return [(f"K{k}", dict(removal, hyper={"K": k, "step_range": [50, 50 - k]})) for k in (10, 20, 30, 40, 50)]
    if mode == "canvas-init":
        pan = dict(base, task="pan", layers=[{"index": 0, "adjust": {"pan": {"direction": "right", "scale": 0.2}}}])
        pan.pop("reference_image")
        return [(c, dict(pan, canvas_init=c)) for c in ("original", "black", "white")]
    if mode == "resize-level":
        doc = dict(base, task="resize_flip", layers=[
            {"index": 0, "mask": masks[:1]},
            {"index": 1, "mask": masks[0], "adjust": {"resize": {"h_ratio": 1.5, "w_ratio": 1.5}}}])
        doc.pop("reference_image")
        return [(lvl, dict(doc, ablation={"resize_level": lvl})) for lvl in ("image", "latent")]
    raise ValidationError(f"ablate --mode: unknown mode {mode!r}")


def cmd_ablate(args):
    seed = env_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(args.params, seed)
    _, masks = _write_scene(out, seed)
    summary = {"mode": args.mode, "seed": seed, "variants": {}}
    for name, doc in _variants(args.mode, masks):
        doc.setdefault("hyper", {})["seed"] = seed
        plan = parse_plan(doc, base_dir=str(out))
        result = run(plan, model)
        vdir = out / name
        write_outputs(result, vdir)
        summary["variants"][name] = {k: result.report[k] for k in ("hyper", "canvas_init", "resize_level")}
        if "metrics" in result.report:
            summary["variants"][name]["metrics"] = result.report["metrics"]
    _dump_json(out / "summary.json", summary)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="layerlat", description="Layered latent editing on a toy diffusion model.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("invert", help="DDIM-invert an image and write every latent")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--params", help="trained LPAR file (default: seeded untrained model)")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("edit", help="run an edit plan")
    s.add_argument("plan")
    s.add_argument("--out", required=True)
    s.add_argument("--params")
    s.add_argument("--dump-heatmaps", action="store_true")
    s.add_argument("--dump-stages", action="store_true")
    s.add_argument("--dump-trajectory", action="store_true")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("train-toy", help="train the toy denoiser on procedural shapes")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", help="run one ablation family on a procedural scene")
    s.add_argument("--mode", required=True, choices=("mask-placement", "effect-range", "canvas-init", "resize-level"))
    s.add_argument("--out", required=True)
    s.add_argument("--params")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("metrics", help="L1 / L2 / PSNR between two images")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--mask")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ParameterError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
