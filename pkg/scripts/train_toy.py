"""Train the toy denoiser on procedural shapes and save an LPAR checkpoint.

    python3 scripts/train_toy.py --steps 2000 --out runs/toy.lpar
"""

import argparse
import json
import time
from pathlib import Path

from layerlat.denoiser import TOY_PRESET, DenoiserConfig, save_params
from layerlat.train import moving_average, train_toy


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", type=int, default=TOY_PRESET.base_channels)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--out", default="runs/toy.lpar")
    args = p.parse_args()

    config = DenoiserConfig(**{**TOY_PRESET.__dict__, "base_channels": args.base_channels, "seed": args.seed})
    t0 = time.perf_counter()
    params, trace = train_toy(config, steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                              optimizer=args.optimizer, log_every=100)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(out, config, params)
    smooth = moving_average(trace)
    out.with_suffix(".trace.json").write_text(json.dumps({"loss": trace}))
    print(f"saved {out}  ({time.perf_counter() - t0:.0f}s)")
    if len(smooth):
        print(f"smoothed loss: first {smooth[0]:.4f}  last {smooth[-1]:.4f}")


if __name__ == "__main__":
    main()
