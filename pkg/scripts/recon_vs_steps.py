"""Invert-then-sample reconstruction error as a function of the step count T.

    python3 scripts/recon_vs_steps.py runs/toy.lpar
"""

import argparse

import numpy as np

from layerlat import codec
from layerlat.ddim import invert, make_schedule, sample
from layerlat.denoiser import ToyDenoiser, load_params
from layerlat.train import make_scene


def main():
    p = argparse.ArgumentParser()
    p.add_argument("params")
    p.add_argument("--steps", default="5,10,20,30,40,50,100")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--seed", type=int, default=6060)
    args = p.parse_args()

    config, params = load_params(args.params)
    model = ToyDenoiser(config, params)
    rng = np.random.default_rng(args.seed)
    latents = [codec.encode(make_scene(rng).image) for _ in range(args.scenes)]
    for T in (int(s) for s in args.steps.split(",")):
        sched = make_schedule(T)
        errs = [float(np.mean((sample({"x": invert(z, model, sched)[T]}, model, sched, target="x") - z) ** 2))
                for z in latents]
        print(f"T={T:4d}  latent mse {np.mean(errs):.5f}")


if __name__ == "__main__":
    main()
