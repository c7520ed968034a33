"""Removal on held-out procedural scenes, scored against the known clean background.

Prints the masked-region L2 for the unedited source and for each attention
mask placement (key / query / value / none).

    python3 scripts/eval_removal.py runs/toy.lpar --scenes 20
"""

import argparse

import numpy as np

from layerlat import codec
from layerlat.ddim import make_schedule
from layerlat.denoiser import ToyDenoiser, load_params
from layerlat.editing import Editor, union
from layerlat.tensor import nearest_resize
from layerlat.train import make_scene


def region_l2(img, ref, region):
    d2 = ((img.astype(np.float64) / 255 - ref.astype(np.float64) / 255) ** 2).mean(axis=2)
    return float(d2[region].mean())


def main():
    p = argparse.ArgumentParser()
    p.add_argument("params")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--modes", default="key,query,value,none")
    p.add_argument("--K", type=int, default=40)
    args = p.parse_args()

    config, params = load_params(args.params)
    model = ToyDenoiser(config, params)
    modes = args.modes.split(",")
    editors = {m: Editor(model, make_schedule(50), K=args.K, mode=m, step_range=(50, 50 - args.K)) for m in modes}
    rng = np.random.default_rng(args.seed)
    scores = {"source": [], **{m: [] for m in modes}}
    for i in range(args.scenes):
        scene = make_scene(rng)
        m_lat = codec.mask_to_latent(union(scene.masks))
        region = nearest_resize(m_lat, 64, 64) > 0
        traj = editors[modes[0]].invert(codec.encode(scene.image))
        scores["source"].append(region_l2(scene.image, scene.background, region))
        for mode, ed in editors.items():
            scores[mode].append(region_l2(codec.decode(ed.remove(traj, m_lat)), scene.background, region))
        print(f"scene {i:2d}  " + "  ".join(f"{k} {v[-1]:.4f}" for k, v in scores.items()), flush=True)
    base = np.mean(scores["source"])
    print(f"\n{'variant':8s} {'L2':>8s} {'reduction':>10s}")
    for k, v in scores.items():
        print(f"{k:8s} {np.mean(v):8.4f} {1 - np.mean(v) / base:10.1%}")


if __name__ == "__main__":
    main()
