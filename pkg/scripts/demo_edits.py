"""Run every task on one procedural scene and write plans, inputs and results.

    python3 scripts/demo_edits.py --params runs/toy.lpar --out runs/demo
"""

import argparse
import json
from pathlib import Path

import numpy as np

from layerlat.cli import load_model
from layerlat.fileio import save_pgm, save_ppm
from layerlat.pipeline import parse_plan, run, write_outputs
from layerlat.train import ShapesConfig, make_scene


def plans():
    inst = [{"index": 0, "mask": "object0.pgm"}]
    return {
        "removal": {"task": "removal", "reference_image": "background.ppm", "layers": inst},
        "movement": {"task": "movement", "layers": inst + [
            {"index": 1, "mask": "object0.pgm", "moves": [{"direction": "right", "scale": 0.25}]}]},
        "duplicate": {"task": "movement", "layers": [{"index": 0}, {"index": 1, "mask": "object0.pgm", "moves": [
            {"dx_px": 0, "dy_px": 0}, {"dx_px": -16, "dy_px": 12}]}]},
        "resize_flip": {"task": "resize_flip", "layers": inst + [
            {"index": 1, "mask": "object0.pgm",
             "adjust": {"resize": {"h_ratio": 1.4, "w_ratio": 1.4}, "flip": {"axis": "horizontal"}}}]},
        "pan": {"task": "pan", "layers": [{"index": 0, "adjust": {"pan": {"direction": "right", "scale": 0.2}}}]},
        "zoom": {"task": "zoom", "layers": [{"index": 0, "adjust": {"zoom": {"scale": 1.25}}}]},
        "occlusion_aware": {"task": "occlusion_aware", "layers": [
            {"index": 0, "mask": ["object0.pgm", "object1.pgm"]},
            {"index": 1, "mask": "object0.pgm", "moves": [{"dx_px": 12, "dy_px": 0}], "occlude_mask": "object1.pgm"},
            {"index": 2, "mask": "object1.pgm"}]},
        "cross_composition": {"task": "cross_composition", "background_image": "other.ppm", "layers": [
            {"index": 0}, {"index": 1, "mask": "object0.pgm"}]},
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--params")
    p.add_argument("--seed", type=int, default=4)
    p.add_argument("--out", default="runs/demo")
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    scene = make_scene(rng, ShapesConfig(min_objects=2, max_objects=2))
    save_ppm(out / "source.ppm", scene.image)
    save_ppm(out / "background.ppm", scene.background)
    save_ppm(out / "other.ppm", make_scene(rng).background)
    for i, m in enumerate(scene.masks):
        save_pgm(out / f"object{i}.pgm", m)
    model = load_model(args.params, args.seed)
    for name, doc in plans().items():
        doc = {"source_image": "source.ppm", **doc}
        (out / f"{name}.plan.json").write_text(json.dumps(doc, indent=2))
        result = run(parse_plan(doc, base_dir=out), model)
        write_outputs(result, out / name)
        secs = sum(result.report["timings"].values())
        print(f"{name:18s} -> {out / name / 'result.ppm'}  ({secs:.1f}s)")


if __name__ == "__main__":
    main()
