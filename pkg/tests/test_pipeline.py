import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerlat import codec
from layerlat.ddim import invert, make_schedule, sample
from layerlat.editing import MoveVector
from layerlat.errors import DimensionError, FormatError, ValidationError
from layerlat.fileio import load_ppm, save_pgm, save_ppm
from layerlat.pipeline import (TABLE, bind_task, json_safe, metrics, parse_plan, plan_from_template,
                               resolve_move, run, serialize_plan, write_outputs)


def removal_doc(**extra):
    return {"task": "removal", "source_image": "src.ppm", "layers": [{"index": 0, "mask": "m0.pgm"}], **extra}


def test_minimal_removal_defaults(scene_dir):
    plan = parse_plan(removal_doc(), base_dir=scene_dir)
    h = plan.hyper
    assert (h.T, h.K, h.step_range, h.mask_mode, h.seed) == (50, 40, (50, 10), "key", 0)
    assert plan.canvas_init == "original"


@pytest.mark.parametrize("doc, field", [
    (removal_doc(layers=[{"index": 0, "mask": "m0.pgm"}, {"index": 0, "mask": "m1.pgm"}]), "layers"),
    (removal_doc(layers=[{"index": 0, "mask": "m0.pgm"}, {"index": 2, "mask": "m1.pgm"}]), "layers"),
    (removal_doc(hyper={"T": 50, "K": 60}), "hyper.K"),
    (removal_doc(hyper={"step_range": [60, 10]}), "hyper.step_range"),
    (removal_doc(hyper={"mask_mode": "diagonal"}), "hyper.mask_mode"),
    (removal_doc(task="teleport"), "task"),
    (removal_doc(canvas_init="grey"), "canvas_init"),
    ({"task": "pan", "source_image": "src.ppm", "layers": [{"index": 0}]}, "layers[0].adjust"),
    ({"task": "pan", "source_image": "src.ppm",
      "layers": [{"index": 0, "adjust": {"pan": {"direction": "sideways", "scale": 0.2}}}]}, "pan.direction"),
    ({"task": "cross_composition", "source_image": "src.ppm", "layers": [{"index": 0}]}, "background_image"),
    ({"task": "movement", "source_image": "src.ppm",
      "layers": [{"index": 0}, {"index": 1, "mask": "m0.pgm", "moves": [{"dx": 3}]}]}, "moves[0]"),
])
def test_validation_errors_name_field(scene_dir, doc, field):
    with pytest.raises(ValidationError, match=field.replace("[", r"\[").replace("]", r"\]")):
        parse_plan(doc, base_dir=scene_dir)


def test_dangling_file_is_io_error(scene_dir):
    with pytest.raises(FormatError):
        parse_plan(removal_doc(layers=[{"index": 0, "mask": "nope.pgm"}]), base_dir=scene_dir)


def test_parse_from_path_resolves_relative(scene_dir):
    path = scene_dir / "plan.json"
    path.write_text(json.dumps(removal_doc()))
    plan = parse_plan(path)
    assert plan.resolve(plan.source_image) == scene_dir / "src.ppm"


moves = st.one_of(
    st.fixed_dictionaries({"dx_px": st.integers(-20, 20), "dy_px": st.integers(-20, 20)}),
    st.fixed_dictionaries({"direction": st.sampled_from(codec.DIRECTIONS),
                           "scale": st.sampled_from([0.0, 0.1, 0.25, 0.5])}))


@given(st.integers(1, 60), st.data())
def test_parse_serialize_identity(T, data):
    K = data.draw(st.integers(0, T))
    hi = data.draw(st.integers(0, T))
    lo = data.draw(st.integers(0, hi))
    doc = {
        "task": "movement", "source_image": "s.ppm",
        "hyper": {"T": T, "K": K, "step_range": [hi, lo], "block_range": [data.draw(st.integers(0, 3)), None],
                  "mask_mode": data.draw(st.sampled_from(["key", "query", "value", "none"])),
                  "seed": data.draw(st.integers(0, 2**40))},
        "canvas_init": data.draw(st.sampled_from(["original", "black", "white"])),
        "layers": [{"index": 0, "mask": ["a.pgm", "b.pgm"]},
                   {"index": 1, "mask": "a.pgm", "moves": data.draw(st.lists(moves, min_size=1, max_size=3)),
                    "adjust": {"flip": {"axis": "vertical"}}}],
    }
    plan = parse_plan(doc, check_files=False)
    again = parse_plan(serialize_plan(plan), check_files=False)
    assert serialize_plan(again) == serialize_plan(plan)
    assert again == plan


@pytest.mark.parametrize("move, expect", [
    ({"direction": "right", "scale": 0.25}, MoveVector(4, 0)),
    ({"direction": "up", "scale": 0.2}, MoveVector(0, -3)),
    ({"dx_px": 6, "dy_px": -6}, MoveVector(2, -2)),
    ({"dx_px": 10, "dy_px": -1}, MoveVector(3, 0)),
])
def test_resolve_move(move, expect):
    assert resolve_move(move, 16, 16, 4) == expect


def test_bind_task_rows():
    assert bind_task("removal").fusion == "none" and bind_task("removal").target == "Z_L0"
    assert bind_task("occlusion_aware").fusion == "T-K~0"
    assert bind_task("cross_composition").source == "Z_BG"
    assert set(TABLE) == {"removal", "movement", "resize_flip", "pan", "zoom", "occlusion_aware",
                          "cross_composition"}
    with pytest.raises(ValidationError):
        bind_task("teleport")


def loop_metrics(a, b, mask):
    s1 = s2 = n = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if mask[i, j]:
                for c in range(3):
                    d = a[i, j, c] / 255.0 - b[i, j, c] / 255.0
                    s1 += abs(d)
                    s2 += d * d
                    n += 1
    return s1 / n, s2 / n


def test_metrics_extremes_and_oracle():
    black, white = np.zeros((4, 4, 3), np.uint8), np.full((4, 4, 3), 255, np.uint8)
    assert metrics(black, white) == {"l1": 1.0, "l2": 1.0, "psnr": 0.0}
    assert metrics(white, white)["psnr"] == math.inf
    assert json_safe(metrics(white, white))["psnr"] == "inf"
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    mask = rng.random((8, 8)) < 0.5
    got = metrics(a, b, mask)
    l1, l2 = loop_metrics(a, b, mask)
    assert abs(got["l1"] - l1) < 1e-7 and abs(got["l2"] - l2) < 1e-7
    with pytest.raises(DimensionError):
        metrics(a, b[:4])


def test_template_swap_and_removal(scene_dir):
    plan = plan_from_template({"task": "swap", "source_image": "src.ppm", "objects": ["m0.pgm", "m1.pgm"]},
                              base_dir=scene_dir)
    assert plan.task == "movement" and plan.layer(0).mask == ["m0.pgm", "m1.pgm"]
    a, b = plan.layer(1).moves[0], plan.layer(2).moves[0]
    assert a == {"dx_px": -b["dx_px"], "dy_px": -b["dy_px"]}
    plan = plan_from_template({"task": "removal", "source_image": "src.ppm", "objects": ["m0.pgm"]},
                              base_dir=scene_dir)
    assert [s.index for s in plan.layers] == [0]
    plan = plan_from_template({"task": "resize", "source_image": "src.ppm", "objects": ["m0.pgm"],
                               "params": {"h_ratio": 1, "w_ratio": 1}}, base_dir=scene_dir)
    assert plan.meta["identity_adjustment"] and plan.layer(1).adjust == {}
    with pytest.raises(ValidationError):
        plan_from_template({"task": "teleport"})


def short(doc):
    """Shrink the schedule so the tiny model runs fast."""
    return {**doc, "hyper": {"T": 6, "K": 4, "step_range": [6, 2], **doc.get("hyper", {})}}


def test_run_is_deterministic_and_reports(scene_dir, tiny_model):
    doc = short(removal_doc(reference_image="bg.ppm"))
    a = run(parse_plan(doc, base_dir=scene_dir), tiny_model)
    b = run(parse_plan(doc, base_dir=scene_dir), tiny_model)
    np.testing.assert_array_equal(a.image, b.image)
    rep = a.report
    assert rep["hyper"]["T"] == 6 and rep["binding"]["target"] == "Z_L0"
    assert rep["masks"]["remove_cells"] > 0 and set(rep["timings"]) >= {"inversion", "editing"}
    assert {"full", "edited_region", "source_edited_region"} <= set(rep["metrics"])


def test_noop_plan_is_anchored_round_trip(scene_dir, tiny_model):
    save_pgm(scene_dir / "empty.pgm", np.zeros((64, 64)))
    plan = parse_plan(short(removal_doc(layers=[{"index": 0, "mask": "empty.pgm"}])), base_dir=scene_dir)
    out = run(plan, tiny_model).image
    sch = make_schedule(6)
    traj = invert(codec.encode(load_ppm(scene_dir / "src.ppm")), tiny_model, sch)
    expect = codec.decode(sample({"x": traj[2]}, tiny_model, sch, t_start=2, target="x"))
    np.testing.assert_array_equal(out, expect)


def test_explicit_default_ablation_is_inert(scene_dir, tiny_model):
    base = short({"task": "resize_flip", "source_image": "src.ppm",
                  "layers": [{"index": 0, "mask": "m0.pgm"},
                             {"index": 1, "mask": "m0.pgm", "adjust": {"resize": {"h_ratio": 1.2, "w_ratio": 1.2}}}]})
    a = run(parse_plan(base, base_dir=scene_dir), tiny_model).image
    b = run(parse_plan({**base, "ablation": {"resize_level": "image"}}, base_dir=scene_dir), tiny_model).image
    c = run(parse_plan({**base, "ablation": {"resize_level": "latent"}}, base_dir=scene_dir), tiny_model).image
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("task, layers, cells", [
    ("pan", [{"index": 0, "adjust": {"pan": {"direction": "right", "scale": 0.2}}}], 3 * 16),
    ("zoom", [{"index": 0, "adjust": {"zoom": {"scale": 1.25}}}], 256 - 13 * 13),
])
def test_pan_zoom_runs(scene_dir, tiny_model, task, layers, cells):
    result = run(parse_plan(short({"task": task, "source_image": "src.ppm", "layers": layers}),
                            base_dir=scene_dir), tiny_model)
    assert result.image.shape == (64, 64, 3)
    assert result.report["masks"]["remove_cells"] == cells


def test_all_tasks_run_and_dump(scene_dir, tiny_model, tmp_path):
    occ = np.zeros((64, 64), np.float32)
    occ[20:40, 20:40] = 1
    save_pgm(scene_dir / "occ.pgm", occ)
    docs = [
        {"task": "movement", "source_image": "src.ppm",
         "layers": [{"index": 0, "mask": "m0.pgm"},
                    {"index": 1, "mask": "m0.pgm", "moves": [{"dx_px": 8, "dy_px": 0}, {"dx_px": -8, "dy_px": 4}]}]},
        {"task": "occlusion_aware", "source_image": "src.ppm",
         "layers": [{"index": 0, "mask": "m0.pgm"},
                    {"index": 1, "mask": "m0.pgm", "moves": [{"dx_px": 4, "dy_px": 0}], "occlude_mask": "occ.pgm"}]},
        {"task": "cross_composition", "source_image": "src.ppm", "background_image": "bg.ppm",
         "layers": [{"index": 0}, {"index": 1, "mask": "m1.pgm", "moves": [{"direction": "down", "scale": 0.1}]}]},
    ]
    for i, doc in enumerate(docs):
        result = run(parse_plan(short(doc), base_dir=scene_dir), tiny_model, record_trajectory=True,
                     record_heatmaps=True)
        out = tmp_path / f"run{i}"
        write_outputs(result, out, dump_stages=True, dump_heatmaps=True, dump_trajectory=True)
        assert (out / "result.ppm").is_file() and (out / "stage_canvas.llat").is_file()
        assert len(list((out / "trajectory" / "source").glob("*.llat"))) == 7
        assert list((out / "heatmaps").glob("heatmap_b*_t*.pgm"))
        assert "timings" not in json.loads((out / "report.json").read_text())


def test_image_model_size_mismatch(tmp_path, tiny_model):
    save_ppm(tmp_path / "big.ppm", np.zeros((32, 32, 3), np.uint8))
    save_pgm(tmp_path / "m.pgm", np.ones((32, 32)))
    plan = parse_plan({"task": "removal", "source_image": "big.ppm", "layers": [{"index": 0, "mask": "m.pgm"}]},
                      base_dir=tmp_path)
    with pytest.raises(DimensionError):
        run(plan, tiny_model)
