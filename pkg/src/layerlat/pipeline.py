"""Edit plans, the per-task latent bindings, and the end-to-end runner."""

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .attention import HeatmapRecorder, masked_processor
from .ddim import invert, make_schedule
from .editing import Editor, LayerState, MoveVector, union
from .errors import DimensionError, FormatError, ValidationError
from .fileio import load_pgm, load_ppm, save_heatmap, save_latent

TASKS = ("removal", "movement", "resize_flip", "pan", "zoom", "occlusion_aware", "cross_composition")
CANVAS_INITS = ("original", "black", "white")
RESIZE_LEVELS = ("image", "latent")


# --- plan schema ------------------------------------------------------------

@dataclass
class Hyper:
    T: int = 50
    K: int = 40
    step_range: tuple = (50, 10)
    block_range: tuple = (0, None)
    mask_mode: str = "key"
    seed: int = 0


@dataclass
class LayerSpec:
    index: int
    mask: object = None          # path, or list of paths to union
    adjust: dict = field(default_factory=dict)
    moves: list = field(default_factory=list)
    occlude_mask: str = None
    image: str = None


@dataclass
class EditPlan:
    task: str
    layers: list
    source_image: str
    hyper: Hyper = field(default_factory=Hyper)
    canvas_init: str = "original"
    background_image: str = None
    refine_mask: str = None
    reference_image: str = None
    ablation: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    base_dir: str = "."

    def resolve(self, ref):
        p = Path(ref)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def layer(self, index):
        for spec in self.layers:
            if spec.index == index:
                return spec
        return None

    @property
    def instance_layers(self):
        return sorted((s for s in self.layers if s.index > 0), key=lambda s: s.index)


def _need(cond, field_name, message):
    if not cond:
        raise ValidationError(f"{field_name}: {message}")


def _as_int(value, name):
    _need(isinstance(value, int) and not isinstance(value, bool), name, f"expected an integer, got {value!r}")
    return value


def _as_number(value, name):
    _need(isinstance(value, (int, float)) and not isinstance(value, bool), name,
          f"expected a number, got {value!r}")
    return float(value)


def _parse_hyper(doc):
    doc = doc or {}
    _need(isinstance(doc, dict), "hyper", "must be an object")
    unknown = set(doc) - {"T", "K", "step_range", "block_range", "mask_mode", "seed"}
    _need(not unknown, "hyper", f"unknown keys {sorted(unknown)}")
    T = _as_int(doc.get("T", 50), "hyper.T")
    K = _as_int(doc.get("K", 40), "hyper.K")
    _need(T >= 1, "hyper.T", "must be >= 1")
    _need(0 <= K <= T, "hyper.K", f"must satisfy 0 <= K <= T, got K={K}, T={T}")
    step_range = doc.get("step_range", [T, T - K] if "K" in doc or "T" in doc else [50, 10])
    _need(isinstance(step_range, (list, tuple)) and len(step_range) == 2, "hyper.step_range", "expected [t_hi, t_lo]")
    hi, lo = (_as_int(v, "hyper.step_range") for v in step_range)
    _need(T >= hi >= lo >= 0, "hyper.step_range", f"must lie within [T, 0], got {[hi, lo]}")
    block_range = doc.get("block_range", [0, None])
    _need(isinstance(block_range, (list, tuple)) and len(block_range) == 2, "hyper.block_range",
          "expected [first, last]")
    first = _as_int(block_range[0], "hyper.block_range")
    last = None if block_range[1] is None else _as_int(block_range[1], "hyper.block_range")
    mode = doc.get("mask_mode", "key")
    _need(mode in ("key", "query", "value", "none"), "hyper.mask_mode", f"unknown mode {mode!r}")
    seed = _as_int(doc.get("seed", 0), "hyper.seed")
    return Hyper(T=T, K=K, step_range=(hi, lo), block_range=(first, last), mask_mode=mode, seed=seed)


def _parse_move(doc, name):
    _need(isinstance(doc, dict), name, "move must be an object")
    if "dx_px" in doc or "dy_px" in doc:
        _need(set(doc) <= {"dx_px", "dy_px"}, name, f"unexpected keys {sorted(doc)}")
        return {"dx_px": _as_int(doc.get("dx_px", 0), name + ".dx_px"),
                "dy_px": _as_int(doc.get("dy_px", 0), name + ".dy_px")}
    _need(set(doc) == {"direction", "scale"}, name, "expected {dx_px, dy_px} or {direction, scale}")
    _need(doc["direction"] in codec.DIRECTIONS, name + ".direction", f"unknown direction {doc['direction']!r}")
    scale = _as_number(doc["scale"], name + ".scale")
    _need(0 <= scale < 1, name + ".scale", "must lie in [0, 1)")
    return {"direction": doc["direction"], "scale": scale}


def _parse_adjust(doc, name):
    doc = doc or {}
    _need(isinstance(doc, dict), name, "must be an object")
    unknown = set(doc) - {"resize", "flip", "pan", "zoom"}
    _need(not unknown, name, f"unknown adjustments {sorted(unknown)}")
    out = {}
    if "resize" in doc:
        r = doc["resize"]
        _need(isinstance(r, dict) and set(r) == {"h_ratio", "w_ratio"}, name + ".resize", "expected {h_ratio, w_ratio}")
        h, w = _as_number(r["h_ratio"], name + ".resize.h_ratio"), _as_number(r["w_ratio"], name + ".resize.w_ratio")
        _need(h > 0 and w > 0, name + ".resize", "ratios must be positive")
        out["resize"] = {"h_ratio": h, "w_ratio": w}
    if "flip" in doc:
        f = doc["flip"]
        _need(isinstance(f, dict) and f.get("axis") in ("horizontal", "vertical"), name + ".flip",
              "expected {axis: horizontal|vertical}")
        out["flip"] = {"axis": f["axis"]}
    if "pan" in doc:
        p = doc["pan"]
        _need(isinstance(p, dict) and set(p) == {"direction", "scale"}, name + ".pan", "expected {direction, scale}")
        _need(p["direction"] in codec.DIRECTIONS, name + ".pan.direction", f"unknown direction {p['direction']!r}")
        s = _as_number(p["scale"], name + ".pan.scale")
        _need(0 < s < 1, name + ".pan.scale", "must lie in (0, 1)")
        out["pan"] = {"direction": p["direction"], "scale": s}
    if "zoom" in doc:
        z = doc["zoom"]
        _need(isinstance(z, dict) and set(z) == {"scale"}, name + ".zoom", "expected {scale}")
        s = _as_number(z["scale"], name + ".zoom.scale")
        _need(s >= 1, name + ".zoom.scale", "zoom-out scale must be >= 1")
        out["zoom"] = {"scale": s}
    return out


def _parse_layer(doc, i):
    name = f"layers[{i}]"
    _need(isinstance(doc, dict), name, "must be an object")
    unknown = set(doc) - {"index", "mask", "adjust", "moves", "occlude_mask", "image"}
    _need(not unknown, name, f"unknown keys {sorted(unknown)}")
    _need("index" in doc, name + ".index", "missing")
    mask = doc.get("mask")
    if isinstance(mask, list):
        _need(all(isinstance(m, str) for m in mask), name + ".mask", "expected paths")
    else:
        _need(mask is None or isinstance(mask, str), name + ".mask", "expected a path or list of paths")
    moves = doc.get("moves", [])
    _need(isinstance(moves, list), name + ".moves", "must be a list")
    return LayerSpec(
        index=_as_int(doc["index"], name + ".index"),
        mask=mask,
        adjust=_parse_adjust(doc.get("adjust"), name + ".adjust"),
        moves=[_parse_move(m, f"{name}.moves[{j}]") for j, m in enumerate(moves)],
        occlude_mask=doc.get("occlude_mask"),
        image=doc.get("image"),
    )


def _mask_refs(spec):
    if spec.mask is None:
        return []
    return spec.mask if isinstance(spec.mask, list) else [spec.mask]


def _validate_task(plan):
    task = plan.task
    layer0 = plan.layer(0)
    inst = plan.instance_layers
    if task == "removal":
        _need((layer0 and layer0.mask) or any(s.mask for s in inst), "layers", "removal needs at least one mask")
    elif task in ("movement", "resize_flip", "occlusion_aware"):
        _need(inst, "layers", f"{task} needs at least one instance layer")
        for s in inst:
            _need(s.mask, f"layers[{s.index}].mask", "instance layers need a mask")
    if task == "movement":
        _need(any(s.moves for s in inst), "layers", "movement needs at least one move")
    if task == "resize_flip":
        _need(any(("resize" in s.adjust or "flip" in s.adjust) for s in inst) or plan.meta.get("identity_adjustment"),
              "layers", "resize_flip needs a resize or flip adjustment")
    if task in ("pan", "zoom"):
        key = task
        _need(layer0 is not None and key in layer0.adjust, "layers[0].adjust", f"{task} requires adjust.{key}")
    if task == "occlusion_aware":
        _need(any(s.occlude_mask for s in inst), "layers", "occlusion_aware needs an occlude_mask")
    if task == "cross_composition":
        _need(plan.background_image, "background_image", "cross_composition requires a background image")
    for s in plan.layers:
        if s.index == 0:
            _need(not s.moves, "layers[0].moves", "the background layer does not move")
        else:
            _need(not ({"pan", "zoom"} & set(s.adjust)), f"layers[{s.index}].adjust",
                  "pan/zoom apply to the background layer only")


def parse_plan(document, base_dir=None, check_files=True):
    """Validate a plan document (dict, JSON text, or path) and fill defaults."""
    if isinstance(document, (str, Path)) and not str(document).lstrip().startswith("{"):
        path = Path(document)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FormatError(f"cannot read plan {path}: {exc}") from exc
        base_dir = base_dir or str(path.parent)
        document = text
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"plan: invalid JSON ({exc})") from exc
    _need(isinstance(document, dict), "plan", "must be a JSON object")
    allowed = {"task", "hyper", "canvas_init", "source_image", "background_image", "layers",
               "refine_mask", "reference_image", "ablation", "meta"}
    unknown = set(document) - allowed
    _need(not unknown, "plan", f"unknown keys {sorted(unknown)}")
    task = document.get("task")
    _need(task in TASKS, "task", f"unknown task {task!r}")
    _need(isinstance(document.get("source_image"), str), "source_image", "required path")
    layers_doc = document.get("layers", [])
    _need(isinstance(layers_doc, list), "layers", "must be a list")
    layers = [_parse_layer(d, i) for i, d in enumerate(layers_doc)]
    indices = [s.index for s in layers]
    _need(len(set(indices)) == len(indices), "layers", f"duplicate layer index in {indices}")
    if layers:
        _need(sorted(indices) == list(range(len(indices))), "layers",
              f"indices must be contiguous from 0, got {sorted(indices)}")
    else:
        layers = [LayerSpec(index=0)]
    canvas_init = document.get("canvas_init", "original")
    _need(canvas_init in CANVAS_INITS, "canvas_init", f"unknown canvas init {canvas_init!r}")
    ablation = document.get("ablation", {}) or {}
    _need(isinstance(ablation, dict) and set(ablation) <= {"resize_level"}, "ablation", "only resize_level is supported")
    _need(ablation.get("resize_level", "image") in RESIZE_LEVELS, "ablation.resize_level", "expected image|latent")
    plan = EditPlan(
        task=task,
        layers=sorted(layers, key=lambda s: s.index),
        source_image=document["source_image"],
        hyper=_parse_hyper(document.get("hyper")),
        canvas_init=canvas_init,
        background_image=document.get("background_image"),
        refine_mask=document.get("refine_mask"),
        reference_image=document.get("reference_image"),
        ablation=dict(ablation),
        meta=dict(document.get("meta", {}) or {}),
        base_dir=str(base_dir or "."),
    )
    _validate_task(plan)
    if check_files:
        for ref in _file_refs(plan):
            if not plan.resolve(ref).is_file():
                raise FormatError(f"plan references a missing file: {ref}")
    return plan


def _file_refs(plan):
    refs = [plan.source_image, plan.background_image, plan.refine_mask, plan.reference_image]
    for s in plan.layers:
        refs += _mask_refs(s) + [s.occlude_mask, s.image]
    return [r for r in refs if r]


def serialize_plan(plan):
    """Inverse of :func:`parse_plan` (``base_dir`` is not part of the document)."""
    doc = {
        "task": plan.task,
        "hyper": {
            "T": plan.hyper.T, "K": plan.hyper.K,
            "step_range": list(plan.hyper.step_range),
            "block_range": list(plan.hyper.block_range),
            "mask_mode": plan.hyper.mask_mode, "seed": plan.hyper.seed,
        },
        "canvas_init": plan.canvas_init,
        "source_image": plan.source_image,
        "layers": [],
    }
    for s in plan.layers:
        layer = {"index": s.index, "adjust": s.adjust, "moves": s.moves}
        for key in ("mask", "occlude_mask", "image"):
            if getattr(s, key) is not None:
                layer[key] = getattr(s, key)
        doc["layers"].append(layer)
    for key in ("background_image", "refine_mask", "reference_image"):
        if getattr(plan, key) is not None:
            doc[key] = getattr(plan, key)
    if plan.ablation:
        doc["ablation"] = plan.ablation
    if plan.meta:
        doc["meta"] = plan.meta
    return doc


def resolve_move(move, latent_h, latent_w, factor):
    """Turn a move instruction into whole latent cells (round half away from zero)."""
    if "dx_px" in move:
        v = MoveVector(codec.round_half_up(move["dx_px"] / factor), codec.round_half_up(move["dy_px"] / factor))
    else:
        d, s = move["direction"], move["scale"]
        if d in ("left", "right"):
            step = codec.round_half_up(s * latent_w)
            v = MoveVector(step if d == "right" else -step, 0)
        else:
            step = codec.round_half_up(s * latent_h)
            v = MoveVector(0, step if d == "down" else -step)
    return v.check(latent_h, latent_w)


# --- task bindings -------------------------------------------------------------

@dataclass(frozen=True)
class TaskBinding:
    adjust: str
    remove_mask: str
    source: str
    removal: str
    target: str
    fusion: str   # "none", "T-K", or "T-K~0"


TABLE = {
    "removal": TaskBinding("none", "sum M_obj", "Z_S", "Z_L0", "Z_L0", "none"),
    "movement": TaskBinding("none", "sum M_obj", "Z_S", "Z_L0", "Z_C", "T-K"),
    "resize_flip": TaskBinding("resize, flip", "sum M_obj", "Z_S", "Z_L0", "Z_C", "T-K"),
    "pan": TaskBinding("pan and paste", "M_pan", "Z_S", "Z_L0", "Z_L0", "none"),
    "zoom": TaskBinding("zoom and paste", "M_zoom", "Z_S", "Z_L0", "Z_L0", "none"),
    "occlusion_aware": TaskBinding("none", "sum_j Move(M_occlude; v_j)", "Z_C", "Z_hat_C", "Z_hat_C", "T-K~0"),
    "cross_composition": TaskBinding("layout-guided", "M_BG", "Z_BG", "Z_L0", "Z_C", "T-K"),
}


def bind_task(plan):
    task = plan.task if isinstance(plan, EditPlan) else plan
    if task not in TABLE:
        raise ValidationError(f"task: unknown task {task!r}")
    return TABLE[task]


# --- metrics -----------------------------------------------------------------

def metrics(a, b, mask=None):
    """Mean absolute and squared difference on [0, 1] pixels, plus PSNR.

    PSNR is ``inf`` when the images are identical over the region.
    """
    a = np.asarray(a, dtype=np.float64) / 255.0
    b = np.asarray(b, dtype=np.float64) / 255.0
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    if mask is None:
        l1, l2 = np.abs(diff).mean(), (diff ** 2).mean()
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != a.shape[:2]:
            raise DimensionError(f"mask {mask.shape} does not match image {a.shape[:2]}")
        w = np.broadcast_to(mask[..., None], a.shape)
        total = w.sum()
        if total == 0:
            raise DimensionError("metric region mask is empty")
        l1 = (np.abs(diff) * w).sum() / total
        l2 = (diff ** 2 * w).sum() / total
    psnr = math.inf if l2 == 0 else 10.0 * math.log10(1.0 / l2)
    return {"l1": float(l1), "l2": float(l2), "psnr": psnr}


def json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


# --- planner ---------------------------------------------------------------------

class ExternalPlanner:
    """Placeholder for a vision-language planner; no network client is configured."""

    def plan(self, request):
        raise NotImplementedError("no external planner is configured; use plan_from_template")


def _centroid(mask):
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    if ys.size == 0:
        raise ValidationError("objects: empty object mask")
    return ys.mean(), xs.mean()


def plan_from_template(request, base_dir=None):
    """Expand a short request into a layer-wise plan.

    ``request`` holds ``task``, ``source_image``, ``objects`` (mask paths) and
    task ``params``. Tasks beyond the seven plan tasks: ``swap`` (two objects
    trade places) and ``repeat`` (one object pasted at several offsets).
    """
    task = request.get("task")
    objects = list(request.get("objects", []))
    params = dict(request.get("params", {}))
    base = {"source_image": request.get("source_image"), "canvas_init": params.pop("canvas_init", "original")}
    if "hyper" in request:
        base["hyper"] = request["hyper"]
    meta = {}
    if task == "removal":
        layers = [{"index": 0, "mask": objects}]
    elif task == "swap":
        _need(len(objects) == 2, "objects", "swap needs exactly two objects")
        root = Path(base_dir or ".")
        (y1, x1), (y2, x2) = (_centroid(load_pgm(root / o)) for o in objects)
        dx, dy = int(round(x2 - x1)), int(round(y2 - y1))
        layers = [{"index": 0, "mask": objects},
                  {"index": 1, "mask": objects[0], "moves": [{"dx_px": dx, "dy_px": dy}]},
                  {"index": 2, "mask": objects[1], "moves": [{"dx_px": -dx, "dy_px": -dy}]}]
        task = "movement"
    elif task in ("movement", "repeat"):
        moves = params.get("moves", [])
        _need(len(moves) == len(objects), "params.moves", "one move list per object")
        layers = [{"index": 0, "mask": objects}]
        layers += [{"index": i + 1, "mask": o, "moves": m} for i, (o, m) in enumerate(zip(objects, moves))]
        task = "movement"
    elif task in ("resize", "flip", "resize_flip"):
        adjust = {}
        if "h_ratio" in params or "w_ratio" in params:
            h, w = params.get("h_ratio", 1.0), params.get("w_ratio", 1.0)
            if h == 1 and w == 1:
                meta["identity_adjustment"] = True
            else:
                adjust["resize"] = {"h_ratio": h, "w_ratio": w}
        if "axis" in params:
            adjust["flip"] = {"axis": params["axis"]}
        layers = [{"index": 0, "mask": objects}]
        layers += [{"index": i + 1, "mask": o, "adjust": adjust} for i, o in enumerate(objects)]
        task = "resize_flip"
    elif task == "pan":
        layers = [{"index": 0, "adjust": {"pan": {"direction": params["direction"], "scale": params["scale"]}}}]
    elif task == "zoom":
        layers = [{"index": 0, "adjust": {"zoom": {"scale": params["scale"]}}}]
    elif task == "occlusion_aware":
        occluders = params.get("occluders", [])
        moves = params.get("moves", [])
        layers = [{"index": 0, "mask": objects}]
        for i, o in enumerate(objects):
            layer = {"index": i + 1, "mask": o, "moves": moves[i] if i < len(moves) else []}
            if i < len(occluders) and occluders[i]:
                layer["occlude_mask"] = occluders[i]
            layers.append(layer)
    elif task == "cross_composition":
        base["background_image"] = params["background_image"]
        layers = [{"index": 0}] + [
            {"index": i + 1, "mask": o, "moves": params.get("moves", [[]] * len(objects))[i]}
            for i, o in enumerate(objects)]
        if "background_mask" in params:
            layers[0]["mask"] = params["background_mask"]
    else:
        raise ValidationError(f"task: no template for {task!r}")
    doc = dict(base, task=task, layers=layers)
    if meta:
        doc["meta"] = meta
    return parse_plan(doc, base_dir=base_dir, check_files=base_dir is not None)


# --- execution -------------------------------------------------------------------

@dataclass
class RunResult:
    image: np.ndarray
    latent: np.ndarray
    report: dict
    stages: dict = field(default_factory=dict)
    heatmaps: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict)


def _load_mask(plan, refs, shape):
    masks = [load_pgm(plan.resolve(r)) for r in refs]
    for m in masks:
        if m.shape != shape:
            raise DimensionError(f"mask {m.shape} does not match image {shape}")
    return union(masks, shape=shape)


def _bbox(mask):
    ys, xs = np.nonzero(mask > 0.5)
    if ys.size == 0:
        return None
    return ys.min(), ys.max(), xs.min(), xs.max()


class _Timer:
    def __init__(self):
        self.marks = {}
        self._t = time.perf_counter()

    def lap(self, name):
        now = time.perf_counter()
        self.marks[name] = self.marks.get(name, 0.0) + now - self._t
        self._t = now


def run(plan, denoiser, factor=codec.DEFAULT_FACTOR, record_trajectory=False, record_heatmaps=False):
    """Execute ``plan`` with ``denoiser``; deterministic for fixed inputs."""
    binding = bind_task(plan)
    hp = plan.hyper
    timer = _Timer()
    src_img = codec.check_image(load_ppm(plan.resolve(plan.source_image)), factor)
    H, W = src_img.shape[:2]
    lh, lw = H // factor, W // factor
    cfg = denoiser.config
    if cfg.latent_size != (lh, lw) or cfg.in_channels != 3 * factor * factor:
        raise DimensionError(f"image {H}x{W} (factor {factor}) does not fit a model for latent "
                             f"{cfg.latent_size} with {cfg.in_channels} channels")
    schedule = make_schedule(hp.T)
    recorder = HeatmapRecorder(masked_processor) if record_heatmaps else None
    stages = {}
    editor = Editor(denoiser, schedule, K=hp.K, resolutions=cfg.attention_resolutions, mode=hp.mask_mode,
                    step_range=hp.step_range, block_range=hp.block_range, processor=recorder,
                    stage_callback=lambda name, z: stages.__setitem__(name, z.copy()))
    record = {} if record_trajectory else None
    resize_level = plan.ablation.get("resize_level", "image")
    layer0 = plan.layer(0) or LayerSpec(index=0)
    refine = _load_mask(plan, [plan.refine_mask], (H, W)) if plan.refine_mask else None
    refine_lat = None if refine is None else codec.mask_to_latent(refine, factor)
    timer.lap("load")

    traj_cache = {}

    def traj_of(img, key):
        if key not in traj_cache:
            traj_cache[key] = invert(codec.encode(img, factor), denoiser, schedule)
        return traj_cache[key]

    inst_masks = {s.index: _load_mask(plan, _mask_refs(s), (H, W)) for s in plan.instance_layers}
    trajectories = {}
    if plan.task in ("pan", "zoom"):
        op = layer0.adjust[plan.task]
        # geometry is snapped to whole latent cells so the image edit and the mask agree
        if plan.task == "pan":
            m_remove = codec.build_pan_zoom_mask("pan", op["scale"], lh, lw, direction=op["direction"])
        else:
            m_remove = codec.build_pan_zoom_mask("zoom", op["scale"], lh, lw)
        if plan.task == "zoom" and resize_level == "latent":
            base = traj_of(src_img, "source")
            canvas_img = src_img if plan.canvas_init == "original" else codec._canvas_like(src_img, plan.canvas_init)
            canvas = traj_of(canvas_img, "canvas")
            source_traj = [codec.zoom_paste_latent(z, op["scale"], c) for z, c in zip(base, canvas)]
        else:
            if plan.task == "pan":
                adjusted = codec.pan_paste(src_img, op["direction"], op["scale"], canvas=plan.canvas_init, cell=factor)
            else:
                adjusted = codec.zoom_paste(src_img, op["scale"], canvas=plan.canvas_init, cell=factor)
            source_traj = traj_of(adjusted, "adjusted")
        timer.lap("inversion")
        trajectories["source"] = source_traj
        final = editor.remove(source_traj, m_remove, refine_lat, record=record)
    else:
        bg_img = src_img
        if plan.task == "cross_composition":
            bg_img = codec.check_image(load_ppm(plan.resolve(plan.background_image)), factor)
            if bg_img.shape != src_img.shape:
                raise DimensionError("background and source images differ in size")
        source_traj = traj_of(bg_img, "background" if plan.task == "cross_composition" else "source")
        trajectories["source"] = source_traj
        if layer0.mask is not None:
            m_remove_img = _load_mask(plan, _mask_refs(layer0), (H, W))
        elif plan.task == "cross_composition":
            m_remove_img = np.zeros((H, W), dtype=np.float32)
        else:
            m_remove_img = union(list(inst_masks.values()), shape=(H, W))
        m_remove = codec.mask_to_latent(m_remove_img, factor)
        layers = []
        for spec in plan.instance_layers:
            img = src_img
            key = "source" if plan.task != "cross_composition" else f"image:{plan.source_image}"
            if spec.image is not None:
                img = codec.check_image(load_ppm(plan.resolve(spec.image)), factor)
                key = f"image:{spec.image}"
            mask = inst_masks[spec.index]
            bbox = _bbox(mask)
            applied = []
            if spec.adjust and bbox is not None and resize_level == "image":
                y0, y1, x0, x1 = bbox
                center = ((y0 + y1 + 1) / 2.0, (x0 + x1 + 1) / 2.0)
                if "resize" in spec.adjust:
                    r = spec.adjust["resize"]
                    img = codec.resize_image(img, r["h_ratio"], r["w_ratio"], center=center)
                    mask = codec.resize_mask(mask, r["h_ratio"], r["w_ratio"], center=center)
                    applied.append("resize")
                if "flip" in spec.adjust:
                    span = (y0, y1) if spec.adjust["flip"]["axis"] == "vertical" else (x0, x1)
                    img = codec.flip(img, spec.adjust["flip"]["axis"], span)
                    mask = codec.flip(mask, spec.adjust["flip"]["axis"], span)
                    applied.append("flip")
                key = f"layer:{spec.index}"
            traj = traj_of(img, key)
            mask_lat = codec.mask_to_latent(mask, factor)
            if spec.adjust and bbox is not None and resize_level == "latent":
                traj, mask_lat = _latent_adjust(traj, mask_lat, spec.adjust)
                applied.append("latent:" + ",".join(sorted(spec.adjust)))
            occ = None
            if spec.occlude_mask:
                occ = codec.mask_to_latent(_load_mask(plan, [spec.occlude_mask], (H, W)), factor)
            moves = [resolve_move(m, lh, lw, factor) for m in spec.moves] or [MoveVector(0, 0)]
            layers.append(LayerState(index=spec.index, trajectory=traj, mask=mask_lat, moves=moves,
                                     occlude=occ, adjustments=applied))
            trajectories[f"layer{spec.index}"] = traj
        timer.lap("inversion")
        if plan.task == "occlusion_aware":
            final = editor.occlusion_aware(source_traj, layers, m_remove, refine_lat, record=record)
        else:
            final = editor.move_and_fuse(source_traj, layers, m_remove, refine_lat, record=record)
    timer.lap("editing")
    image = codec.decode(final, factor)
    timer.lap("decode")
    if record is not None:
        trajectories["removal"] = [record.get(t) for t in range(hp.T + 1)]

    report = {
        "task": plan.task,
        "binding": asdict(binding),
        "hyper": {"T": hp.T, "K": hp.K, "step_range": list(hp.step_range),
                  "block_range": list(hp.block_range), "mask_mode": hp.mask_mode, "seed": hp.seed},
        "canvas_init": plan.canvas_init,
        "resize_level": resize_level,
        "image_size": [H, W],
        "latent_size": [lh, lw],
        "masks": {
            "remove_cells": int(m_remove.sum()),
            "remove_fraction": float(m_remove.mean()),
            "refine_cells": 0 if refine_lat is None else int(refine_lat.sum()),
            "layers": {str(s.index): int(codec.mask_to_latent(inst_masks[s.index], factor).sum())
                       for s in plan.instance_layers},
        },
        "timings": dict(timer.marks),
    }
    if plan.reference_image:
        ref = load_ppm(plan.resolve(plan.reference_image))
        region = codec.nearest_resize(m_remove, H, W) if m_remove.any() else None
        report["metrics"] = {"full": metrics(image, ref)}
        if region is not None:
            report["metrics"]["edited_region"] = metrics(image, ref, region)
            report["metrics"]["source_edited_region"] = metrics(src_img, ref, region)
    return RunResult(image=image, latent=final, report=report, stages=stages,
                     heatmaps={} if recorder is None else dict(recorder.maps), trajectories=trajectories)


def _latent_adjust(traj, mask_lat, adjust):
    """Latent-level resize/flip used only by the resize-level ablation."""
    bbox = _bbox(mask_lat)
    y0, y1, x0, x1 = bbox
    center = ((y0 + y1 + 1) / 2.0, (x0 + x1 + 1) / 2.0)
    if "resize" in adjust:
        r = adjust["resize"]
        traj = [codec.resize_latent(z, r["h_ratio"], r["w_ratio"], center) for z in traj]
        mask_lat = codec.resize_mask(mask_lat, r["h_ratio"], r["w_ratio"], center)
    if "flip" in adjust:
        axis = adjust["flip"]["axis"]
        span = (y0, y1) if axis == "vertical" else (x0, x1)
        ax = 1 if axis == "vertical" else 2
        idx = np.clip(span[0] + span[1] - np.arange(traj[0].shape[ax]), 0, traj[0].shape[ax] - 1)
        traj = [np.take(z, idx, axis=ax) for z in traj]
        mask_lat = codec.flip(mask_lat, axis, span)
    return traj, mask_lat


def write_outputs(result, out_dir, factor=codec.DEFAULT_FACTOR, dump_stages=False, dump_heatmaps=False,
                  dump_trajectory=False):
    """Write result.ppm, report.json, timings.json and any requested dumps."""
    from .fileio import save_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ppm(out / "result.ppm", result.image)
    report = {k: v for k, v in result.report.items() if k != "timings"}
    (out / "report.json").write_text(json.dumps(json_safe(report), indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(result.report.get("timings", {}), indent=2) + "\n")
    if dump_stages:
        for name, z in result.stages.items():
            save_latent(out / f"stage_{name}.llat", z)
        save_latent(out / "stage_final.llat", result.latent)
    if dump_heatmaps:
        hdir = out / "heatmaps"
        hdir.mkdir(exist_ok=True)
        for (block, t), hm in sorted(result.heatmaps.items()):
            save_heatmap(hdir / f"heatmap_b{block}_t{t}.pgm", hm)
    if dump_trajectory:
        for role, traj in result.trajectories.items():
            tdir = out / "trajectory" / role
            tdir.mkdir(parents=True, exist_ok=True)
            for t, z in enumerate(traj):
                if z is not None:
                    save_latent(tdir / f"z_{t:03d}.llat", z)
