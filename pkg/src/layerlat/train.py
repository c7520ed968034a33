"""Procedural shape scenes and epsilon-prediction training for the toy model."""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .codec import encode
from .ddim import make_schedule
from .denoiser import TOY_PRESET, UNet, init_params
from .errors import TrainingError


@dataclass
class ShapesConfig:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_extent: int = 10
    max_extent: int = 26
    gradient_prob: float = 0.5


@dataclass
class Scene:
    image: np.ndarray        # H x W x 3 uint8
    background: np.ndarray   # the same scene with every object left out
    masks: list = field(default_factory=list)  # one float32 0/1 mask per object


def _background(rng, size, gradient_prob):
    c0 = rng.integers(0, 256, 3).astype(np.float64)
    if rng.random() >= gradient_prob:
        return np.broadcast_to(c0, (size, size, 3)).copy()
    c1 = rng.integers(0, 256, 3).astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
    return c0 + (c1 - c0) * ramp[..., None]


def _shape_mask(rng, size, cfg):
    h, w = rng.integers(cfg.min_extent, cfg.max_extent + 1, 2)
    top = rng.integers(0, size - h + 1)
    left = rng.integers(0, size - w + 1)
    mask = np.zeros((size, size), dtype=np.float32)
    if rng.random() < 0.5:
        mask[top:top + h, left:left + w] = 1
    else:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        cy, cx = top + h / 2, left + w / 2
        mask[((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1] = 1
    return mask


def make_scene(rng, cfg=ShapesConfig()):
    bg = _background(rng, cfg.size, cfg.gradient_prob)
    img = bg.copy()
    masks = []
    for _ in range(rng.integers(cfg.min_objects, cfg.max_objects + 1)):
        m = _shape_mask(rng, cfg.size, cfg)
        color = rng.integers(0, 256, 3).astype(np.float64)
        img = img * (1 - m[..., None]) + color * m[..., None]
        masks.append(m)
    as_u8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return Scene(image=as_u8(img), background=as_u8(bg), masks=masks)


def train_toy(config=TOY_PRESET, steps=2000, lr=1e-3, batch_size=16, seed=0,
              shapes=ShapesConfig(), optimizer="adam", momentum=0.9, train_T=1000,
              clip_norm=1.0, log_every=0):
    """Epsilon-prediction MSE training; returns ``(params, loss_trace)``.

    ``optimizer="sgd"`` selects SGD with momentum. On the toy preset it
    sits on the predict-zero plateau far longer than Adam does.
    """
    params = init_params(config)
    if steps == 0:
        return params, []
    torch.manual_seed(seed)
    net = UNet(config)
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    net.train()
    if optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=lr)
    elif optimizer == "sgd":
        opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    alpha_bar = make_schedule(train_T).alpha_bar
    rng = np.random.default_rng(seed)
    factor = int(round((shapes.size // config.latent_size[0])))
    trace = []
    for step in range(steps):
        z0 = np.stack([encode(make_scene(rng, shapes).image, factor) for _ in range(batch_size)])
        t = rng.integers(1, train_T + 1, batch_size)
        noise = rng.standard_normal(z0.shape).astype(np.float32)
        a = alpha_bar[t].astype(np.float32)[:, None, None, None]
        zt = np.sqrt(a) * z0 + np.sqrt(1 - a) * noise
        pred = net(torch.from_numpy(zt), torch.from_numpy((t / train_T).astype(np.float32)))
        loss = F.mse_loss(pred, torch.from_numpy(noise))
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingError("loss diverged", step=step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), clip_norm)
        opt.step()
        trace.append(value)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {value:.4f}", flush=True)
    return {k: v.detach().numpy().copy() for k, v in net.state_dict().items()}, trace


def moving_average(trace, window=100):
    trace = np.asarray(trace, dtype=np.float64)
    if len(trace) < window:
        return trace.copy()
    return np.convolve(trace, np.ones(window) / window, mode="valid")


def cached_checkpoint(cache_dir, config=TOY_PRESET, steps=2000, seed=0, **kwargs):
    """Train once and reuse: the file name encodes config, steps, seed and options."""
    import hashlib
    import json
    from dataclasses import asdict
    from pathlib import Path

    from .denoiser import load_params, save_params

    # schedule values and parameter shapes catch code changes the config does not show
    train_T = kwargs.get("train_T", 1000)
    shapes_sig = sorted((k, list(v.shape)) for k, v in init_params(config).items())
    key = json.dumps({"config": asdict(config), "steps": steps, "seed": seed, **kwargs,
                      "schedule": make_schedule(train_T).alpha_bar.round(12).tolist(), "params": shapes_sig},
                     sort_keys=True, default=str)
    digest = hashlib.sha256(key.encode()).hexdigest()[:12]
    path = Path(cache_dir) / f"toy_{steps}_{seed}_{digest}.lpar"
    if not path.is_file():
        path.parent.mkdir(parents=True, exist_ok=True)
        params, _ = train_toy(config, steps=steps, seed=seed, **kwargs)
        tmp = path.with_suffix(".tmp")
        save_params(tmp, config, params)
        tmp.replace(path)
    return load_params(path)
