"""Small U-Net epsilon predictor with pluggable self-attention.

Convolutions, norms and the time MLP run in torch. At inference every
self-attention block hands its Q, K, V (as float32 numpy arrays) to the
processor carried by an :class:`~layerlat.attention.AttentionContext`, so the
masking code in :mod:`layerlat.attention` is what actually runs. Training
uses the equivalent torch attention so gradients flow.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attention import AttentionContext
from .errors import DimensionError, FormatError, ParameterError

torch.use_deterministic_algorithms(True)

LPAR_MAGIC = b"LPAR"
LPAR_VERSION = 1


@dataclass
class DenoiserConfig:
    in_channels: int = 48
    latent_size: tuple = (16, 16)
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2)
    attention_resolutions: tuple = (16, 8)
    num_res_blocks: int = 2
    time_embed_dim: int = 128
    groups: int = 8
    seed: int = 0

    def __post_init__(self):
        self.latent_size = tuple(self.latent_size)
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_resolutions = tuple(self.attention_resolutions)
        if not self.attention_resolutions:
            raise ParameterError("need at least one attention resolution")
        h, w = self.latent_size
        levels = len(self.channel_multipliers)
        if h % 2 ** (levels - 1) or w % 2 ** (levels - 1):
            raise ParameterError(f"latent {h}x{w} cannot be halved {levels - 1} times")
        for res in self.attention_resolutions:
            if res not in self.stage_sizes():
                raise ParameterError(f"attention resolution {res} is not a stage size {self.stage_sizes()}")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.groups:
                raise ParameterError("channel counts must be divisible by the group count")

    def stage_sizes(self):
        return [self.latent_size[0] // 2 ** i for i in range(len(self.channel_multipliers))]

    def stage_grid(self, i):
        return (self.latent_size[0] // 2 ** i, self.latent_size[1] // 2 ** i)

    @property
    def attention_block_count(self):
        n = 0
        for i, res in enumerate(self.stage_sizes()):
            if res in self.attention_resolutions:
                n += 2 * self.num_res_blocks
        if self.stage_sizes()[-1] in self.attention_resolutions:
            n += 1
        return n

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


TOY_PRESET = DenoiserConfig()
TINY_PRESET = DenoiserConfig(base_channels=8, time_embed_dim=16, num_res_blocks=1, groups=4)


def timestep_embedding(tau, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = tau[:, None].float() * 1000.0 * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class AttnBlock(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, state):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        block = state["block"]
        state["block"] += 1
        ctx = state["ctx"]
        if ctx is None:
            weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
            out = weights @ v
        else:
            outs = [
                torch.from_numpy(np.ascontiguousarray(
                    ctx.attend(q[i].numpy(), k[i].numpy(), v[i].numpy(), block, (h, w))))
                for i in range(b)
            ]
            out = torch.stack(outs)
        return x + self.proj(out).transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        base, E, g = cfg.base_channels, cfg.time_embed_dim, cfg.groups
        chans = [base * m for m in cfg.channel_multipliers]
        sizes = cfg.stage_sizes()
        last = len(chans) - 1
        self.time1 = nn.Linear(base, E)
        self.time2 = nn.Linear(E, E)
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        cin = chans[0]
        for i, ch in enumerate(chans):
            stage = nn.ModuleDict()
            stage["res"] = nn.ModuleList()
            stage["attn"] = nn.ModuleList()
            for b in range(cfg.num_res_blocks):
                stage["res"].append(ResBlock(cin, ch, E, g))
                cin = ch
                if sizes[i] in cfg.attention_resolutions:
                    stage["attn"].append(AttnBlock(ch, g))
            if i < last:
                stage["downsample"] = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
            self.down.append(stage)

        self.mid1 = ResBlock(chans[last], chans[last], E, g)
        self.mid_attn = AttnBlock(chans[last], g) if sizes[last] in cfg.attention_resolutions else None
        self.mid2 = ResBlock(chans[last], chans[last], E, g)

        self.up = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            stage = nn.ModuleDict()
            if i < last:
                stage["upsample"] = nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1)
                cin = chans[i + 1] + ch
            else:
                cin = 2 * ch
            stage["res"] = nn.ModuleList()
            stage["attn"] = nn.ModuleList()
            for b in range(cfg.num_res_blocks):
                stage["res"].append(ResBlock(cin if b == 0 else ch, ch, E, g))
                if sizes[i] in cfg.attention_resolutions:
                    stage["attn"].append(AttnBlock(ch, g))
            self.up.append(stage)

        self.norm_out = nn.GroupNorm(g, chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)
        # the latent is wider than the trunk, so noise passes through a time-gated skip
        self.skip_gain = nn.Linear(E, cfg.in_channels)

    @staticmethod
    def _run_stage(stage, h, emb, state):
        attn = stage["attn"]
        for b, res in enumerate(stage["res"]):
            h = res(h, emb)
            if len(attn):
                h = attn[b](h, state)
        return h

    def forward(self, x, tau, ctx=None):
        state = {"block": 0, "ctx": ctx}
        emb = self.time2(F.silu(self.time1(timestep_embedding(tau, self.cfg.base_channels))))
        h = self.conv_in(x)
        skips = []
        for stage in self.down:
            h = self._run_stage(stage, h, emb, state)
            skips.append(h)
            if "downsample" in stage:
                h = stage["downsample"](h)
        h = self.mid1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, state)
        h = self.mid2(h, emb)
        for stage in self.up:
            if "upsample" in stage:
                h = stage["upsample"](F.interpolate(h, scale_factor=2.0, mode="nearest"))
            h = torch.cat([h, skips.pop()], dim=1)
            h = self._run_stage(stage, h, emb, state)
        gain = self.skip_gain(F.silu(emb))[:, :, None, None]
        return self.conv_out(F.silu(self.norm_out(h))) + gain * x


def init_params(config):
    """Seeded, fan-in scaled normal weights; norms start at identity, biases at 0."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, p in UNet(config).named_parameters():
        shape = tuple(p.shape)
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif "norm" in name.rsplit(".", 1)[0].rsplit(".", 1)[-1]:
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)
    return params


class ToyDenoiser:
    """Callable epsilon predictor: ``denoiser(z, t, T, ctx)`` for timestep t in 1..T."""

    def __init__(self, config=TOY_PRESET, params=None):
        self.config = config
        self.net = UNet(config)
        self.load(init_params(config) if params is None else params)
        self.net.eval()

    def load(self, params):
        state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32).copy()) for k, v in params.items()}
        self.net.load_state_dict(state, strict=True)

    def params(self):
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}

    def predict_epsilon(self, lat, t, ctx=None, num_steps=50):
        """Epsilon for a latent at step index ``t`` in [0, num_steps).

        Index ``t`` means the latent sits at noise level ``t + 1`` of a
        ``num_steps`` schedule.
        """
        lat = np.asarray(lat, dtype=np.float32)
        expect = (self.config.in_channels,) + self.config.latent_size
        if lat.shape != expect:
            raise DimensionError(f"latent shape {lat.shape} does not match model {expect}")
        if not 0 <= t < num_steps:
            raise ParameterError(f"timestep index {t} outside [0, {num_steps})")
        if ctx is None:
            ctx = AttentionContext(t=t + 1)
        tau = torch.tensor([(t + 1) / num_steps], dtype=torch.float32)
        with torch.inference_mode():
            out = self.net(torch.from_numpy(lat.copy())[None], tau, ctx)
        return out[0].numpy().copy()

    def __call__(self, z, t, num_steps, ctx=None):
        return self.predict_epsilon(z, t - 1, ctx, num_steps)


def save_params(path, config, params):
    echo = json.dumps(asdict(config), sort_keys=True).encode()
    chunks = [LPAR_MAGIC, struct.pack("<II", LPAR_VERSION, len(echo)), echo, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        chunks.append(struct.pack("<II", len(raw), arr.ndim) + raw)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path):
    data = Path(path).read_bytes()
    if data[:4] != LPAR_MAGIC:
        raise FormatError(f"bad LPAR magic {data[:4]!r}", 0)
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != LPAR_VERSION:
            raise FormatError(f"unsupported LPAR version {version}", 4)
        pos = 12
        config = DenoiserConfig.from_dict(json.loads(data[pos:pos + n]))
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<II", data, pos)
            pos += 8
            name = data[pos:pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(data):
                raise FormatError(f"truncated tensor {name}", pos)
            params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated LPAR file: {exc}", len(data)) from exc
    return config, params
