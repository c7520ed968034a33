"""Layered latent decomposition and fusion.

The background layer (layer 0) is denoised under key-masking attention
while everything outside its remove mask is copied from the source
inversion trajectory after every step. Instance layers are pasted onto a
canvas initialised from the background at ``t = T - K`` and the result is
harmonised by plain denoising down to ``t = 0``.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionContext, AttentionMaskSet
from .ddim import invert, sample
from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class MoveVector:
    dx: int
    dy: int

    def check(self, height, width):
        if abs(self.dx) >= width or abs(self.dy) >= height:
            raise ParameterError(f"move {self} out of range for a {height}x{width} grid")
        return self

    def __neg__(self):
        return MoveVector(-self.dx, -self.dy)


def move(x, v):
    """``out[..., i, j] = x[..., i - dy, j - dx]``; cells read from outside are 0."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    dy, dx = v.dy, v.dx
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(-dy, 0), h - max(dy, 0))
    src_x = slice(max(-dx, 0), w - max(dx, 0))
    dst_y = slice(max(dy, 0), h - max(-dy, 0))
    dst_x = slice(max(dx, 0), w - max(-dx, 0))
    out[..., dst_y, dst_x] = x[..., src_y, src_x]
    return out


def _select(mask, inside, outside):
    inside = np.asarray(inside, dtype=np.float32)
    outside = np.asarray(outside, dtype=np.float32)
    if inside.shape != outside.shape or inside.shape[-2:] != np.shape(mask):
        raise DimensionError(
            f"blend shapes disagree: {inside.shape}, {outside.shape}, mask {np.shape(mask)}")
    return np.where(np.asarray(mask) > 0.5, inside, outside).astype(np.float32)


def removal_blend(z_l0, z_src, m_remove):
    """Keep the removal latent inside the mask and the source latent outside."""
    return _select(m_remove, z_l0, z_src)


def occlusion_blend(z_hat_c, z_c, m_occlude_moved):
    """Keep the occlusion-removal canvas inside the moved occlusion mask."""
    return _select(m_occlude_moved, z_hat_c, z_c)


def union(masks, shape=None):
    masks = [np.asarray(m, dtype=np.float32) for m in masks]
    if not masks:
        return np.zeros(shape, dtype=np.float32)
    return np.clip(np.sum(masks, axis=0), 0, 1).astype(np.float32)


@dataclass
class LayerState:
    """One instance layer at latent resolution.

    ``trajectory`` is indexed by timestep (0..T). ``occlude`` marks the part
    of this layer hidden by another object in the source.
    """

    index: int
    trajectory: list
    mask: np.ndarray
    moves: list = field(default_factory=lambda: [MoveVector(0, 0)])
    occlude: np.ndarray = None
    adjustments: list = field(default_factory=list)

    def latent(self, t):
        return self.trajectory[t]

    def moved_masks(self):
        return [move(self.mask, v) for v in self.moves]

    def moved_occlusion(self):
        """Moved occlusion mask limited to what this layer actually pastes."""
        if self.occlude is None:
            return np.zeros_like(self.mask)
        occ = union([move(self.occlude, v) for v in self.moves])
        return occ * union(self.moved_masks())


def fuse_layers(canvas, layers, t):
    """Paste every layer at every one of its moves, ascending layer index."""
    canvas = np.array(canvas, dtype=np.float32)
    for layer in sorted(layers, key=lambda layer: layer.index):
        z = layer.latent(t)
        for v in layer.moves:
            canvas = _select(move(layer.mask, v), move(z, v), canvas)
    return canvas


class RemovalBlendHook:
    """Applies the background-preservation blend for output steps in ``[t_lo, t_hi)``."""

    def __init__(self, source_traj, m_remove, step_range, role="removal", record=None):
        self.source_traj = source_traj
        self.m_remove = m_remove
        self.t_hi, self.t_lo = step_range
        self.role = role
        self.record = record

    def __call__(self, t_prev, latents):
        if self.role in latents and self.t_lo <= t_prev < self.t_hi:
            latents[self.role] = removal_blend(latents[self.role], self.source_traj[t_prev], self.m_remove)
        if self.record is not None and self.role in latents:
            self.record[t_prev] = latents[self.role].copy()


@dataclass
class Editor:
    """Runs decomposition, fusion and harmonisation for one model and schedule."""

    denoiser: object
    schedule: object
    K: int = 40
    resolutions: tuple = (16, 8)
    mode: str = "key"
    step_range: tuple = (50, 10)
    block_range: tuple = (0, None)
    processor: object = None
    canvas_processor: object = None
    stage_callback: object = None

    def __post_init__(self):
        if not 0 <= self.K <= self.schedule.T:
            raise ParameterError(f"K={self.K} must lie in [0, T={self.schedule.T}]")

    @property
    def t_fuse(self):
        return self.schedule.T - self.K

    def invert(self, z0):
        return invert(z0, self.denoiser, self.schedule)

    def mask_set(self, remove, refine=None):
        return AttentionMaskSet.from_latent_masks(
            remove, self.resolutions, refine=refine, mode=self.mode,
            step_range=self.step_range, block_range=self.block_range)

    def _ctx(self, mask_sets, processors=None):
        processors = processors or {}

        def provider(t, role):
            return AttentionContext(processor=processors.get(role, self.processor),
                                    mask_set=mask_sets.get(role), t=t)
        return provider

    def _stage(self, name, latent):
        if self.stage_callback is not None:
            self.stage_callback(name, latent)

    def decompose(self, source_traj, m_remove, m_refine=None, t_end=None, record=None):
        """Key-masked removal on the background layer from T down to ``t_end``."""
        T = self.schedule.T
        t_end = self.t_fuse if t_end is None else t_end
        hook = RemovalBlendHook(source_traj, m_remove, self.step_range, record=record)
        out = sample({"removal": source_traj[T]}, self.denoiser, self.schedule, hooks=[hook],
                     ctx_provider=self._ctx({"removal": self.mask_set(m_remove, m_refine)}),
                     target="removal", t_start=T, t_end=t_end)
        self._stage("background", out)
        return out

    def harmonize(self, latent, t_start=None, hooks=(), mask_set=None, role="canvas"):
        """Denoise from ``t_start`` (default T - K) to 0."""
        t_start = self.t_fuse if t_start is None else t_start
        if t_start == 0:
            return np.array(latent, dtype=np.float32)
        processors = {role: self.canvas_processor} if self.canvas_processor else None
        return sample({role: latent}, self.denoiser, self.schedule, hooks=hooks,
                      ctx_provider=self._ctx({role: mask_set}, processors),
                      target=role, t_start=t_start, t_end=0)

    def remove(self, source_traj, m_remove, m_refine=None, record=None):
        """Removal-only task: the background layer is also the output."""
        background = self.decompose(source_traj, m_remove, m_refine, record=record)
        hook = RemovalBlendHook(source_traj, m_remove, self.step_range, role="removal", record=record)
        return self.harmonize(background, hooks=[hook], role="removal",
                              mask_set=self.mask_set(m_remove, m_refine))

    def move_and_fuse(self, source_traj, layers, m_remove, m_refine=None, record=None):
        """One-step fusion at T - K followed by harmonisation."""
        background = self.decompose(source_traj, m_remove, m_refine, record=record)
        canvas = fuse_layers(background, layers, self.t_fuse)
        self._stage("canvas", canvas)
        return self.harmonize(canvas)

    def occlusion_aware(self, source_traj, layers, m_remove, m_refine=None, record=None):
        """Fuse at every step of the first K steps and inpaint the moved occlusion mask.

        A second key-masked latent (``canvas_hat``) follows the freshly fused
        canvas outside the moved occlusion mask and evolves freely inside it.
        Fusion stops at T-K; the binding table's "T-K~0" label is kept
        verbatim but not followed.
        """
        T = self.schedule.T
        m_occ = union([layer.moved_occlusion() for layer in layers], shape=np.shape(m_remove))
        canvas0 = fuse_layers(source_traj[T], layers, T)
        mask_sets = {"removal": self.mask_set(m_remove, m_refine), "canvas_hat": self.mask_set(m_occ)}
        removal_hook = RemovalBlendHook(source_traj, m_remove, self.step_range, record=record)

        def fusion_hook(t_prev, latents):
            canvas = fuse_layers(latents["removal"], layers, t_prev)
            latents["canvas_hat"] = occlusion_blend(latents["canvas_hat"], canvas, m_occ)

        canvas_hat = sample({"removal": source_traj[T], "canvas_hat": canvas0}, self.denoiser,
                            self.schedule, hooks=[removal_hook, fusion_hook],
                            ctx_provider=self._ctx(mask_sets), target=None,
                            t_start=T, t_end=self.t_fuse)
        self._stage("background", canvas_hat["removal"])
        self._stage("canvas", canvas_hat["canvas_hat"])
        return self.harmonize(canvas_hat["canvas_hat"])
