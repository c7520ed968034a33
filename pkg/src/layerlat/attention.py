"""Key-masking self-attention and its ablation variants.

Masked keys are multiplied by zero before the logit product, so their
logits are exactly 0 and still take part in the softmax. This is a soft
suppression, not the additive ``-inf`` masking used for causal attention.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import DTYPE, matmul, maxpool_downsample, softmax_lastdim

MASK_MODES = ("key", "query", "value", "none")
DEFAULT_STEP_RANGE = (50, 10)


def _check_qkv(Q, K, V):
    Q, K, V = (np.asarray(a, dtype=DTYPE) for a in (Q, K, V))
    if Q.ndim != 2 or Q.shape != K.shape or K.shape[0] != V.shape[0]:
        raise DimensionError(f"bad attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[1] < 1:
        raise DimensionError("attention feature dim must be >= 1")
    return Q, K, V


def _token_mask(m, n, name):
    m = np.asarray(m, dtype=DTYPE).reshape(-1)
    if m.shape[0] != n:
        raise DimensionError(f"{name} mask has {m.shape[0]} tokens, expected {n}")
    return m


def _attend(Q, K, V):
    logits = matmul(Q, K.T) * DTYPE(1.0 / np.sqrt(Q.shape[1]))
    return matmul(softmax_lastdim(logits), V)


def plain_attention(Q, K, V):
    return _attend(*_check_qkv(Q, K, V))


def key_keep(m, r=None):
    """``1 - clamp(m + r)`` as float32."""
    total = m if r is None else np.minimum(m + r, 1)
    return (1 - total).astype(DTYPE)


def attention_logits(Q, K, m=None, mode="key"):
    """Scaled logit matrix after applying ``m`` to queries or keys (for inspection)."""
    Q, K, _ = _check_qkv(Q, K, K)
    if m is not None:
        keep = key_keep(_token_mask(m, Q.shape[0], "remove"))[:, None]
        if mode == "key":
            K = K * keep
        elif mode == "query":
            Q = Q * keep
    return matmul(Q, K.T) * DTYPE(1.0 / np.sqrt(Q.shape[1]))


def key_masked_attention(Q, K, V, m, r=None):
    """Softmax(Q ((1 - m - r) * K)^T / sqrt(d)) V with m + r clamped to 1."""
    Q, K, V = _check_qkv(Q, K, V)
    n = K.shape[0]
    m = _token_mask(m, n, "remove")
    if r is not None:
        r = _token_mask(r, n, "refine")
    return _attend(Q, K * key_keep(m, r)[:, None], V)


def ablation_attention(Q, K, V, m, mode):
    """Mask the queries or the values instead of the keys."""
    Q, K, V = _check_qkv(Q, K, V)
    keep = key_keep(_token_mask(m, K.shape[0], "remove"))[:, None]
    if mode == "query":
        return _attend(Q * keep, K, V)
    if mode == "value":
        return _attend(Q, K, V * keep)
    raise ParameterError(f"ablation mode must be 'query' or 'value', got {mode!r}")


def _grid(res):
    return (res, res) if isinstance(res, int) else tuple(res)


def prepare_token_masks(mask, resolutions):
    """Max-pool a latent-resolution mask to every token grid and flatten row-major."""
    mask = np.asarray(mask, dtype=DTYPE)
    h, w = mask.shape
    out = {}
    for res in resolutions:
        gh, gw = _grid(res)
        if gh > h or gw > w or h % gh or w % gw:
            raise DimensionError(f"token grid {gh}x{gw} incompatible with mask {h}x{w}")
        out[(gh, gw)] = maxpool_downsample(mask, gh, gw).reshape(-1)
    return out


def attention_heatmap(features, height, width):
    """Per-token L2 norm of a block's output, as a ``height x width`` grid."""
    features = np.asarray(features, dtype=DTYPE)
    if features.ndim != 2 or features.shape[0] != height * width:
        raise DimensionError(f"{features.shape[0]} tokens do not fill a {height}x{width} grid")
    return np.sqrt((features.astype(np.float64) ** 2).sum(axis=1)).reshape(height, width).astype(DTYPE)


@dataclass
class AttentionMaskSet:
    """Token masks plus the mode and the step/block window where they apply.

    ``step_range=(hi, lo)`` activates masking for steps evaluated at
    ``lo < t <= hi``. ``block_range=(first, last)`` is inclusive; ``last=None``
    means no upper bound.
    """

    remove: dict
    refine: dict = None
    mode: str = "key"
    step_range: tuple = DEFAULT_STEP_RANGE
    block_range: tuple = (0, None)

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ParameterError(f"unknown mask mode {self.mode!r}")
        hi, lo = self.step_range
        if lo < 0 or hi < lo:
            raise ParameterError(f"step_range must satisfy hi >= lo >= 0, got {self.step_range}")

    @classmethod
    def from_latent_masks(cls, remove, resolutions, refine=None, **kwargs):
        return cls(
            remove=prepare_token_masks(remove, resolutions),
            refine=None if refine is None else prepare_token_masks(refine, resolutions),
            **kwargs,
        )


def masking_active(t, block, mask_set):
    if mask_set is None or mask_set.mode == "none":
        return False
    hi, lo = mask_set.step_range
    first, last = mask_set.block_range
    return lo < t <= hi and block >= first and (last is None or block <= last)


@dataclass
class AttentionContext:
    """What a denoiser forward pass hands to every attention block.

    ``t`` is the timestep of the latent being denoised (1..T).
    """

    processor: object = None
    mask_set: AttentionMaskSet = None
    t: int = 0

    def attend(self, q, k, v, block, grid):
        processor = self.processor or masked_processor
        return processor(q, k, v, self, block, grid)


def plain_processor(q, k, v, ctx, block, grid):
    return plain_attention(q, k, v)


def masked_processor(q, k, v, ctx, block, grid):
    """Route through the masking variant selected by ``ctx.mask_set``."""
    ms = ctx.mask_set
    if not masking_active(ctx.t, block, ms):
        return plain_attention(q, k, v)
    grid = _grid(grid)
    if ms.mode == "key":
        refine = None if ms.refine is None else ms.refine[grid]
        return key_masked_attention(q, k, v, ms.remove[grid], refine)
    return ablation_attention(q, k, v, ms.remove[grid], ms.mode)


@dataclass
class HeatmapRecorder:
    """Processor wrapper that stores an output heatmap per (block, t)."""

    inner: object = masked_processor
    maps: dict = field(default_factory=dict)

    def __call__(self, q, k, v, ctx, block, grid):
        out = self.inner(q, k, v, ctx, block, grid)
        gh, gw = _grid(grid)
        self.maps[(block, ctx.t)] = attention_heatmap(out, gh, gw)
        return out
