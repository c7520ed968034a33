"""Deterministic DDIM (eta = 0) sampling and inversion with per-step hooks.

Timesteps follow the editing convention: ``t = T`` is pure noise and
``t = 0`` the clean latent. A sampling step ``t -> t - 1`` and an inversion
step ``t - 1 -> t`` both evaluate the denoiser with timestep ``t``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionContext
from .errors import ContractError, NumericError, ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1


def make_schedule(T, kind="cosine", s=0.008, floor=1e-3, max_beta=0.999):
    """Cumulative signal levels ``alpha_bar[0..T]``.

    The cosine curve is lifted onto ``[floor, 1]`` instead of clipping betas:
    its end point is then ``floor`` for every T, so the last step never
    jumps by orders of magnitude and DDIM inversion stays accurate there.
    """
    if T < 1:
        raise ParameterError(f"schedule needs T >= 1, got {T}")
    if kind == "cosine":
        if not 0 < floor < 1:
            raise ParameterError(f"cosine floor must lie in (0, 1), got {floor}")
        f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        alpha_bar = np.array([floor + (1 - floor) * f(t) / f(0) for t in range(T + 1)])
        alpha_bar[0] = 1.0
    elif kind == "linear":
        betas = [min(b, max_beta) for b in np.linspace(1e-4 * 1000 / T, 0.02 * 1000 / T, T)]
        alpha_bar = np.cumprod([1.0] + [1 - b for b in betas])
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def ddim_step(z_t, eps, t, t_prev, schedule):
    """One deterministic denoising step from ``t`` to ``t_prev``."""
    a_t = schedule.alpha_bar[t]
    a_prev = schedule.alpha_bar[t_prev]
    z_t = np.asarray(z_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):  # callers check finiteness
        x0 = (z_t - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
        return (math.sqrt(a_prev) * x0 + math.sqrt(1 - a_prev) * eps).astype(np.float32)


def ddim_inverse_step(z_prev, eps, t_prev, t, schedule):
    """Algebraic inverse of :func:`ddim_step` under the same ``eps``."""
    return ddim_step(z_prev, eps, t_prev, t, schedule)


def _check_finite(z, t):
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite latent", step=t)


def invert(z0, denoiser, schedule, processor=None):
    """Run DDIM inversion from t = 0 to T; returns a list indexed by timestep."""
    traj = [np.array(z0, dtype=np.float32)]
    z = traj[0]
    for t in range(1, schedule.T + 1):
        eps = denoiser(z, t, schedule.T, AttentionContext(processor=processor, t=t))
        z = ddim_inverse_step(z, eps, t - 1, t, schedule)
        _check_finite(z, t)
        traj.append(z)
    return traj


def sample(latents, denoiser, schedule, hooks=(), ctx_provider=None, target=None,
           t_start=None, t_end=0):
    """Denoise every latent in ``latents`` (role -> array) from ``t_start`` to ``t_end``.

    After each step the hooks run in order as ``hook(t_prev, latents)`` and
    may overwrite entries (same shape), add roles, or drop roles. The
    context for a role comes from ``ctx_provider(t, role)``. Returns the
    ``target`` latent, or the whole dict when ``target`` is None.
    """
    latents = {k: np.array(v, dtype=np.float32) for k, v in latents.items()}
    shape = next(iter(latents.values())).shape
    t_start = schedule.T if t_start is None else t_start
    for t in range(t_start, t_end, -1):
        for role in list(latents):
            if ctx_provider is None:
                ctx = AttentionContext(t=t)
            else:
                ctx = ctx_provider(t, role)
            if ctx is False:
                # role is replayed by a hook, not denoised
                continue
            eps = denoiser(latents[role], t, schedule.T, ctx)
            latents[role] = ddim_step(latents[role], eps, t, t - 1, schedule)
        for hook in hooks:
            hook(t - 1, latents)
            for role, z in latents.items():
                if np.shape(z) != shape:
                    raise ContractError(f"hook {hook!r} changed shape of {role!r} to {np.shape(z)}")
        for role, z in latents.items():
            latents[role] = np.asarray(z, dtype=np.float32)
            _check_finite(latents[role], t - 1)
    return latents if target is None else latents[target]


class ConstantEpsilon:
    """State-independent test denoiser; inversion through it is algebraically exact."""

    def __init__(self, eps):
        self.eps = np.asarray(eps, dtype=np.float32)

    def __call__(self, z, t, num_steps, ctx=None):
        return self.eps
