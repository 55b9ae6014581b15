"""Forward noising, deterministic DDIM stepping/inversion, and guided prediction.

Timesteps are indexed 0..T with alpha-bar(0) = 1 exactly, so the t=0 anchor
is the clean image. Sampling uses S+1 evenly spaced anchors descending from
T to 0; the step ordinal s = 1..S counts from the noisiest step. Inversion
runs the same recurrence in reverse time at guidance scale 1 and records
every anchor latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, Tensor


@dataclass(frozen=True)
class SchedulerConfig:
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    # guided extrapolation this small model can absorb; large scales push the
    # trajectory off-manifold and visibly corrupt backgrounds
    guidance: float = 1.5


class NoiseSchedule:
    """Linear beta schedule with cached alpha-bar values and sampling anchors."""

    def __init__(self, config: SchedulerConfig = SchedulerConfig()):
        self.config = config
        T = config.train_steps
        if T % config.sample_steps:
            raise ValueError("sample_steps must divide train_steps for even anchors")
        betas = np.linspace(config.beta_start, config.beta_end, T, dtype=np.float64)
        alpha_bar = np.empty(T + 1, dtype=np.float64)
        alpha_bar[0] = 1.0
        alpha_bar[1:] = np.cumprod(1.0 - betas)
        self.betas = betas.astype(DTYPE)
        # float64 master copy; step arithmetic runs in float64 so that the
        # only rounding left is the float32 storage of the latents themselves
        self._alpha_bar64 = alpha_bar
        self.alpha_bar = alpha_bar.astype(DTYPE)
        if not np.all(np.diff(alpha_bar) < 0):
            raise ValueError("alpha-bar must be strictly decreasing")
        stride = T // config.sample_steps
        # descending anchors T, T-stride, ..., 0 (length S+1)
        self.anchors = np.arange(T, -1, -stride, dtype=np.int64)
        self._anchor_set = set(int(a) for a in self.anchors)

    @property
    def train_steps(self) -> int:
        return self.config.train_steps

    @property
    def sample_steps(self) -> int:
        return self.config.sample_steps

    def _check_t(self, t: int):
        if not 0 <= t <= self.config.train_steps:
            raise ValueError(f"timestep {t} outside schedule [0, {self.config.train_steps}]")

    def is_anchor(self, t: int) -> bool:
        return int(t) in self._anchor_set

    def ordinal_of(self, t: int) -> int:
        """Sampling-step ordinal s = 1..S for the anchor where noise is predicted."""
        if not self.is_anchor(t) or t == 0:
            raise ValueError(f"{t} is not a prediction anchor")
        idx = np.nonzero(self.anchors == t)[0][0]
        return int(idx) + 1

    def add_noise(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t scalar or per-sample."""
        t = np.asarray(t, dtype=np.int64)
        if t.ndim == 0:
            self._check_t(int(t))
            ab = self._alpha_bar64[int(t)]
        else:
            if (t < 0).any() or (t > self.config.train_steps).any():
                raise ValueError("timestep outside schedule")
            ab = self._alpha_bar64[t].reshape((-1,) + (1,) * (x0.ndim - 1))
        return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(DTYPE)

    def recover_noise(self, x0: np.ndarray, x_t: np.ndarray, t: int) -> np.ndarray:
        self._check_t(t)
        ab = self._alpha_bar64[t]
        return ((x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)).astype(DTYPE)

    def ddim_step(self, z_t: np.ndarray, eps_hat: np.ndarray,
                  t: int, t_prev: int, clip_x0: bool = False) -> np.ndarray:
        """Deterministic (eta=0) step from anchor t down to anchor t_prev.

        ``clip_x0`` clamps the predicted clean image to [-1, 1] before
        re-noising; image-space samplers enable it to keep early high-noise
        steps on the data manifold, while the default is the pure recurrence.
        """
        t, t_prev = int(t), int(t_prev)
        if not (self.is_anchor(t) and self.is_anchor(t_prev)):
            raise ValueError(f"timesteps ({t}, {t_prev}) are not schedule anchors")
        if t < t_prev:
            raise ValueError(f"ddim_step requires t >= t_prev, got {t} < {t_prev}")
        if t == t_prev:
            return z_t
        ab_t = self._alpha_bar64[t]
        ab_p = self._alpha_bar64[t_prev]
        if ab_t <= 0:
            raise ValueError(f"alpha-bar({t}) <= 0")
        z64 = z_t.astype(np.float64)
        e64 = eps_hat.astype(np.float64)
        x0_hat = (z64 - np.sqrt(1.0 - ab_t) * e64) / np.sqrt(ab_t)
        if clip_x0:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        return (np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * e64).astype(DTYPE)

    def ddim_invert_step(self, z_prev: np.ndarray, eps_hat: np.ndarray,
                         t_prev: int, t: int) -> np.ndarray:
        """Mirror of ddim_step: lift an anchor latent from t_prev up to t."""
        t, t_prev = int(t), int(t_prev)
        if not (self.is_anchor(t) and self.is_anchor(t_prev)):
            raise ValueError(f"timesteps ({t_prev}, {t}) are not schedule anchors")
        if t <= t_prev:
            raise ValueError(f"inversion requires t > t_prev, got {t} <= {t_prev}")
        ab_p = self._alpha_bar64[t_prev]
        ab_t = self._alpha_bar64[t]
        z64 = z_prev.astype(np.float64)
        e64 = eps_hat.astype(np.float64)
        x0_hat = (z64 - np.sqrt(1.0 - ab_p) * e64) / np.sqrt(ab_p)
        return (np.sqrt(ab_t) * x0_hat + np.sqrt(1.0 - ab_t) * e64).astype(DTYPE)


class InversionTrajectory:
    """Anchor latents [Z_T, ..., Z_0] plus the conditioning they were computed under."""

    def __init__(self, anchors: np.ndarray, latents: list[np.ndarray], embedding):
        if len(latents) != len(anchors):
            raise ValueError("one latent per anchor required")
        self.anchors = np.asarray(anchors, dtype=np.int64)  # descending, T..0
        self.latents = latents
        self.embedding = embedding
        self._index = {int(t): i for i, t in enumerate(self.anchors)}

    def __len__(self):
        return len(self.latents)

    def at(self, t: int) -> np.ndarray:
        return self.latents[self._index[int(t)]]

    @property
    def initial(self) -> np.ndarray:
        """The noisiest latent Z_T."""
        return self.latents[0]


def ddim_invert(image: np.ndarray, e, model, sched: NoiseSchedule) -> InversionTrajectory:
    """Run the DDIM recurrence in reverse time at guidance 1, recording anchors.

    The round trip invert -> sample with the same conditioning reconstructs
    the image up to the discretization error of the S-step schedule.
    """
    z = np.asarray(image, dtype=DTYPE)
    ascending = sched.anchors[::-1]  # 0, stride, ..., T
    latents = [z]
    for i in range(len(ascending) - 1):
        t_prev, t = int(ascending[i]), int(ascending[i + 1])
        eps = model.predict_noise(Tensor(z), t, e).data
        z = sched.ddim_invert_step(z, eps, t_prev, t)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite latent during inversion at t={t}")
        latents.append(z)
    return InversionTrajectory(sched.anchors, latents[::-1], e)


def cfg_predict(z_t, t: int, e_pos, e_neg, g: float, model, hooks=None) -> np.ndarray:
    """Guided noise estimate eps_n + g (eps_p - eps_n); negative prompt as unconditional.

    g == 1 collapses to the conditional prediction and is evaluated as such.
    The two passes run as one batch of two so attention edits see both.
    """
    if g < 0:
        raise ValueError("guidance scale must be >= 0")
    z = np.asarray(z_t, dtype=DTYPE)
    if g == 1.0:
        return model.predict_noise(Tensor(z), t, e_pos, hooks=hooks).data
    zz = Tensor(np.stack([z, z]))
    from .denoiser import stack_embeddings  # local import to avoid a cycle
    ee = stack_embeddings([e_neg, e_pos])
    eps = model.predict_noise(zz, t, ee, hooks=hooks).data
    eps_n, eps_p = eps[0], eps[1]
    return (eps_n + DTYPE(g) * (eps_p - eps_n)).astype(DTYPE)


def ddim_sample(z_T: np.ndarray, e_pos, model, sched: NoiseSchedule, *,
                g: float = 1.0, e_neg=None, hook_factory=None,
                clip_x0: bool = True) -> np.ndarray:
    """Plain DDIM sampling from an initial latent down to t=0.

    ``hook_factory(s, t)`` may supply per-step attention hooks; with none the
    model runs untouched. The predicted clean image is clamped to the pixel
    range at every step (image-space sampling). Returns the t=0 latent.
    """
    z = np.asarray(z_T, dtype=DTYPE)
    anchors = sched.anchors
    for i in range(len(anchors) - 1):
        t, t_prev = int(anchors[i]), int(anchors[i + 1])
        s = i + 1
        hooks = hook_factory(s, t) if hook_factory is not None else None
        if g == 1.0 or e_neg is None:
            eps = model.predict_noise(Tensor(z), t, e_pos, hooks=hooks).data
        else:
            eps = cfg_predict(z, t, e_pos, e_neg, g, model, hooks=hooks)
        z = sched.ddim_step(z, eps, t, t_prev, clip_x0=clip_x0)
    return z


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB for [-1, 1] images (peak-to-peak 2)."""
    err = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))
