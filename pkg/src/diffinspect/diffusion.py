"""Box diffusion mathematics.

Pure functions over numpy arrays: noise schedules, the forward corruption of
box sets, the algebraic bridges between noise and clean-signal predictions,
and the deterministic-capable reverse sampling step. Randomness always enters
through an explicitly passed generator or pre-drawn noise, so everything here
is reproducible and safe for concurrent use.

Boxes live in a continuous signal space: pixel boxes are converted to
(cx, cy, w, h), normalized to [0, 1] by the image size, then mapped affinely
onto [-scale, scale].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_SCALE = 2.0

_MIN_ALPHA_BAR = 1e-20


@dataclass(frozen=True)
class BetaSchedule:
    """Noise schedule beta_1..beta_T with cached cumulative products.

    alpha_bars[t-1] = prod_{i<=t} (1 - beta_i); the empty product
    alpha_bar_0 = 1 is handled by :func:`alpha_bar`.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.betas.shape != (self.T,) or self.alpha_bars.shape != (self.T,):
            raise ValueError("schedule arrays must have length T")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("every beta must lie strictly inside (0, 1)")
        running = np.cumprod(1.0 - self.betas)
        if not np.allclose(self.alpha_bars, running, rtol=1e-12, atol=0):
            raise ValueError("alpha_bars do not match the running product")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bars must be strictly decreasing")

    @classmethod
    def from_betas(cls, betas: np.ndarray) -> "BetaSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        return cls(T=len(betas), betas=betas,
                   alpha_bars=np.cumprod(1.0 - betas))


def make_schedule(
    kind: str,
    T: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> BetaSchedule:
    """Build a linear or cosine beta schedule of T steps.

    The linear kind interpolates beta from beta_start to beta_end. The cosine
    kind follows the squared-cosine cumulative-product curve with betas
    clipped below 0.999.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        x = np.linspace(0, T, T + 1, dtype=np.float64)
        curve = np.cos(((x / T) + s) / (1 + s) * np.pi / 2) ** 2
        curve = curve / curve[0]
        betas = np.clip(1.0 - curve[1:] / curve[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return BetaSchedule.from_betas(betas)


def alpha_bar(schedule: BetaSchedule, t: int) -> float:
    """Cumulative product alpha_bar_t, with alpha_bar_0 = 1."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 0..{schedule.T}")
    if t == 0:
        return 1.0
    return float(schedule.alpha_bars[t - 1])


@dataclass(frozen=True)
class BoxState:
    """A set of N boxes in diffusion signal space at timestep t."""

    boxes: np.ndarray
    t: int

    def __post_init__(self):
        object.__setattr__(
            self, "boxes", np.asarray(self.boxes, dtype=np.float64)
        )
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValueError(f"boxes must be (N, 4), got {self.boxes.shape}")
        if not np.isfinite(self.boxes).all():
            raise ValueError("box coordinates must be finite")
        if self.t < 0:
            raise ValueError(f"timestep must be >= 0, got {self.t}")

    @property
    def n(self) -> int:
        return self.boxes.shape[0]


def _check_noise(noise: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != boxes.shape:
        raise ValueError(
            f"noise shape {noise.shape} does not match boxes {boxes.shape}"
        )
    return noise


def corrupt(
    x0: BoxState, t: int, noise: np.ndarray, schedule: BetaSchedule
) -> BoxState:
    """Jump the clean signal straight to timestep t in closed form.

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * noise
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    noise = _check_noise(noise, x0.boxes)
    ab = alpha_bar(schedule, t)
    return BoxState(np.sqrt(ab) * x0.boxes + np.sqrt(1.0 - ab) * noise, t)


def single_step_diffuse(
    x_prev: BoxState, t: int, noise: np.ndarray, schedule: BetaSchedule
) -> BoxState:
    """One forward noising step from t-1 to t.

    x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * noise
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    noise = _check_noise(noise, x_prev.boxes)
    beta = float(schedule.betas[t - 1])
    return BoxState(
        np.sqrt(1.0 - beta) * x_prev.boxes + np.sqrt(beta) * noise, t
    )


def predict_x0_from_noise(
    x_t: BoxState, eps_hat: np.ndarray, t: int, schedule: BetaSchedule
) -> np.ndarray:
    """Invert the closed-form corruption given a noise estimate.

    x_0 = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    eps_hat = _check_noise(eps_hat, x_t.boxes)
    ab = alpha_bar(schedule, t)
    if ab < _MIN_ALPHA_BAR:
        raise FloatingPointError(
            f"alpha_bar({t}) = {ab:.3e} below {_MIN_ALPHA_BAR}; inversion "
            "would overflow"
        )
    return (x_t.boxes - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def noise_from_x0(
    x_t: BoxState, x0_hat: np.ndarray, t: int, schedule: BetaSchedule
) -> np.ndarray:
    """The noise estimate implied by a clean-signal prediction at timestep t."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    x0_hat = _check_noise(x0_hat, x_t.boxes)
    ab = alpha_bar(schedule, t)
    return (x_t.boxes - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def ddim_step(
    x_t: BoxState,
    x0_hat: np.ndarray,
    t: int,
    t_prev: int,
    schedule: BetaSchedule,
    eta: float = 0.0,
    noise: np.ndarray | None = None,
) -> BoxState:
    """Reverse-sampling update from t to t_prev, skipping steps freely.

    Deterministic when eta = 0; at t_prev = 0 with eta = 0 the output is
    exactly the clean-signal prediction. For eta > 0 a fresh standard-normal
    ``noise`` sample must be supplied.
    """
    if not 0 <= t_prev < t <= schedule.T:
        raise ValueError(f"require 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    x0_hat = _check_noise(x0_hat, x_t.boxes)
    ab_t = alpha_bar(schedule, t)
    ab_prev = alpha_bar(schedule, t_prev)
    eps_hat = noise_from_x0(x_t, x0_hat, t, schedule)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(
        max(1.0 - ab_t / ab_prev, 0.0)
    )
    direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    out = np.sqrt(ab_prev) * x0_hat + direction
    if eta > 0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise sample")
        out = out + sigma * _check_noise(noise, x_t.boxes)
    return BoxState(out, t_prev)


def sampling_times(T: int, steps: int) -> list[tuple[int, int]]:
    """Uniformly spaced (t, t_prev) pairs covering T down to 0."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    times = np.linspace(T, 0, steps + 1).round().astype(int).tolist()
    return list(zip(times[:-1], times[1:]))


def _as_size(image_size) -> tuple[float, float]:
    if np.isscalar(image_size):
        return float(image_size), float(image_size)
    w, h = image_size
    return float(w), float(h)


def encode_boxes(pixel_boxes, image_size, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Map pixel (x, y, w, h) boxes into the signal domain [-scale, scale]^4."""
    boxes = np.asarray(pixel_boxes, dtype=np.float64).reshape(-1, 4)
    if not np.isfinite(boxes).all():
        raise ValueError("pixel boxes must be finite")
    w_img, h_img = _as_size(image_size)
    cx = (boxes[:, 0] + boxes[:, 2] / 2) / w_img
    cy = (boxes[:, 1] + boxes[:, 3] / 2) / h_img
    wn = boxes[:, 2] / w_img
    hn = boxes[:, 3] / h_img
    unit = np.stack([cx, cy, wn, hn], axis=1)
    return (2.0 * unit - 1.0) * scale


def decode_boxes(signal: np.ndarray, image_size, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Invert :func:`encode_boxes`, clamping the signal to [-scale, scale]
    first and enforcing a 1-pixel minimum box size."""
    signal = np.asarray(signal, dtype=np.float64).reshape(-1, 4)
    if not np.isfinite(signal).all():
        raise ValueError("signal must be finite")
    w_img, h_img = _as_size(image_size)
    unit = (np.clip(signal, -scale, scale) / scale + 1.0) / 2.0
    w = np.maximum(unit[:, 2] * w_img, 1.0)
    h = np.maximum(unit[:, 3] * h_img, 1.0)
    x = unit[:, 0] * w_img - w / 2
    y = unit[:, 1] * h_img - h / 2
    return np.stack([x, y, w, h], axis=1)


def pad_boxes(
    gt_boxes,
    n_target: int,
    rng: np.random.Generator,
    image_size,
    scale: float = DEFAULT_SCALE,
) -> tuple[np.ndarray, np.ndarray]:
    """Build the training box set: encoded ground truth first, remaining
    slots drawn standard-normal in signal space.

    Returns (signal boxes of shape (n_target, 4), boolean padding mask with
    True marking real ground-truth slots). When ground truth exceeds
    n_target a uniformly random subset is kept.
    """
    if n_target < 1:
        raise ValueError(f"n_target must be >= 1, got {n_target}")
    gt = list(gt_boxes)
    if len(gt) > n_target:
        keep = rng.choice(len(gt), size=n_target, replace=False)
        gt = [gt[i] for i in sorted(keep)]
    n_real = len(gt)
    out = rng.standard_normal((n_target, 4))
    mask = np.zeros(n_target, dtype=bool)
    if n_real:
        out[:n_real] = encode_boxes(gt, image_size, scale)
        mask[:n_real] = True
    return out, mask
