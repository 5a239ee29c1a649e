"""Noise schedule, denoiser oracles, and score-distillation gradients.

The denoiser prior is an interface (`DenoiserOracle`); the analytic
`GaussianMixtureOracle` realizes it exactly for a Gaussian mixture, which makes
the mode-seeking behaviour of score distillation testable without any
pretrained network. The rectified gradient combines an inpainting-conditioned
oracle query with an unconditional one, splitting the plain SDS objective into
a render-to-rectified pull and a rectified-to-prior pull.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import DegenerateMixture, DimensionMismatch, InvalidBetaRange, TimestepOutOfRange
from .warp import WarpResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray
    t_min: int
    t_max: int

    @property
    def steps(self) -> int:
        return len(self.betas)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.steps:
            raise TimestepOutOfRange(f"t={t} outside [0, {self.steps})")
        return t

    def sample_t(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.t_min, self.t_max + 1))


def make_schedule(
    steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    omega_mode: str = "one_minus_abar",
    t_range: tuple[float, float] = (0.02, 0.98),
) -> NoiseSchedule:
    """Linear-beta schedule; omega defaults to the standard 1 - alpha_bar weighting."""
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidBetaRange(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, steps)
    alpha_bar = np.cumprod(1.0 - betas)
    if omega_mode == "one_minus_abar":
        omega = 1.0 - alpha_bar
    elif omega_mode == "unit":
        omega = np.ones(steps)
    else:
        raise ValueError(f"unknown omega_mode {omega_mode!r}")
    gamma = np.sqrt(1.0 - alpha_bar) / np.sqrt(alpha_bar)
    t_min = int(round(t_range[0] * steps))
    t_max = min(int(round(t_range[1] * steps)), steps - 1)
    if not 0 <= t_min < t_max:
        raise ValueError("invalid timestep sampling range")
    return NoiseSchedule(betas, alpha_bar, omega, gamma, t_min, t_max)


def add_noise(schedule: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    t = schedule.check_t(t)
    a = schedule.alpha_bar[t]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def predict_x0(schedule: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray, t: int) -> np.ndarray:
    t = schedule.check_t(t)
    a = schedule.alpha_bar[t]
    return (x_t - np.sqrt(1.0 - a) * eps_hat) / np.sqrt(a)


@dataclass(frozen=True)
class InpaintCondition:
    """Observed image content restricted to a binary mask."""

    masked_image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.masked_image)):
            raise DegenerateMixture("inpaint condition contains non-finite values")


@runtime_checkable
class DenoiserOracle(Protocol):
    stateless: bool

    def predict_noise(
        self, x_t: np.ndarray, t: int, condition: InpaintCondition | None, guidance: float
    ) -> np.ndarray: ...


def _logsumexp(v: np.ndarray) -> float:
    m = float(np.max(v))
    if not np.isfinite(m):
        return m
    return m + float(np.log(np.sum(np.exp(v - m))))


@dataclass
class GaussianMixtureOracle:
    """Exact denoiser for an isotropic Gaussian mixture prior.

    Component k noised at time t is N(sqrt(abar_t) m_k, (abar_t s^2 + 1-abar_t) I);
    the returned prediction is -sqrt(1-abar_t) times the exact marginal score.
    Guidance sharpens posterior responsibilities by exponentiation; an inpaint
    condition reweights components by the likelihood of the observed pixels.
    """

    means: np.ndarray
    cov_scale: float
    weights: np.ndarray
    schedule: NoiseSchedule
    stateless: bool = True

    def __post_init__(self):
        k = self.means.shape[0]
        self.means = np.asarray(self.means, dtype=np.float64).reshape(k, -1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(k)
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        self.weights = self.weights / self.weights.sum()
        if not np.all(np.isfinite(self.means)):
            raise ValueError("mixture means must be finite")
        self.last_degenerate = False

    @classmethod
    def from_images(
        cls, images: list[np.ndarray], cov_scale: float, schedule: NoiseSchedule, weights=None
    ) -> "GaussianMixtureOracle":
        means = np.stack([np.asarray(im, dtype=np.float64).ravel() for im in images])
        if weights is None:
            weights = np.full(len(images), 1.0 / len(images))
        return cls(means, cov_scale, np.asarray(weights, dtype=np.float64), schedule)

    def condition_log_weights(self, condition: InpaintCondition | None) -> np.ndarray:
        """Log component weights after reweighting by the observed-pixel likelihood."""
        logw = np.log(self.weights)
        self.last_degenerate = False
        if condition is None:
            return logw
        mask = np.asarray(condition.mask, dtype=bool).ravel()
        if mask.shape[0] != self.means.shape[1]:
            raise DimensionMismatch("condition mask does not match mixture dimensionality")
        if not mask.any():
            return logw
        obs = np.asarray(condition.masked_image, dtype=np.float64).ravel()[mask]
        diff = obs[None, :] - self.means[:, mask]
        loglik = -np.sum(diff * diff, axis=1) / (2.0 * self.cov_scale**2)
        out = logw + loglik
        if not np.isfinite(_logsumexp(out)):
            log.warning("all reweighted mixture weights underflowed; falling back to uniform")
            self.last_degenerate = True
            return np.full_like(logw, -np.log(len(logw)))
        return out

    def responsibilities(
        self, x_t: np.ndarray, t: int, condition: InpaintCondition | None, guidance: float
    ) -> np.ndarray:
        t = self.schedule.check_t(t)
        a = self.schedule.alpha_bar[t]
        var = a * self.cov_scale**2 + (1.0 - a)
        flat = np.asarray(x_t, dtype=np.float64).ravel()
        diff = flat[None, :] - np.sqrt(a) * self.means
        logits = self.condition_log_weights(condition) - np.sum(diff * diff, axis=1) / (2.0 * var)
        logits = guidance * (logits - logits.max())
        r = np.exp(logits)
        return r / r.sum()

    def predict_noise(
        self, x_t: np.ndarray, t: int, condition: InpaintCondition | None = None, guidance: float = 1.0
    ) -> np.ndarray:
        t = self.schedule.check_t(t)
        a = self.schedule.alpha_bar[t]
        var = a * self.cov_scale**2 + (1.0 - a)
        shape = np.shape(x_t)
        flat = np.asarray(x_t, dtype=np.float64).ravel()
        r = self.responsibilities(flat, t, condition, guidance)
        posterior_mean = r @ self.means
        eps_hat = np.sqrt(1.0 - a) * (flat - np.sqrt(a) * posterior_mean) / var
        return eps_hat.reshape(shape)


def sds_grad(
    x0: np.ndarray,
    prior: DenoiserOracle,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    guidance: float = 1.0,
) -> np.ndarray:
    """One-sample score-distillation gradient omega(t) * (eps_hat - eps) w.r.t. x0.

    The oracle output is a stop-gradient: nothing is differentiated through it.
    """
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    t = schedule.sample_t(rng)
    eps = rng.standard_normal(np.shape(x0))
    x_t = add_noise(schedule, x0, t, eps)
    eps_hat = prior.predict_noise(x_t, t, None, guidance)
    return schedule.omega[t] * (eps_hat - eps)


@dataclass(frozen=True)
class GuidedGradDiagnostics:
    """Per-draw byproducts of the rectified gradient, for logging and tests."""

    t: int
    g1: np.ndarray           # omega * (eps_rectified - eps)
    g2: np.ndarray           # omega * (eps_prior - eps_rectified)
    eps: np.ndarray
    x_t: np.ndarray
    eps_rectified: np.ndarray
    eps_prior: np.ndarray


def guided_score_grad(
    x0: np.ndarray,
    warp: WarpResult,
    prior: DenoiserOracle,
    rectified: DenoiserOracle,
    schedule: NoiseSchedule,
    eta_r: float,
    rng: np.random.Generator,
    guidance: float = 1.0,
    share_draw: bool = True,
    literal_split_weighting: bool = False,
) -> tuple[np.ndarray, GuidedGradDiagnostics]:
    """Warp-rectified score-distillation gradient w.r.t. the rendered pseudo image.

    One shared (t, eps, x_t) draw feeds both oracle queries: the rectified
    oracle sees the inpaint condition built from the warped seen-view content,
    the prior is queried unconditionally. The returned gradient is

        g1 + eta_r * g2         (default)
        eta_r * g1 + g2         (literal_split_weighting=True)

    with g1 = omega (eps_rectified - eps) and g2 = omega (eps_prior - eps_rectified).
    The default places eta_r on the rectified-to-prior pull; the printed form of
    the two-KL split weights g1 instead, but that weighting provably mode-seeks
    away from the warp-identified target (see the mode-demo experiment), so the
    stable weighting is the default and the printed one stays behind this flag.
    """
    if eta_r < 0:
        raise ValueError("eta_r must be >= 0")
    if np.shape(x0)[:2] != warp.mask.shape:
        raise DimensionMismatch("warp mask does not match rendered image dimensions")
    cond = InpaintCondition(
        masked_image=warp.warped_image * warp.mask[:, :, None],
        mask=np.repeat(warp.mask[:, :, None], np.shape(x0)[2], axis=2),
    )
    t = schedule.sample_t(rng)
    eps = rng.standard_normal(np.shape(x0))
    x_t = add_noise(schedule, x0, t, eps)
    eps_phi = rectified.predict_noise(x_t, t, cond, guidance)
    if share_draw:
        eps_star = prior.predict_noise(x_t, t, None, guidance)
        g2 = schedule.omega[t] * (eps_star - eps_phi)
    else:
        t2 = schedule.sample_t(rng)
        eps2 = rng.standard_normal(np.shape(x0))
        x_t2 = add_noise(schedule, x0, t2, eps2)
        eps_star = prior.predict_noise(x_t2, t2, None, guidance)
        g2 = schedule.omega[t2] * (eps_star - rectified.predict_noise(x_t2, t2, cond, guidance))
    g1 = schedule.omega[t] * (eps_phi - eps)
    if literal_split_weighting:
        grad = eta_r * g1 + g2
    else:
        grad = g1 + eta_r * g2
    return grad, GuidedGradDiagnostics(t, g1, g2, eps, x_t, eps_phi, eps_star)


def guided_score_loss_frozen(
    x0_eval: np.ndarray,
    diag: GuidedGradDiagnostics,
    schedule: NoiseSchedule,
    eta_r: float,
    literal_split_weighting: bool = False,
) -> float:
    """Scalar loss whose x0-gradient (oracle outputs frozen) is guided_score_grad.

    The denoised estimates from the recorded draw are held constant; the
    render-to-rectified term is then a quadratic pulling x0 toward the rectified
    estimate and the rectified-to-prior term is linear in x0, both carrying the
    omega/gamma weight of the x0-space gradient form.
    """
    t = diag.t
    w = schedule.omega[t] / schedule.gamma[t]
    x0_flat = np.asarray(x0_eval, dtype=np.float64).ravel()
    xhat_phi = predict_x0(schedule, diag.x_t.ravel(), diag.eps_rectified.ravel(), t)
    xhat_star = predict_x0(schedule, diag.x_t.ravel(), diag.eps_prior.ravel(), t)
    quad = 0.5 * w * float(np.sum((x0_flat - xhat_phi) ** 2))
    lin = w * float((xhat_phi - xhat_star) @ x0_flat)
    if literal_split_weighting:
        return eta_r * quad + lin
    return quad + eta_r * lin


def ancestral_sample(
    oracle: DenoiserOracle,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    condition: InpaintCondition | None = None,
    guidance: float = 1.0,
    steps: int | None = None,
) -> np.ndarray:
    """DDPM ancestral sampling, optionally respaced to a smaller step count."""
    ts = np.arange(schedule.steps - 1, -1, -1)
    if steps is not None and steps < schedule.steps:
        ts = np.unique(np.linspace(0, schedule.steps - 1, steps).round().astype(int))[::-1]
    x = rng.standard_normal(shape)
    abar = schedule.alpha_bar
    for i, t in enumerate(ts):
        prev = ts[i + 1] if i + 1 < len(ts) else -1
        a_t = abar[t]
        a_prev = abar[prev] if prev >= 0 else 1.0
        beta_eff = 1.0 - a_t / a_prev
        eps_hat = oracle.predict_noise(x, int(t), condition, guidance)
        mean = (x - beta_eff / np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(1.0 - beta_eff)
        if prev >= 0:
            sigma = np.sqrt(beta_eff * (1.0 - a_prev) / (1.0 - a_t))
            x = mean + sigma * rng.standard_normal(shape)
        else:
            x = mean
    return x
