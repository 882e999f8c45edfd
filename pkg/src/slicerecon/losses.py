"""Reconstruction metrics and training objectives.

All metrics take tensors of equal shape and reduce with a single mean over
every element, so 3-channel stacks are averaged jointly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import ConfigError, DomainError, ShapeError
from .nets import Critic, critic_forward

OBJECTIVES = ("dice", "wgan_gp", "wgan_gp_l1")
DICE_EPS = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossConfig:
    objective: str = "wgan_gp_l1"
    l1_weight: float = 100.0
    gp_lambda: float = 10.0
    critic_steps: int = 5

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.l1_weight < 0 or self.gp_lambda < 0:
            raise ConfigError("l1_weight and gp_lambda must be >= 0")
        if self.critic_steps < 1:
            raise ConfigError("critic_steps must be >= 1")

    @property
    def adversarial(self) -> bool:
        return self.objective != "dice"


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _unit_interval(*ts):
    for t in ts:
        if t.numel() and (t.min() < 0 or t.max() > 1):
            raise DomainError("values must lie in [0, 1]")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def l2_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def soft_dice_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - (2*sum(ab) + eps) / (sum(a^2) + sum(b^2) + eps)`` for inputs in [0, 1]."""
    _same_shape(a, b)
    _unit_interval(a, b)
    inter = (a * b).sum()
    denom = (a * a).sum() + (b * b).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    """Normalized 1-D Gaussian taps centered on the middle sample."""
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x, g):
    # separable valid-mode filtering of (N, 1, H, W)
    x = F.conv2d(x, g.view(1, 1, 1, -1))
    return F.conv2d(x, g.view(1, 1, -1, 1))


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean local SSIM over all valid 11x11 Gaussian windows of every 2-D plane.

    Inputs have shape ``(..., H, W)`` with values in [0, 1] (dynamic range 1).
    Local variances and covariance are Gaussian-weighted population moments.
    """
    _same_shape(a, b)
    _unit_interval(a, b)
    if a.dim() < 2:
        raise ShapeError("ssim needs at least 2-D inputs")
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DomainError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = a.reshape(-1, 1, h, w)
    y = b.reshape(-1, 1, h, w)
    g = gaussian_window(dtype=x.dtype).to(x.device)
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    var_x = _blur(x * x, g) - mu_x**2
    var_y = _blur(y * y, g) - mu_y**2
    cov = _blur(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return (num / den).mean()


def ssim_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim(a, b)


CriticFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _as_fn(critic) -> CriticFn:
    if isinstance(critic, Critic):
        return lambda cond, x: critic_forward(critic, cond, x)
    return critic


def gradient_penalty(
    critic,
    condition: torch.Tensor | None,
    real: torch.Tensor,
    fake: torch.Tensor,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean of ``(||grad critic(condition, x_hat)||_2 - 1)^2`` at random interpolates.

    One interpolation weight ``u ~ U(0, 1)`` is drawn per sample and
    ``x_hat = u*real + (1-u)*fake``. The graph is kept so the penalty can be
    back-propagated into the critic's parameters.
    """
    _same_shape(real, fake)
    fn = _as_fn(critic)
    shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    u = torch.rand(shape, generator=rng, dtype=real.dtype, device=real.device)
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    scores = fn(condition, x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss_terms(critic, condition, real, fake, gp_lambda=10.0, rng=None) -> dict:
    fn = _as_fn(critic)
    fake = fake.detach()
    fake_score = fn(condition, fake).mean()
    real_score = fn(condition, real).mean()
    gp = gradient_penalty(fn, condition, real, fake, rng) if gp_lambda else real_score.new_zeros(())
    total = fake_score - real_score + gp_lambda * gp
    return {"loss": total, "fake_score": fake_score, "real_score": real_score, "gp": gp}


def critic_loss(critic, condition, real, fake, gp_lambda: float = 10.0, rng=None) -> torch.Tensor:
    """Wasserstein critic objective plus the weighted gradient penalty (to minimize)."""
    return critic_loss_terms(critic, condition, real, fake, gp_lambda, rng)["loss"]


def generator_loss_terms(critic, condition, fake, target, cfg: LossConfig) -> dict:
    cfg.validate()
    if cfg.objective == "dice":
        dice = soft_dice_loss(fake, target)
        return {"loss": dice, "dice": dice}
    adv = -_as_fn(critic)(condition, fake).mean()
    if cfg.objective == "wgan_gp":
        return {"loss": adv, "adv": adv}
    l1 = l1_loss(fake, target)
    return {"loss": adv + cfg.l1_weight * l1, "adv": adv, "l1": l1}


def generator_loss(critic, condition, fake, target, cfg: LossConfig) -> torch.Tensor:
    """Dice, negated critic mean, or negated critic mean plus weighted l1, per ``cfg``."""
    return generator_loss_terms(critic, condition, fake, target, cfg)["loss"]


def is_finite(t: torch.Tensor) -> bool:
    return bool(torch.isfinite(t).all())
