"""Objective terms: multi-class Dice and the adaptation (GAN) losses.

The adaptation objective couples two generators (g_t2s, g_s2t), three
discriminators (d_s, d_t on images, d_m on segmentation maps), and a frozen
source segmentor f_s:

    total = adv(d_t | g_s2t(x_s))                       weight 1
          + alpha   * adv(d_s | g_t2s(x_t))
          + beta    * cycle L1 (both directions)
          + gamma   * identity L1 (each generator on its own domain)
          + epsilon * adv(d_m | f_s(g_t2s(x_t)))        semantic term

with defaults {alpha, beta, gamma, epsilon} = {0.5, 10, 5, 0.5}. Generators
minimize the non-saturating -log D form; discriminators minimize
-log D(real) - log(1 - D(fake)) with fakes detached. Identity terms compare
each generator's single application to its own-domain input, so they reuse
the translation forwards and cost no extra passes.

All reductions are means over batch and voxels, so the weights are
scale-free across volume sizes. Scores are clamped to [1e-7, 1 - 1e-7]
before any log.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

SCORE_CLAMP = 1e-7
DICE_EPS = 1e-5

_PROB_SUM_TOL = 1e-3


@dataclass
class LossWeights:
    """Term weights (alpha, beta, gamma, epsilon) of the full objective."""

    alpha: float = 0.5
    beta: float = 10.0
    gamma: float = 5.0
    epsilon: float = 0.5

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class UdaBatch:
    """An unpaired adaptation batch: source images + labels, target images.

    ``y_s`` is one-hot over tissue classes, shaped like a probability map.
    """

    x_s: torch.Tensor
    x_t: torch.Tensor
    y_s: torch.Tensor

    def validate(self) -> None:
        for name, t in (("x_s", self.x_s), ("x_t", self.x_t), ("y_s", self.y_s)):
            if t.dim() != 5:
                raise ValueError(f"{name} must be (B,C,D,H,W), got {t.dim()}-D")
        if self.y_s.shape[0] != self.x_s.shape[0]:
            raise ValueError("y_s batch size must match x_s")
        if self.y_s.shape[2:] != self.x_s.shape[2:]:
            raise ValueError("y_s spatial shape must match x_s")


@dataclass
class UdaModels:
    """The five trainable adaptation networks plus the frozen segmentor."""

    g_t2s: torch.nn.Module
    g_s2t: torch.nn.Module
    d_s: torch.nn.Module
    d_t: torch.nn.Module
    d_m: torch.nn.Module
    f_s: torch.nn.Module

    def validate(self) -> None:
        for name in ("g_t2s", "g_s2t", "d_s", "d_t", "d_m", "f_s"):
            if getattr(self, name) is None:
                raise ValueError(f"missing model {name}")


def one_hot_labels(labels: torch.Tensor, n_classes: int = 4) -> torch.Tensor:
    """(B,D,H,W) integer labels -> (B,K,D,H,W) float one-hot."""
    if labels.dim() != 4:
        raise ValueError(f"labels must be (B,D,H,W), got {labels.dim()}-D")
    if int(labels.min()) < 0 or int(labels.max()) >= n_classes:
        raise ValueError(f"label values outside [0, {n_classes})")
    onehot = torch.nn.functional.one_hot(labels.long(), n_classes)
    return onehot.permute(0, 4, 1, 2, 3).contiguous().to(torch.float32)


def _check_prob_tensor(name: str, t: torch.Tensor) -> None:
    if t.dim() != 5:
        raise ValueError(f"{name} must be (B,K,D,H,W), got {t.dim()}-D")
    sums = t.detach().sum(dim=1)
    err = float((sums - 1.0).abs().max())
    if err > _PROB_SUM_TOL:
        raise ValueError(f"{name} is not normalized: class sums off by {err:.2e}")


def multiclass_dice_loss(pred: torch.Tensor, target: torch.Tensor,
                         include_background: bool = True,
                         eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice with squared denominators, averaged over classes.

    loss = 1 - mean_k (2 sum p_k g_k + eps) / (sum p_k^2 + sum g_k^2 + eps),
    sums running over batch and voxels. The eps in numerator and denominator
    makes empty classes score 1 (correctly absent) without branching.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    _check_prob_tensor("pred", pred)
    _check_prob_tensor("target", target)
    dims = (0, *range(2, pred.dim()))
    intersect = (pred * target).sum(dim=dims)
    denom = (pred ** 2).sum(dim=dims) + (target ** 2).sum(dim=dims)
    dice = (2.0 * intersect + eps) / (denom + eps)
    if not include_background:
        dice = dice[1:]
    return 1.0 - dice.mean()


def _clamped_log(scores: torch.Tensor) -> torch.Tensor:
    return torch.log(scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP))


def _clamped_log1m(scores: torch.Tensor) -> torch.Tensor:
    return torch.log1p(-scores.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP))


def adversarial_loss_discriminator(real_scores: torch.Tensor,
                                   fake_scores: torch.Tensor) -> torch.Tensor:
    """-mean log D(real) - mean log(1 - D(fake))."""
    return -_clamped_log(real_scores).mean() - _clamped_log1m(fake_scores).mean()


def adversarial_loss_generator(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: -mean log D(fake)."""
    return -_clamped_log(fake_scores).mean()


def _mean_l1(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_consistency_loss(x_t: torch.Tensor, cyc_t: torch.Tensor,
                           x_s: torch.Tensor, cyc_s: torch.Tensor) -> torch.Tensor:
    """Mean L1 of both round trips: t->s->t against x_t plus s->t->s against x_s."""
    return _mean_l1(x_t, cyc_t, "cycle t") + _mean_l1(x_s, cyc_s, "cycle s")


def identity_loss(x_s: torch.Tensor, ide_s: torch.Tensor,
                  x_t: torch.Tensor, ide_t: torch.Tensor) -> torch.Tensor:
    """Mean L1 of each generator applied once to its own domain.

    ide_s = g_s2t(x_s) compared against x_s, ide_t = g_t2s(x_t) against x_t;
    the translation outputs double as the identity terms.
    """
    return _mean_l1(x_s, ide_s, "identity s") + _mean_l1(x_t, ide_t, "identity t")


def _require_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(value)):
        raise FloatingPointError(f"loss term {name} is non-finite")
    return value


def uda_generator_objective(batch: UdaBatch, models: UdaModels,
                            weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """Full generator-side objective; returns (total, per-term breakdown).

    The breakdown maps each weighted term to its float value (they sum to
    ``total``) plus ``raw_*`` unweighted values for logging.
    """
    batch.validate()
    models.validate()
    weights.validate()

    fake_t = models.g_s2t(batch.x_s)  # source image rendered in target style
    fake_s = models.g_t2s(batch.x_t)  # target image rendered in source style
    cyc_s = models.g_t2s(fake_t)
    cyc_t = models.g_s2t(fake_s)

    raw_adv_t = _require_finite("adv_t", adversarial_loss_generator(models.d_t(fake_t)))
    raw_adv_s = _require_finite("adv_s", adversarial_loss_generator(models.d_s(fake_s)))
    raw_cycle = _require_finite(
        "cycle", cycle_consistency_loss(batch.x_t, cyc_t, batch.x_s, cyc_s))
    raw_identity = _require_finite(
        "identity", identity_loss(batch.x_s, fake_t, batch.x_t, fake_s))
    raw_semantic = _require_finite(
        "semantic", adversarial_loss_generator(models.d_m(models.f_s(fake_s))))

    total = (raw_adv_t
             + weights.alpha * raw_adv_s
             + weights.beta * raw_cycle
             + weights.gamma * raw_identity
             + weights.epsilon * raw_semantic)
    raw = {
        "raw_adv_t": float(raw_adv_t.detach()),
        "raw_adv_s": float(raw_adv_s.detach()),
        "raw_cycle": float(raw_cycle.detach()),
        "raw_identity": float(raw_identity.detach()),
        "raw_semantic": float(raw_semantic.detach()),
    }
    weighted = {
        "adv_t": raw["raw_adv_t"],
        "adv_s": weights.alpha * raw["raw_adv_s"],
        "cycle": weights.beta * raw["raw_cycle"],
        "identity": weights.gamma * raw["raw_identity"],
        "semantic": weights.epsilon * raw["raw_semantic"],
    }
    breakdown = {**weighted, **raw, "total": sum(weighted.values())}
    return total, breakdown


_DISCRIMINATORS = ("d_s", "d_t", "d_m")


def uda_discriminator_objective(which: str, batch: UdaBatch, models: UdaModels,
                                fake_override: torch.Tensor | None = None) -> torch.Tensor:
    """One discriminator's objective; fakes are detached from the generators.

    ``fake_override`` substitutes the fake input (already detached), e.g.
    when training from a replay pool of earlier translations.
    """
    if which not in _DISCRIMINATORS:
        raise ValueError(f"unknown discriminator {which!r}, expected one of {_DISCRIMINATORS}")
    batch.validate()
    models.validate()

    if which == "d_s":
        real = batch.x_s
        fake = models.g_t2s(batch.x_t) if fake_override is None else fake_override
        disc = models.d_s
    elif which == "d_t":
        real = batch.x_t
        fake = models.g_s2t(batch.x_s) if fake_override is None else fake_override
        disc = models.d_t
    else:
        real = batch.y_s
        fake = (models.f_s(models.g_t2s(batch.x_t))
                if fake_override is None else fake_override)
        disc = models.d_m

    loss = adversarial_loss_discriminator(disc(real), disc(fake.detach()))
    return _require_finite(which, loss)
