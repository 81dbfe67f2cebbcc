"""Loss terms and their weighted combination.

All reductions are means over batch and spatial elements, so the weights do
not depend on resolution.  Every function works in any floating dtype; the
gradient checks run them in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import torch
import torch.nn.functional as F

TASK_PRESETS = ("face", "text", "generic")


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_kl: float = 0.01
    lambda_cc: float = 10.0
    lambda_p: float = 0.1

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value >= 0:
                raise LossInputError(f"{f.name} must be nonnegative, got {value!r}")
        return self


@dataclass
class LossBreakdown:
    kl: torch.Tensor
    adv_ds: torch.Tensor
    adv_db: torch.Tensor
    cycle: torch.Tensor
    perceptual: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    TERMS = ("kl", "adv_ds", "adv_db", "cycle", "perceptual", "total")

    def as_floats(self):
        return {name: float(getattr(self, name)) for name in self.TERMS}


def _as_list(maps):
    if maps is None:
        return []
    if isinstance(maps, torch.Tensor):
        return [maps]
    return list(maps)


def kl_loss(mu, log_var=None):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over the code, averaged over the batch.

    Accepts a ``BlurPosterior`` or the two tensors.
    """
    if log_var is None:
        mu, log_var = mu.mu, mu.log_var
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise LossInputError("blur posterior contains non-finite values")
    per_item = 0.5 * (mu.pow(2) + log_var.exp() - log_var - 1.0).sum(dim=-1)
    return per_item.mean()


def adversarial_losses(real_scores, fake_scores, side):
    """GAN loss on sigmoid scores (lists of per-scale maps in (0, 1)).

    ``side="discriminator"``: mean of -[log D(real) + log(1 - D(fake))].
    ``side="generator"``: mean of -log D(fake); ``real_scores`` is ignored.
    Per-scale means are averaged over scales.
    """
    real, fake = _as_list(real_scores), _as_list(fake_scores)
    for m in fake + (real if side == "discriminator" else []):
        if not ((m > 0).all() and (m < 1).all()):
            raise LossInputError("discriminator scores must lie strictly inside (0, 1)")
    if side == "discriminator":
        if len(real) != len(fake) or not real:
            raise LossInputError("need one real and one fake score map per scale")
        terms = [-(torch.log(r).mean() + torch.log1p(-f).mean()) for r, f in zip(real, fake)]
    elif side == "generator":
        if not fake:
            raise LossInputError("no fake score maps given")
        terms = [-torch.log(f).mean() for f in fake]
    else:
        raise ValueError(f"side must be 'discriminator' or 'generator', got {side!r}")
    return torch.stack(terms).mean()


def adversarial_losses_from_logits(real_logits, fake_logits, side):
    """Same quantity as ``adversarial_losses`` evaluated on pre-sigmoid logits.

    -log sigmoid(x) = softplus(-x) and -log(1 - sigmoid(x)) = softplus(x), which
    stays finite where float32 sigmoid would round to 0 or 1.
    """
    real, fake = _as_list(real_logits), _as_list(fake_logits)
    if side == "discriminator":
        if len(real) != len(fake) or not real:
            raise LossInputError("need one real and one fake logit map per scale")
        terms = [F.softplus(-r).mean() + F.softplus(f).mean() for r, f in zip(real, fake)]
    elif side == "generator":
        if not fake:
            raise LossInputError("no fake logit maps given")
        terms = [F.softplus(-f).mean() for f in fake]
    else:
        raise ValueError(f"side must be 'discriminator' or 'generator', got {side!r}")
    return torch.stack(terms).mean()


def cycle_loss(s, s_hat, b, b_hat):
    """Mean |s - s_hat| + mean |b - b_hat|; a pair given as None contributes 0."""
    total = None
    for x, x_hat in ((s, s_hat), (b, b_hat)):
        if x is None or x_hat is None:
            continue
        if x.shape != x_hat.shape:
            raise LossInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        term = (x - x_hat).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise LossInputError("cycle loss needs at least one reconstruction pair")
    return total


def perceptual_loss(extractor, s_b, b):
    """Mean squared difference of extractor features of the deblurred image and its blurred source."""
    fa, fb = extractor(s_b), extractor(b)
    return (fa - fb).pow(2).mean()


def effective_weights(weights: LossWeights, task_preset: str = "generic") -> LossWeights:
    if task_preset not in TASK_PRESETS:
        raise LossInputError(f"task_preset must be one of {TASK_PRESETS}, got {task_preset!r}")
    if task_preset == "text":
        return replace(weights, lambda_p=0.0)
    return weights


def total_loss(kl, adv_ds, adv_db, cycle, perceptual, weights: LossWeights = LossWeights(), task_preset="generic"):
    """Weighted sum lambda_adv*(adv_ds + adv_db) + lambda_kl*kl + lambda_cc*cycle + lambda_p*perceptual.

    The text preset drops the perceptual term.
    """
    w = effective_weights(weights.validate(), task_preset)
    terms = [torch.as_tensor(t, dtype=torch.float64) if not isinstance(t, torch.Tensor) else t
             for t in (kl, adv_ds, adv_db, cycle, perceptual)]
    for name, t in zip(LossBreakdown.TERMS, terms):
        if not torch.isfinite(t).all():
            raise LossInputError(f"loss term {name} is not finite")
    kl, adv_ds, adv_db, cycle, perceptual = terms
    total = w.lambda_adv * (adv_ds + adv_db) + w.lambda_kl * kl + w.lambda_cc * cycle
    if w.lambda_p:
        total = total + w.lambda_p * perceptual
    return LossBreakdown(kl, adv_ds, adv_db, cycle, perceptual, total, w)
