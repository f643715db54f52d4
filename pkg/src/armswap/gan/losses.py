"""Adversarial, cycle-consistency and PatchNCE objectives."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from ..errors import InvalidArgument, NumericError

ADV_MODES = ("least_squares", "nonsaturating_log")


def _finite(*ts):
    for t in ts:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite discriminator logits")


def adversarial_loss(d_real, d_fake, mode="least_squares"):
    """Return ``(loss_D, loss_G)``.

    ``nonsaturating_log`` treats the inputs as logits of D's "real"
    probability: loss_D = -(E log D(y) + E log(1 - D(G(x)))), loss_G =
    -E log D(G(x)).  ``least_squares`` uses the raw outputs:
    loss_D = E (D(y) - 1)^2 + E D(G(x))^2 and loss_G = E (D(G(x)) - 1)^2.
    """
    _finite(d_real, d_fake)
    if mode == "nonsaturating_log":
        # log sigmoid(l) and log(1 - sigmoid(l)) = log sigmoid(-l)
        loss_d = -(F.logsigmoid(d_real).mean() + F.logsigmoid(-d_fake).mean())
        loss_g = -F.logsigmoid(d_fake).mean()
    elif mode == "least_squares":
        loss_d = ((d_real - 1.0) ** 2).mean() + (d_fake**2).mean()
        loss_g = ((d_fake - 1.0) ** 2).mean()
    else:
        raise InvalidArgument(f"unknown adversarial mode {mode!r}")
    return loss_d, loss_g


def generator_adv_loss(d_fake, mode):
    _finite(d_fake)
    if mode == "nonsaturating_log":
        return -F.logsigmoid(d_fake).mean()
    return ((d_fake - 1.0) ** 2).mean()


def discriminator_loss(d_real, d_fake, mode):
    return adversarial_loss(d_real, d_fake, mode)[0]


def cycle_loss(x, x_cyc, y, y_cyc):
    if x.shape != x_cyc.shape or y.shape != y_cyc.shape:
        raise InvalidArgument("cycle loss needs matching shapes")
    return (x_cyc - x).abs().mean() + (y_cyc - y).abs().mean()


@dataclass
class PatchFeatureSet:
    """Queries, their positives and negatives; all rows L2-normalised.

    ``queries`` and ``positives`` are ``P x C``; ``negatives`` is ``P x K x C``.
    """

    queries: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor
    temperature: float = 0.07

    @classmethod
    def from_patches(cls, queries, keys, temperature=0.07):
        """Use every other sampled location of ``keys`` as the negatives of a query."""
        q = F.normalize(queries, dim=-1)
        k = F.normalize(keys, dim=-1)
        p = q.shape[0]
        if p < 2:
            raise InvalidArgument("need at least two patches to form negatives")
        off_diag = ~torch.eye(p, dtype=torch.bool)
        neg = k.unsqueeze(0).expand(p, p, -1)[off_diag].reshape(p, p - 1, -1)
        return cls(q, k, neg, temperature)


def patchnce_loss(feats: PatchFeatureSet):
    """Mean cross-entropy of the positive among {positive} + negatives at s / tau."""
    if feats.negatives.ndim != 3 or feats.negatives.shape[1] == 0:
        raise InvalidArgument("PatchNCE needs at least one negative per query")
    q = F.normalize(feats.queries, dim=-1)
    pos = F.normalize(feats.positives, dim=-1)
    neg = F.normalize(feats.negatives, dim=-1)
    l_pos = (q * pos).sum(-1, keepdim=True)
    l_neg = torch.einsum("pc,pkc->pk", q, neg)
    logits = torch.cat([l_pos, l_neg], dim=1) / feats.temperature
    target = torch.zeros(q.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target)


@dataclass
class LossBreakdown:
    terms: dict = field(default_factory=dict)
    total_G: torch.Tensor | None = None
    total_D: torch.Tensor | None = None
    fakes: tuple = (None, None)

    def scalars(self) -> dict:
        out = {k: float(v) for k, v in self.terms.items()}
        out["total_G"] = float(self.total_G)
        if self.total_D is not None:
            out["total_D"] = float(self.total_D)
        return out


def total_cyclegan_loss(batch_a, batch_b, G, F_, D_X, D_Y, cfg, pooled_fakes=None,
                        discriminator=True):
    """CycleGAN objective with G: A -> B judged by D_Y and F: B -> A judged by D_X.

    ``pooled_fakes`` optionally supplies ``(fake_a, fake_b)`` drawn from a replay
    buffer for the discriminator terms; otherwise the current fakes are used.
    ``discriminator=False`` skips the discriminator terms.
    """
    mode = cfg.adv_mode
    fake_b = G(batch_a)
    fake_a = F_(batch_b)
    rec_a = F_(fake_b)
    rec_b = G(fake_a)

    adv_ab = generator_adv_loss(D_Y(fake_b), mode)
    adv_ba = generator_adv_loss(D_X(fake_a), mode)
    cyc = cycle_loss(batch_a, rec_a, batch_b, rec_b)
    terms = {"adv_ab": adv_ab, "adv_ba": adv_ba, "cycle": cyc, "cycle_weighted": cfg.cycle_weight * cyc}
    total_g = adv_ab + adv_ba + cfg.cycle_weight * cyc
    if cfg.identity_loss_weight > 0:
        idt = (G(batch_b) - batch_b).abs().mean() + (F_(batch_a) - batch_a).abs().mean()
        terms["identity"] = idt
        total_g = total_g + cfg.identity_loss_weight * idt

    if not discriminator:
        return LossBreakdown(terms, total_g, None, fakes=(fake_a, fake_b))
    pa, pb = pooled_fakes if pooled_fakes is not None else (fake_a, fake_b)
    d_y = discriminator_loss(D_Y(batch_b), D_Y(pb.detach()), mode)
    d_x = discriminator_loss(D_X(batch_a), D_X(pa.detach()), mode)
    terms["d_x"] = d_x
    terms["d_y"] = d_y
    return LossBreakdown(terms, total_g, d_x + d_y, fakes=(fake_a, fake_b))


def total_cut_loss(batch_a, batch_b, G, D_Y, nce_head, cfg, generator=None, feats=None,
                   pooled_fake=None, discriminator=True):
    """CUT objective: adversarial term plus ``nce_weight`` times PatchNCE.

    Patch features of ``G(batch_a)`` (queries) are matched against those of
    ``batch_a`` at the same locations.  A precomputed ``feats`` list of
    :class:`PatchFeatureSet` skips feature extraction.
    """
    mode = cfg.adv_mode
    fake_b = G(batch_a)
    adv = generator_adv_loss(D_Y(fake_b), mode)
    if feats is None:
        layers = G.nce_layers()
        _, src = G.encode(batch_a, layers)
        _, tgt = G.encode(fake_b, layers)
        k_proj, ids = nce_head(src, cfg.nce_patches, generator=generator)
        q_proj, _ = nce_head(tgt, cfg.nce_patches, patch_ids=ids)
        feats = []
        for q, k in zip(q_proj, k_proj):
            for b in range(q.shape[0]):
                feats.append(PatchFeatureSet.from_patches(q[b], k[b], cfg.nce_temperature))
    nce = torch.stack([patchnce_loss(f) for f in feats]).mean()
    total_g = adv + cfg.nce_weight * nce
    terms = {"adv_ab": adv, "nce": nce, "nce_weighted": cfg.nce_weight * nce}
    if not discriminator:
        return LossBreakdown(terms, total_g, None, fakes=(None, fake_b))
    judged = pooled_fake if pooled_fake is not None else fake_b
    d_y = discriminator_loss(D_Y(batch_b), D_Y(judged.detach()), mode)
    terms["d_y"] = d_y
    return LossBreakdown(terms, total_g, d_y, fakes=(None, fake_b))
