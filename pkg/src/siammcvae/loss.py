"""Reconstruction + beta-weighted KL objective."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .vision import DegenerateMaskError, MaskSet

DEFAULT_BETA = 0.2
KL_FORMS = ("paper", "standard")


@dataclass(frozen=True)
class LossReport:
    total: T.Tensor
    recon: T.Tensor
    kl: T.Tensor
    beta: float

    def as_floats(self):
        return {"total": self.total.item(), "recon": self.recon.item(),
                "kl": self.kl.item(), "beta": self.beta}


def recon_loss(G, R, mask, grid):
    """Squared error over all entries divided by the masked entry count.

    Visible rows of a composed ``G`` equal ``R`` there, so only masked
    patches contribute. Batched inputs return the mean over items.
    """
    G, R = T.as_tensor(G), T.as_tensor(R)
    if G.shape != R.shape:
        raise ValueError(f"prediction {G.shape} and target {R.shape} differ")
    k = len(mask) if isinstance(mask, MaskSet) else len(mask[0])
    if k == 0:
        raise DegenerateMaskError("reconstruction loss needs at least one masked patch")
    items = 1 if G.ndim == 2 else G.shape[0]
    return T.scale(T.frobenius_sq(G - R), 1.0 / (grid.patch_dim * k * items))


def kl_loss(M, S, form="paper"):
    """Latent regularizer towards the unit Gaussian.

    ``paper``: (|M|^2 + |S|^2 - sum log S) / (2 n D') - 1/2, whose minimum is
    (ln 2 - 1) / 4 at M = 0, S = 1/sqrt(2). ``standard`` doubles the log term,
    giving the textbook Gaussian KL averaged per latent entry.
    """
    M, S = T.as_tensor(M), T.as_tensor(S)
    if M.shape != S.shape:
        raise ValueError(f"M {M.shape} and S {S.shape} differ")
    if form not in KL_FORMS:
        raise ValueError(f"kl form must be one of {KL_FORMS}")
    if (S.data <= 0).any():
        raise ValueError("KL loss needs strictly positive S")
    log_w = 1.0 if form == "paper" else 2.0
    logs = T.sum(T.log(S))
    num = T.frobenius_sq(M) + T.frobenius_sq(S) - T.scale(logs, log_w)
    return T.scale(num, 1.0 / (2.0 * M.size)) - 0.5


def total_loss(G, R, mask, grid, M, S, beta=DEFAULT_BETA, kl_form="paper"):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    r = recon_loss(G, R, mask, grid)
    k = kl_loss(M, S, kl_form)
    return LossReport(total=r + T.scale(k, beta), recon=r, kl=k, beta=float(beta))


def kl_minimum(form="paper"):
    """Closed-form infimum of :func:`kl_loss`."""
    if form == "paper":
        return (np.log(2.0) - 1.0) / 4.0
    return 0.0
