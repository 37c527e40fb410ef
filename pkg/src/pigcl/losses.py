"""Contrastive objectives and the information-theoretic diagnostic layer.

The per-node contrastive loss is -log kappa with
kappa = l_pos / (l_pos + l_neg), where l_pos exponentiates the temperature-
scaled cosine similarity between a node's two views and l_neg sums the
exponentiated similarities to every other node (within the anchor view and
across views by default).

The diagnostic layer views each node through a zero-mean Gaussian auxiliary
variable whose variance is exp(per-node loss) = 1/kappa: a smaller loss means
a tighter Gaussian and therefore a lower task entropy. The per-node integral
of p*log(p) for that Gaussian has the closed form

    log(C) + 0.5*log(kappa) - 0.5,      C = 1/sqrt(2*pi),

with C a constant independent of every learnable parameter; maximizing the
average of these terms is the same as minimizing the contrastive loss, which
is exactly why training on a fixed augmentation is the point-estimate special
case of training a noise generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_C = -0.5 * np.log(2.0 * np.pi)  # log of the closed-form constant 1/sqrt(2*pi)

NEGATIVES_MODES = ("intra_and_inter", "inter_view_only")


@dataclass
class LossConfig:
    tau: float = 0.3
    negatives_mode: str = "intra_and_inter"
    symmetrize: bool = False
    similarity: str = "cosine"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.negatives_mode not in NEGATIVES_MODES:
            raise ValueError(f"negatives_mode must be one of {NEGATIVES_MODES}")
        if self.similarity != "cosine":
            raise ValueError("only cosine similarity is supported")


@dataclass
class KappaValue:
    """Per-node positive-mass ratio and its ingredients."""

    kappa: np.ndarray
    l_pos: np.ndarray
    l_neg: np.ndarray

    @property
    def per_node_loss(self) -> np.ndarray:
        return -np.log(self.kappa)


def pos_neg_terms(z, z_eps, tau: float,
                  negatives_mode: str = "intra_and_inter") -> tuple[Tensor, Tensor]:
    """Per-node positive and negative terms over all anchors at once.

    l_pos[u] = exp(cos(z_u, z_eps_u) / tau); l_neg[u] sums exp(cos/tau) over
    all v != u in the augmented view, plus the anchor view itself under
    ``intra_and_inter``. Zero-norm embedding rows are rejected (degenerate
    embedding) in strict mode.
    """
    if negatives_mode not in NEGATIVES_MODES:
        raise ValueError(f"negatives_mode must be one of {NEGATIVES_MODES}")
    zn = ad.row_l2_normalize(z if isinstance(z, Tensor) else Tensor(z))
    zen = ad.row_l2_normalize(z_eps if isinstance(z_eps, Tensor) else Tensor(z_eps))
    # positives from row-wise dots; the n x n matrices appear only for the
    # negative sums, and their diagonals are removed by subtraction
    l_pos = ad.exp_scaled(ad.sum_(ad.mul(zn, zen), axis=1), 1.0 / tau)
    e_inter = ad.exp_scaled(ad.matmul(zn, ad.transpose(zen)), 1.0 / tau)
    l_neg = ad.sub(ad.sum_(e_inter, axis=1), l_pos)
    if negatives_mode == "intra_and_inter":
        e_intra = ad.exp_scaled(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)
        self_sim = ad.exp_scaled(ad.sum_(ad.mul(zn, zn), axis=1), 1.0 / tau)
        l_neg = ad.add(l_neg, ad.sub(ad.sum_(e_intra, axis=1), self_sim))
    return l_pos, l_neg


def nce_from_terms(l_pos: Tensor, l_neg: Tensor) -> Tensor:
    """Mean over nodes of -log(l_pos / (l_pos + l_neg)); strictly positive."""
    return ad.mean(ad.sub(ad.log(ad.add(l_pos, l_neg)), ad.log(l_pos)))


def infonce_loss(z, z_aug, tau: float,
                 negatives_mode: str = "intra_and_inter") -> Tensor:
    l_pos, l_neg = pos_neg_terms(z, z_aug, tau, negatives_mode)
    return nce_from_terms(l_pos, l_neg)


def pi_noise_loss(z, z_eps, tau: float,
                  negatives_mode: str = "intra_and_inter",
                  symmetrize: bool = False) -> Tensor:
    """Contrastive loss against a generated noisy view.

    Arithmetic is identical to ``infonce_loss`` on the (original, noisy)
    pair; what changes is where the augmented embeddings come from. When the
    noisy view is produced by the noise generators, gradients flow through
    this loss to both the encoder and the generator parameters, which turns
    the fixed-augmentation point estimate into a trained noise distribution.
    The expectation over noise is estimated from the sampled view (a
    single-sample Monte Carlo estimate per call).
    """
    loss = infonce_loss(z, z_eps, tau, negatives_mode)
    if symmetrize:
        rev = infonce_loss(z_eps, z, tau, negatives_mode)
        loss = ad.scale_by_constant(ad.add(loss, rev), 0.5)
    return loss


def kappa(l_pos, l_neg) -> KappaValue:
    """Per-node ratio l_pos / (l_pos + l_neg), in (0, 1) whenever l_neg > 0."""
    l_pos = np.asarray(l_pos.values if isinstance(l_pos, Tensor) else l_pos, dtype=np.float64)
    l_neg = np.asarray(l_neg.values if isinstance(l_neg, Tensor) else l_neg, dtype=np.float64)
    if np.any(l_pos <= 0.0) or np.any(l_neg <= 0.0):
        raise ValueError("kappa requires strictly positive l_pos and l_neg")
    return KappaValue(kappa=l_pos / (l_pos + l_neg), l_pos=l_pos, l_neg=l_neg)


def gaussian_entropy(variance) -> float | np.ndarray:
    """Differential entropy of N(0, variance): 0.5 * ln(2*pi*e*variance)."""
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance <= 0.0):
        raise ValueError("gaussian_entropy requires positive variance")
    out = 0.5 * np.log(2.0 * np.pi * np.e * variance)
    return float(out) if out.ndim == 0 else out


def task_entropy(per_node_losses) -> float:
    """Mean entropy of the per-node Gaussians with variance exp(loss).

    With loss = -log kappa this variance is exactly 1/kappa, so the two ways
    of writing the variance coincide.
    """
    losses = np.asarray(per_node_losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("task_entropy requires finite per-node losses")
    return float(np.mean(gaussian_entropy(np.exp(losses))))


def per_node_entropy_term(kappa_values) -> np.ndarray:
    """Closed form of the integral of p*log(p) for N(0, 1/kappa) per node.

    The formula holds for any positive precision; values produced by the
    contrastive loss always lie in (0, 1).
    """
    k = np.asarray(kappa_values, dtype=np.float64)
    if np.any(k <= 0.0):
        raise ValueError("kappa values must be positive")
    return LOG_C + 0.5 * np.log(k) - 0.5


def neg_conditional_entropy(z, z_eps, tau: float,
                            negatives_mode: str = "intra_and_inter") -> float:
    """Monte-Carlo estimate of -H(task | noise) from one noisy view.

    Averages the per-node closed-form terms log(C) + 0.5*log(kappa) - 0.5.
    Monotone in the summed log(kappa), so maximizing it is minimizing the
    contrastive loss up to constants.
    """
    zv = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    zev = z_eps.values if isinstance(z_eps, Tensor) else np.asarray(z_eps, dtype=np.float64)
    l_pos, l_neg = pos_neg_terms(Tensor(zv), Tensor(zev), tau, negatives_mode)
    kv = kappa(l_pos, l_neg)
    return float(np.mean(per_node_entropy_term(kv.kappa)))
