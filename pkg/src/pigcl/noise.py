"""Learnable noise generators and construction of the noisy graph view.

Topological noise: a two-layer MLP maps the concatenated endpoint features of
each canonical undirected edge to two logits (keep, drop). The drop
probability is the softmax mass on the drop logit, and keep/drop decisions
are sampled with a two-category Gumbel-Softmax. The straight-through variant
exposes a hard 0/1 decision on the forward pass while gradients follow the
relaxed sample, so the generator trains through the sampled graph.

Attribute noise: two MLPs map node features to a mean vector and a log
standard deviation (diagonal covariance, which keeps the parameter count
linear in the feature dimension). Samples are drawn by reparameterization,
noise = mu + sigma * eps with eps ~ N(0, I) frozen per draw, so gradients
reach both generator MLPs.

Both directed entries of an undirected edge always receive the identical
keep decision, and self-loops are never dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SparseCSR, Tensor
from .encoder import glorot
from .graph import Graph, normalize

log = logging.getLogger(__name__)

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 2.0


@dataclass
class EdgeGenParams:
    """Two-layer MLP over concatenated endpoint features; output width exactly 2."""

    w1: Tensor  # [2*feat_dim, hidden]
    b1: Tensor  # [hidden]
    w2: Tensor  # [hidden, 2] -> (keep, drop) logits
    b2: Tensor  # [2]

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class AttrGenParams:
    """Two MLPs estimating the mean and the log-sigma of the feature noise."""

    mu_w1: Tensor
    mu_b1: Tensor
    mu_w2: Tensor
    mu_b2: Tensor
    sig_w1: Tensor
    sig_b1: Tensor
    sig_w2: Tensor
    sig_b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.mu_w1, self.mu_b1, self.mu_w2, self.mu_b2,
                self.sig_w1, self.sig_b1, self.sig_w2, self.sig_b2]


@dataclass
class NoiseSample:
    """One realization of the joint noise; either side may be absent (None)."""

    edge_keep: Tensor | None = None        # decision used downstream (hard ST or relaxed)
    edge_keep_soft: Tensor | None = None   # relaxed Gumbel-Softmax keep weight in (0,1)
    edge_keep_hard: np.ndarray | None = None  # 0/1 decisions (forward values of ST)
    edge_drop_prob: Tensor | None = None   # Bernoulli drop parameter per undirected edge
    attr_mu: Tensor | None = None
    attr_sigma: Tensor | None = None
    attr_eps_hat: np.ndarray | None = None
    attr_noise: Tensor | None = None


def init_edge_gen(seed: int, feat_dim: int, hidden: int = 64) -> EdgeGenParams:
    rng = np.random.default_rng(seed)
    return EdgeGenParams(
        w1=Tensor(glorot(rng, 2 * feat_dim, hidden), name="edge_gen.w1"),
        b1=Tensor(np.zeros(hidden), name="edge_gen.b1"),
        w2=Tensor(glorot(rng, hidden, 2), name="edge_gen.w2"),
        b2=Tensor(np.zeros(2), name="edge_gen.b2"),
    )


def init_attr_gen(seed: int, feat_dim: int, hidden: int = 64) -> AttrGenParams:
    rng = np.random.default_rng(seed)
    return AttrGenParams(
        mu_w1=Tensor(glorot(rng, feat_dim, hidden), name="attr_gen.mu_w1"),
        mu_b1=Tensor(np.zeros(hidden), name="attr_gen.mu_b1"),
        mu_w2=Tensor(glorot(rng, hidden, feat_dim), name="attr_gen.mu_w2"),
        mu_b2=Tensor(np.zeros(feat_dim), name="attr_gen.mu_b2"),
        sig_w1=Tensor(glorot(rng, feat_dim, hidden), name="attr_gen.sig_w1"),
        sig_b1=Tensor(np.zeros(hidden), name="attr_gen.sig_b1"),
        sig_w2=Tensor(glorot(rng, hidden, feat_dim), name="attr_gen.sig_w2"),
        sig_b2=Tensor(np.zeros(feat_dim), name="attr_gen.sig_b2"),
    )


def _edge_mlp_logits(g: Graph, params: EdgeGenParams, x) -> Tensor:
    """Logits [E, 2] from concat(x_u, x_v) per canonical edge, computed as two
    weight blocks so no column concatenation is needed."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    d = g.feat_dim
    xu = ad.row_gather(x, g.edge_u)
    xv = ad.row_gather(x, g.edge_v)
    w_top = ad.row_gather(params.w1, np.arange(d))
    w_bot = ad.row_gather(params.w1, np.arange(d, 2 * d))
    h = ad.relu(ad.add(ad.add(ad.matmul(xu, w_top), ad.matmul(xv, w_bot)), params.b1))
    return ad.add(ad.matmul(h, params.w2), params.b2)


def edge_drop_probs(g: Graph, params: EdgeGenParams, x=None) -> Tensor:
    """Drop probability per canonical undirected edge: softmax mass on the drop
    logit, i.e. sigmoid(logit_drop - logit_keep). Symmetric by construction
    because each undirected edge is scored once (u < v)."""
    if g.num_edges == 0:
        raise ValueError("edge_drop_probs: graph has no edges")
    logits = _edge_mlp_logits(g, params, g.features if x is None else x)
    diff = ad.reshape(ad.matmul(logits, np.array([[-1.0], [1.0]])), (g.num_edges,))
    return ad.sigmoid(diff)


def gumbel_draws(shape, seed: int) -> np.ndarray:
    """Standard Gumbel noise, deterministic per seed; frozen w.r.t. parameters."""
    u = np.random.default_rng(seed).random(shape)
    return -np.log(-np.log(u + 1e-20) + 1e-20)


def sample_edge_noise(drop_probs: Tensor, temperature: float, seed: int,
                      hard: bool = True) -> tuple[Tensor, Tensor, np.ndarray]:
    """Two-category Gumbel-Softmax over (keep, drop).

    Returns ``(keep, keep_soft, keep_hard)``: the decision to use downstream
    (straight-through when ``hard``, otherwise the relaxed weight), the relaxed
    keep weight in (0, 1), and the hard 0/1 forward values. The hard decision
    is the argmax of the Gumbel-perturbed log-probabilities, which makes the
    drop frequency exactly Bernoulli(drop_prob) at any temperature.
    """
    if temperature <= 0:
        raise ValueError("gumbel temperature must be positive")
    drop_probs = drop_probs if isinstance(drop_probs, Tensor) else Tensor(drop_probs)
    e = drop_probs.values.shape[0]
    gumbels = gumbel_draws((e, 2), seed)
    p = ad.clamp(drop_probs, ad.EPS_NUM, 1.0 - ad.EPS_NUM)
    log_keep = ad.log(ad.sub(1.0, p))
    log_drop = ad.log(p)
    # keep-vs-drop margin of the perturbed logits
    margin = ad.add(ad.sub(log_keep, log_drop), gumbels[:, 0] - gumbels[:, 1])
    keep_soft = ad.sigmoid(ad.scale_by_constant(margin, 1.0 / temperature))
    keep_hard = (margin.values > 0.0).astype(np.float64)
    if hard:
        keep = ad.straight_through(keep_hard, keep_soft)
    else:
        keep = keep_soft
    return keep, keep_soft, keep_hard


def sample_attr_noise(x, params: AttrGenParams, seed: int) -> tuple[Tensor, Tensor, np.ndarray, Tensor]:
    """Draw attribute noise mu + sigma * eps with eps ~ N(0, I) frozen.

    Returns (mu, sigma, eps_hat, noise). sigma = exp(clamped log-sigma) is
    strictly positive; the clamp guards against variance collapse/explosion.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    n, d = x.values.shape

    def mlp(w1, b1, w2, b2):
        h = ad.relu(ad.add(ad.matmul(x, w1), b1))
        return ad.add(ad.matmul(h, w2), b2)

    mu = mlp(params.mu_w1, params.mu_b1, params.mu_w2, params.mu_b2)
    log_sigma = ad.clamp(mlp(params.sig_w1, params.sig_b1, params.sig_w2, params.sig_b2),
                         LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    sigma = ad.exp(log_sigma)
    eps_hat = np.random.default_rng(seed).normal(size=(n, d))
    noise = ad.add(mu, ad.mul(sigma, eps_hat))
    return mu, sigma, eps_hat, noise


def generate_noise(g: Graph, edge_params: EdgeGenParams | None,
                   attr_params: AttrGenParams | None, seed: int,
                   temperature: float = 1.0, hard: bool = True) -> NoiseSample:
    """One joint noise realization; seeds for the two sides are decorrelated."""
    sample = NoiseSample()
    seeds = np.random.SeedSequence(seed).spawn(2)
    if edge_params is not None:
        probs = edge_drop_probs(g, edge_params)
        edge_seed = int(seeds[0].generate_state(1)[0])
        keep, keep_soft, keep_hard = sample_edge_noise(probs, temperature, edge_seed, hard=hard)
        sample.edge_drop_prob = probs
        sample.edge_keep = keep
        sample.edge_keep_soft = keep_soft
        sample.edge_keep_hard = keep_hard
    if attr_params is not None:
        attr_seed = int(seeds[1].generate_state(1)[0])
        mu, sigma, eps_hat, noise = sample_attr_noise(g.features, attr_params, attr_seed)
        sample.attr_mu = mu
        sample.attr_sigma = sigma
        sample.attr_eps_hat = eps_hat
        sample.attr_noise = noise
    return sample


def noisy_normalized_adjacency(g: Graph, keep: Tensor) -> SparseCSR:
    """Differentiable D̃^{-1/2}(A_masked + I)D̃^{-1/2} for per-edge keep weights.

    Mirrors graph.masked_hat_values operation for operation: an all-ones keep
    vector reproduces normalize(g) bit for bit. Self-loops are always kept.
    """
    plan = g.plan
    n = g.num_nodes
    deg_u = ad.index_add(keep, g.edge_u, n)
    deg_v = ad.index_add(keep, g.edge_v, n)
    d_tilde = ad.add(ad.add(deg_u, deg_v), 1.0)
    dinv = ad.power_const(d_tilde, -0.5)
    du = ad.row_gather(dinv, g.edge_u)
    dv = ad.row_gather(dinv, g.edge_v)
    vals_und = ad.mul(ad.mul(keep, du), dv)
    diag = ad.mul(dinv, dinv)
    values = ad.add(ad.add(ad.put(vals_und, plan.pos_uv, plan.nnz),
                           ad.put(vals_und, plan.pos_vu, plan.nnz)),
                    ad.put(diag, plan.pos_diag, plan.nnz))
    return SparseCSR((n, n), plan.indptr, plan.indices, values, symmetric=True)


def apply_noise(g: Graph, sample: NoiseSample) -> tuple[SparseCSR, Tensor]:
    """Assemble the noisy view (Â_eps, X_eps) from a noise sample.

    A missing side leaves that component untouched. If every edge was dropped
    the view degenerates to self-loops only, which is valid but logged.
    """
    if sample.attr_noise is not None:
        x_eps = ad.add(Tensor(g.features), sample.attr_noise)
    else:
        x_eps = Tensor(g.features)
    if sample.edge_keep is not None:
        if sample.edge_keep_hard is not None and not np.any(sample.edge_keep_hard):
            log.warning("all %d edges dropped; noisy view has self-loops only", g.num_edges)
        a_eps = noisy_normalized_adjacency(g, sample.edge_keep)
    else:
        a_eps = normalize(g)
    return a_eps, x_eps


# ---------------------------------------------------------------------------
# exports for external inspection/rendering of the learned topological noise

def export_edge_noise_tsv(path, g: Graph, drop_probs: np.ndarray, kept: np.ndarray) -> None:
    """Columns (u, v, drop_prob, kept) per canonical undirected edge."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("u\tv\tdrop_prob\tkept\n")
        for u, v, p, k in zip(g.edge_u.tolist(), g.edge_v.tolist(),
                              np.asarray(drop_probs).tolist(), np.asarray(kept).tolist()):
            f.write(f"{u}\t{v}\t{p:.6f}\t{int(k)}\n")


def export_edge_noise_dot(path, g: Graph, drop_probs: np.ndarray) -> None:
    """Graphviz export; edge pen width scales with the learned keep weight."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["graph noise {"]
    labels = g.labels if g.labels is not None else np.zeros(g.num_nodes, dtype=np.int64)
    for u in range(g.num_nodes):
        lines.append(f'  {u} [label="{u}" class="c{int(labels[u])}"];')
    for u, v, p in zip(g.edge_u.tolist(), g.edge_v.tolist(), np.asarray(drop_probs).tolist()):
        width = 0.2 + 2.8 * (1.0 - p)
        style = "dashed" if labels[u] != labels[v] else "solid"
        lines.append(f"  {u} -- {v} [penwidth={width:.2f} style={style}];")
    lines.append("}")
    path.write_text("\n".join(lines) + "\n")
