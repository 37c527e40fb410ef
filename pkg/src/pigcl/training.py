"""Joint training of the encoder and the noise generators.

Each epoch draws one fresh noise realization (a single-sample Monte Carlo
estimate of the expected contrastive loss under the noise distribution),
builds the noisy view, encodes both views with the shared encoder, and steps
three Adam optimizers (encoder, edge generator, attribute generator) on the
same loss. Under ``none``/``random`` augmentation modes the corresponding
generator and its optimizer simply do not exist.

Everything is deterministic given (graph, config): per-epoch noise seeds are
derived from the config seed, so a rerun reproduces the diagnostics trace
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from . import noise as nz
from .autodiff import SparseCSR, Tape, Tensor
from .encoder import Dims, EncoderParams, encode, init_params, project
from .graph import Graph, masked_hat_values, normalize

AUG_MODES = ("none", "random", "learnable")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch and the last good parameters."""

    def __init__(self, epoch: int, last_good: dict[str, np.ndarray]):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 200
    lr_encoder: float = 5e-4
    wd_encoder: float = 1e-4
    lr_edge_gen: float = 1e-4
    lr_attr_gen: float = 1e-3
    wd_gens: float = 1e-4
    tau: float = 0.3
    seed: int = 0
    aug_mode_edge: str = "learnable"
    aug_mode_feat: str = "learnable"
    random_drop_rate: float = 0.3
    random_mask_rate: float = 0.3
    gumbel_temperature: float = 1.0
    gumbel_anneal: bool = False  # linear anneal to 0.5 over the run
    samples_per_epoch: int = 1
    negatives_mode: str = "intra_and_inter"
    symmetrize: bool = False
    contrast_on_projection: bool = True
    row_normalize_features: bool = False
    dims: Dims = field(default_factory=Dims)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr_encoder", "lr_edge_gen", "lr_attr_gen"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("wd_encoder", "wd_gens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("random_drop_rate", "random_mask_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.aug_mode_edge not in AUG_MODES or self.aug_mode_feat not in AUG_MODES:
            raise ValueError(f"augmentation modes must be one of {AUG_MODES}")
        if self.tau <= 0 or self.gumbel_temperature <= 0:
            raise ValueError("tau and gumbel_temperature must be positive")
        if self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be >= 1")
        if self.negatives_mode not in losses.NEGATIVES_MODES:
            raise ValueError(f"negatives_mode must be one of {losses.NEGATIVES_MODES}")


@dataclass
class TrainResult:
    encoder: EncoderParams
    trace: list[dict]
    edge_gen: nz.EdgeGenParams | None = None
    attr_gen: nz.AttrGenParams | None = None


def derive_seed(base: int, *key: int) -> int:
    """Deterministic child seed for an integer stream key."""
    return int(np.random.SeedSequence(base, spawn_key=tuple(key)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(tensors: list[Tensor]) -> AdamState:
    return AdamState(m=[np.zeros_like(t.values) for t in tensors],
                     v=[np.zeros_like(t.values) for t in tensors])


def adam_step(tensors: list[Tensor], state: AdamState, lr: float, wd: float) -> None:
    """Decoupled weight decay (applied before the update), bias-corrected moments."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for tensor, m, v in zip(tensors, state.m, state.v):
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)
        values = tensor.values
        if wd:
            values = values * (1.0 - lr * wd)
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        tensor.values = values - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# heuristic augmentation baseline

def random_edge_keep(num_edges: int, p_e: float, seed: int) -> np.ndarray:
    """Per-edge keep decisions: each undirected edge dropped i.i.d. with prob p_e."""
    return (np.random.default_rng(seed).random(num_edges) >= p_e).astype(np.float64)


def random_feature_mask(shape: tuple, p_f: float, seed: int) -> np.ndarray:
    """Per-entry keep mask: each feature of each node zeroed i.i.d. with prob p_f."""
    return (np.random.default_rng(seed).random(shape) >= p_f).astype(np.float64)


def random_augment(g: Graph, p_e: float, p_f: float, seed: int) -> tuple[SparseCSR, np.ndarray]:
    """Heuristic noisy view: random edge dropping plus random feature masking.

    Carries no gradients; this is the fixed point-estimate augmentation the
    learnable generators replace.
    """
    if not (0.0 <= p_e <= 1.0 and 0.0 <= p_f <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    keep = random_edge_keep(g.num_edges, p_e, derive_seed(seed, 0))
    mask = random_feature_mask(g.features.shape, p_f, derive_seed(seed, 1))
    values = masked_hat_values(g, keep)
    a_eps = SparseCSR((g.num_nodes, g.num_nodes), g.plan.indptr, g.plan.indices,
                      values, symmetric=True)
    return a_eps, g.features * mask


# ---------------------------------------------------------------------------
# the training loop

def _prepare_graph(g: Graph, cfg: TrainConfig) -> Graph:
    if not cfg.row_normalize_features:
        return g
    from .graph import build_graph
    sums = np.abs(g.features).sum(axis=1, keepdims=True)
    feats = g.features / np.maximum(sums, 1e-12)
    edges = np.stack([g.edge_u, g.edge_v], axis=1)
    return build_graph(g.num_nodes, edges, feats, labels=g.labels)


def _gumbel_temperature(cfg: TrainConfig, epoch: int) -> float:
    if not cfg.gumbel_anneal or cfg.epochs <= 1:
        return cfg.gumbel_temperature
    frac = epoch / (cfg.epochs - 1)
    return cfg.gumbel_temperature + (0.5 - cfg.gumbel_temperature) * frac


def _noisy_view(g: Graph, cfg: TrainConfig, a_hat_clean: SparseCSR,
                edge_params, attr_params, epoch: int, samp: int):
    """Second view per the configured per-side augmentation modes."""
    sample = None
    if edge_params is not None or attr_params is not None:
        sample = nz.generate_noise(
            g, edge_params, attr_params,
            seed=derive_seed(cfg.seed, 3, epoch, samp),
            temperature=_gumbel_temperature(cfg, epoch), hard=True)

    if cfg.aug_mode_edge == "none":
        a2 = a_hat_clean
    elif cfg.aug_mode_edge == "random":
        keep = random_edge_keep(g.num_edges, cfg.random_drop_rate,
                                derive_seed(cfg.seed, 4, epoch, samp))
        a2 = SparseCSR((g.num_nodes, g.num_nodes), g.plan.indptr, g.plan.indices,
                       masked_hat_values(g, keep), symmetric=True)
    else:
        a2 = nz.noisy_normalized_adjacency(g, sample.edge_keep)

    if cfg.aug_mode_feat == "none":
        x2 = Tensor(g.features)
    elif cfg.aug_mode_feat == "random":
        mask = random_feature_mask(g.features.shape, cfg.random_mask_rate,
                                   derive_seed(cfg.seed, 5, epoch, samp))
        x2 = Tensor(g.features * mask)
    else:
        x2 = ad.add(Tensor(g.features), sample.attr_noise)
    return a2, x2


def train(g: Graph, cfg: TrainConfig) -> TrainResult:
    """Run the full training loop; returns trained parameters and the trace.

    Each trace record carries the epoch loss plus the entropy diagnostics
    computed from the (last) sampled view's per-node terms.
    """
    g = _prepare_graph(g, cfg)
    a_hat = normalize(g)

    enc_params = init_params(derive_seed(cfg.seed, 0), g.feat_dim, cfg.dims)
    edge_params = attr_params = None
    if cfg.aug_mode_edge == "learnable":
        edge_params = nz.init_edge_gen(derive_seed(cfg.seed, 1), g.feat_dim,
                                       cfg.dims.edge_hidden)
    if cfg.aug_mode_feat == "learnable":
        attr_params = nz.init_attr_gen(derive_seed(cfg.seed, 2), g.feat_dim,
                                       cfg.dims.attr_hidden)

    opt_enc = init_adam(enc_params.tensors())
    opt_edge = init_adam(edge_params.tensors()) if edge_params else None
    opt_attr = init_adam(attr_params.tensors()) if attr_params else None

    def snapshot() -> dict[str, np.ndarray]:
        groups = [enc_params.tensors()]
        if edge_params:
            groups.append(edge_params.tensors())
        if attr_params:
            groups.append(attr_params.tensors())
        return {t.name: t.values.copy() for ts in groups for t in ts}

    trace: list[dict] = []
    last_good = snapshot()
    for epoch in range(cfg.epochs):
        tape = Tape(strict=False)
        for t in enc_params.tensors():
            tape.watch(t)
        for params in (edge_params, attr_params):
            if params is not None:
                for t in params.tensors():
                    tape.watch(t)

        # divergence is detected by the explicit finite check below, so the
        # transient overflow warnings of a blowing-up run are just noise
        with np.errstate(over="ignore", invalid="ignore"):
            z1 = encode(a_hat, g.features, enc_params)
            total = None
            kv = None
            for samp in range(cfg.samples_per_epoch):
                a2, x2 = _noisy_view(g, cfg, a_hat, edge_params, attr_params, epoch, samp)
                z2 = encode(a2, x2, enc_params)
                c1, c2 = (project(z1, enc_params), project(z2, enc_params)) \
                    if cfg.contrast_on_projection else (z1, z2)
                l_pos, l_neg = losses.pos_neg_terms(c1, c2, cfg.tau, cfg.negatives_mode)
                sample_loss = losses.nce_from_terms(l_pos, l_neg)
                if cfg.symmetrize:
                    rev = losses.infonce_loss(c2, c1, cfg.tau, cfg.negatives_mode)
                    sample_loss = ad.scale_by_constant(ad.add(sample_loss, rev), 0.5)
                total = sample_loss if total is None else ad.add(total, sample_loss)
                terms_ok = (np.all(np.isfinite(l_pos.values)) and np.all(l_pos.values > 0)
                            and np.all(np.isfinite(l_neg.values)) and np.all(l_neg.values > 0))
                kv = losses.kappa(l_pos, l_neg) if terms_ok else None
            loss = total if cfg.samples_per_epoch == 1 else \
                ad.scale_by_constant(total, 1.0 / cfg.samples_per_epoch)

        loss_value = float(loss.values)
        if not np.isfinite(loss_value) or kv is None:
            raise TrainingDiverged(epoch, last_good)

        tape.backward(loss)
        adam_step(enc_params.tensors(), opt_enc, cfg.lr_encoder, cfg.wd_encoder)
        if edge_params:
            adam_step(edge_params.tensors(), opt_edge, cfg.lr_edge_gen, cfg.wd_gens)
        if attr_params:
            adam_step(attr_params.tensors(), opt_attr, cfg.lr_attr_gen, cfg.wd_gens)
        tape.release()  # break record->tensor->tape cycles before the next epoch

        trace.append({
            "epoch": epoch,
            "loss": loss_value,
            "mean_kappa": float(np.mean(kv.kappa)),
            "task_entropy": losses.task_entropy(kv.per_node_loss),
            "neg_cond_entropy": float(np.mean(losses.per_node_entropy_term(kv.kappa))),
        })
        last_good = snapshot()

    return TrainResult(encoder=enc_params, trace=trace,
                       edge_gen=edge_params, attr_gen=attr_params)


def embed(g: Graph, cfg: TrainConfig, enc_params: EncoderParams) -> np.ndarray:
    """Detached evaluation embeddings Z (pre-projection) for the clean graph."""
    g = _prepare_graph(g, cfg)
    return encode(normalize(g), g.features, enc_params).values


# ---------------------------------------------------------------------------
# full-model gradient checking (drives the CLI command and the acceptance run)

def build_full_loss(tape: Tape, g: Graph, enc_params: EncoderParams,
                    edge_params: nz.EdgeGenParams | None,
                    attr_params: nz.AttrGenParams | None,
                    tau: float, temperature: float, noise_seed: int,
                    hard: bool = False, contrast_on_projection: bool = True) -> Tensor:
    """Clean-vs-noisy contrastive loss with frozen noise draws.

    ``hard=False`` keeps the edge decisions relaxed so the loss is
    differentiable everywhere, which is what a finite-difference comparison
    requires; the straight-through estimator's backward pass equals the
    relaxed gradient by construction.
    """
    a_hat = normalize(g)
    z1 = encode(a_hat, g.features, enc_params)
    sample = nz.generate_noise(g, edge_params, attr_params, seed=noise_seed,
                               temperature=temperature, hard=hard)
    a2, x2 = nz.apply_noise(g, sample)
    z2 = encode(a2, x2, enc_params)
    if contrast_on_projection:
        z1, z2 = project(z1, enc_params), project(z2, enc_params)
    return losses.pi_noise_loss(z1, z2, tau)


def _tiny_dims() -> Dims:
    return Dims(hidden=6, embed=5, proj=4, edge_hidden=5, attr_hidden=4)


def full_model_gradcheck(seed: int, tol: float = 1e-4,
                         corrupt: bool = False) -> ad.GradCheckReport:
    """Gradcheck the whole pipeline on a random graph with at most 12 nodes.

    Parameters are jittered away from the init point so gradients are
    compared at a generic position, and the jitter is redrawn until the
    computation is finite-difference safe: no relu/prelu pre-activation
    within 10x of the step h (a central difference straddling the kink mixes
    two slopes) and no near-zero row norm entering the cosine normalization
    (whose curvature swamps an h=1e-5 difference). Both hazards are fixture
    pathologies, not gradient defects; the tape matches a converged
    difference quotient there. ``corrupt=True`` swaps in a deliberately
    wrong backward rule (negative control: the check must fail).
    """
    import logging

    from .graph import generate_sbm
    rng = np.random.default_rng(seed)
    n_per_block = int(rng.integers(3, 7))  # 6..12 nodes over two blocks
    feat_dim = int(rng.integers(3, 6))
    g, _ = generate_sbm(n_per_block, 2, p_in=0.8, p_out=0.3, feat_dim=feat_dim,
                        feat_shift=1.0, seed=derive_seed(seed, 10))
    enc_params = init_params(derive_seed(seed, 11), feat_dim, _tiny_dims())
    edge_params = nz.init_edge_gen(derive_seed(seed, 12), feat_dim, hidden=5)
    attr_params = nz.init_attr_gen(derive_seed(seed, 13), feat_dim, hidden=4)
    params = enc_params.tensors() + edge_params.tensors() + attr_params.tensors()
    noise_seed = derive_seed(seed, 14)

    def build(tape):
        loss = build_full_loss(tape, g, enc_params, edge_params, attr_params,
                               tau=0.4, temperature=0.9, noise_seed=noise_seed,
                               hard=False)
        if corrupt:
            loss = ad.custom_op("corrupted_identity", loss.values, (loss,),
                                lambda grad: (grad * 1.5,))
        return loss

    base = [t.values.copy() for t in params]
    jitter = np.random.default_rng(derive_seed(seed, 15))
    noise_log = logging.getLogger("pigcl.noise")
    old_level = noise_log.level
    noise_log.setLevel(logging.ERROR)
    try:
        for _ in range(50):
            for t, b in zip(params, base):
                t.values = b + jitter.normal(scale=0.1, size=b.shape)
            probe_tape = Tape(strict=True)
            for t in params:
                probe_tape.watch(t)
            build(probe_tape)
            kink, min_norm = ad.fd_safety_margin(probe_tape)
            if kink > 1e-4 and min_norm > 1e-2:
                break
        else:
            raise RuntimeError(f"seed {seed}: no finite-difference-safe jitter found")
        return ad.gradcheck(build, params, tol=tol)
    finally:
        noise_log.setLevel(old_level)
