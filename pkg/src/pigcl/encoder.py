"""Two-layer GCN encoder with PReLU activations and a projection head.

The encoder produces the embeddings used for linear evaluation; the
projection head is applied only inside the contrastive loss. Defaults follow
a 512-wide hidden layer, 256-dimensional embeddings and a 256-dimensional
projection: a fully connected ReLU layer followed by a linear layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SparseCSR, Tensor


@dataclass
class Dims:
    hidden: int = 512
    embed: int = 256
    proj: int = 256
    edge_hidden: int = 64
    attr_hidden: int = 64


@dataclass
class EncoderParams:
    w1: Tensor
    prelu1: Tensor
    w2: Tensor
    prelu2: Tensor
    wp1: Tensor
    bp1: Tensor
    wp2: Tensor
    bp2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.prelu1, self.w2, self.prelu2,
                self.wp1, self.bp1, self.wp2, self.bp2]

    def copy_values(self) -> dict[str, np.ndarray]:
        return {t.name: t.values.copy() for t in self.tensors()}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(seed: int, feat_dim: int, dims: Dims | None = None) -> EncoderParams:
    """Glorot-uniform weights, PReLU slopes at 0.25, zero biases; deterministic per seed."""
    dims = dims or Dims()
    rng = np.random.default_rng(seed)
    return EncoderParams(
        w1=Tensor(glorot(rng, feat_dim, dims.hidden), name="encoder.w1"),
        prelu1=Tensor(np.full(dims.hidden, 0.25), name="encoder.prelu1"),
        w2=Tensor(glorot(rng, dims.hidden, dims.embed), name="encoder.w2"),
        prelu2=Tensor(np.full(dims.embed, 0.25), name="encoder.prelu2"),
        wp1=Tensor(glorot(rng, dims.embed, dims.proj), name="encoder.wp1"),
        bp1=Tensor(np.zeros(dims.proj), name="encoder.bp1"),
        wp2=Tensor(glorot(rng, dims.proj, dims.proj), name="encoder.wp2"),
        bp2=Tensor(np.zeros(dims.proj), name="encoder.bp2"),
    )


def encode(a_hat: SparseCSR, x, params: EncoderParams) -> Tensor:
    """Z = PReLU2(Â · PReLU1(Â · X · W1) · W2)."""
    h = ad.prelu(ad.spmm(a_hat, ad.matmul(x, params.w1)), params.prelu1)
    return ad.prelu(ad.spmm(a_hat, ad.matmul(h, params.w2)), params.prelu2)


def project(z, params: EncoderParams) -> Tensor:
    """P = ReLU(Z · Wp1 + bp1) · Wp2 + bp2; used only inside the loss."""
    h = ad.relu(ad.add(ad.matmul(z, params.wp1), params.bp1))
    return ad.add(ad.matmul(h, params.wp2), params.bp2)


# ---------------------------------------------------------------------------
# checkpointing: flat binary of float64 values plus a JSON shape manifest

def save_checkpoint(path, groups: dict[str, list[Tensor]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names, shapes, chunks = [], [], []
    for group, tensors in groups.items():
        for t in tensors:
            names.append(t.name or f"{group}.param{len(names)}")
            shapes.append(list(t.values.shape))
            chunks.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    manifest = {"dtype": "<f8", "names": names, "shapes": shapes}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype=manifest["dtype"])
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in zip(manifest["names"], manifest["shapes"]):
        size = int(np.prod(shape)) if shape else 1
        out[name] = raw[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != raw.size:
        raise ValueError(f"checkpoint {path}: manifest covers {offset} values, file has {raw.size}")
    return out


def params_from_checkpoint(values: dict[str, np.ndarray]) -> EncoderParams:
    """Rebuild encoder parameters from checkpoint arrays; dims come from shapes."""
    names = ("w1", "prelu1", "w2", "prelu2", "wp1", "bp1", "wp2", "bp2")
    tensors = {}
    for short in names:
        key = f"encoder.{short}"
        if key not in values:
            raise ValueError(f"checkpoint missing parameter '{key}'")
        tensors[short] = Tensor(values[key].copy(), name=key)
    return EncoderParams(**tensors)
