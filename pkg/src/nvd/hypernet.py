"""Embedding-conditioned parameter generation.

One independent MLP head per named target tensor of the decomposition
model (MRHE tables included). Also hosts the feature-matrix compression
autoencoder and a deterministic descriptor embedding that stands in when
no externally produced embedding file is available.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import model
from .autodiff import Parameter, Tensor, affine
from .model import ArchSpec
from .optim import Adam

EMBED_DIM = 768


@dataclass(frozen=True)
class HyperNetConfig:
    embed_dim: int = EMBED_DIM
    hidden: int = 128
    n_hidden: int = 2
    out_scale: float = 1e-2  # scale of the output head init

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "HyperNetConfig":
        return HyperNetConfig(**d)


class HyperNet:
    """A bank of per-target MLP heads: embedding -> flattened tensor."""

    def __init__(self, arch: ArchSpec, config: HyperNetConfig,
                 rng: np.random.Generator, skip_tables: bool = False):
        self.arch = arch
        self.config = config
        self.target_shapes = {
            name: shape for name, shape in model.param_shapes(arch).items()
            if not (skip_tables and ".table" in name)
        }
        self.skip_tables = skip_tables
        self.params: dict[str, Parameter] = {}
        c = config
        # The output-head bias carries a standard init sample of its target
        # tensor, so generated parameters start as "standard init plus a
        # small embedding-dependent perturbation". An all-zero start would
        # leave every gradient path through the generated MLPs blocked by
        # products of near-zero factors.
        target_init = model.init_params(arch, rng)
        for target, shape in self.target_shapes.items():
            dims = [c.embed_dim] + [c.hidden] * c.n_hidden \
                + [int(np.prod(shape))]
            for i in range(len(dims) - 1):
                fan_in = dims[i]
                last = i == len(dims) - 2
                scale = c.out_scale / np.sqrt(fan_in) if last \
                    else 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-scale, scale, size=(dims[i], dims[i + 1]))
                if last:
                    b = target_init[target].data.reshape(-1).copy()
                else:
                    b = np.zeros(dims[i + 1])
                self.params[f"head.{target}.w{i}"] = Parameter(
                    w, name=f"head.{target}.w{i}")
                self.params[f"head.{target}.b{i}"] = Parameter(
                    b, name=f"head.{target}.b{i}")

    @property
    def n_heads(self) -> int:
        return len(self.target_shapes)

    def head_param_names(self, target: str) -> list[str]:
        n_layers = self.config.n_hidden + 1
        names = []
        for i in range(n_layers):
            names += [f"head.{target}.w{i}", f"head.{target}.b{i}"]
        return names

    def table_head_params(self) -> list[Parameter]:
        """Parameters of heads that emit hash tables (lr routing)."""
        out = []
        for target in self.target_shapes:
            if ".table" in target:
                out += [self.params[n] for n in self.head_param_names(target)]
        return out

    def other_head_params(self) -> list[Parameter]:
        out = []
        for target in self.target_shapes:
            if ".table" not in target:
                out += [self.params[n] for n in self.head_param_names(target)]
        return out


def generate_parameters(hyper: HyperNet, embedding: Tensor) -> dict:
    """Run every head on the embedding and reshape into the target tensors."""
    if not isinstance(embedding, Tensor):
        embedding = Tensor(embedding)
    if embedding.data.size != hyper.config.embed_dim:
        raise ValueError(
            f"embedding must have {hyper.config.embed_dim} entries, "
            f"got shape {embedding.data.shape}")
    e = embedding.reshape(1, hyper.config.embed_dim)
    out = {}
    n_layers = hyper.config.n_hidden + 1
    for target, shape in hyper.target_shapes.items():
        x = e
        for i in range(n_layers):
            x = affine(x, hyper.params[f"head.{target}.w{i}"],
                       hyper.params[f"head.{target}.b{i}"])
            if i < n_layers - 1:
                x = x.relu()
        out[target] = x.reshape(shape)
    return out


# -- embedding compression ----------------------------------------------------

def compress_embedding(features: np.ndarray, epochs: int = 2000,
                       lr: float = 1e-2, seed: int = 0,
                       return_weights: bool = False):
    """Train the one-layer autoencoder over a (768, P) feature matrix.

    The encoder collapses the patch axis to one column; the decoder expands
    it back, trained with mean L1. Returns (embedding, final_l1) or, with
    return_weights, the trained parameter dict as a third element.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != EMBED_DIM:
        raise ValueError(f"expected ({EMBED_DIM}, P) features, got {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValueError("feature matrix contains non-finite values")
    n_patches = features.shape[1]
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(n_patches)
    params = {
        "enc.w": Parameter(rng.uniform(-scale, scale, (n_patches, 1)), "enc.w"),
        "enc.b": Parameter(np.zeros((1,)), "enc.b"),
        "dec.w": Parameter(rng.uniform(-1.0, 1.0, (1, n_patches)), "dec.w"),
        "dec.b": Parameter(np.zeros((n_patches,)), "dec.b"),
    }
    opt = Adam([(list(params.values()), lr)])
    target = Tensor.const(features)
    loss_val = None
    # halve the step size periodically; plain Adam oscillates around the
    # kink of the L1 objective instead of settling
    decay_every = max(1, epochs // 8)
    for epoch in range(epochs):
        if epoch > 0 and epoch % decay_every == 0:
            opt.groups = [(ps, g_lr * 0.5) for ps, g_lr in opt.groups]
        e = affine(Tensor.const(features), params["enc.w"], params["enc.b"])
        recon = affine(e, params["dec.w"], params["dec.b"])
        loss = (recon - target).abs().mean()
        if not np.isfinite(loss.data):
            raise FloatingPointError("autoencoder loss diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_val = float(loss.data)
    e = affine(Tensor.const(features), params["enc.w"], params["enc.b"])
    embedding = e.data[:, 0].copy()
    if return_weights:
        return embedding, loss_val, params
    return embedding, loss_val


# -- descriptor embedding -----------------------------------------------------

DESCRIPTOR_GRID = 8  # per-frame luminance pooled to an 8x8 grid

_LUMA = np.array([0.299, 0.587, 0.114])


def _pool(img: np.ndarray, g: int) -> np.ndarray:
    rows = np.array_split(img, g, axis=0)
    return np.array([[c.mean() for c in np.array_split(r, g, axis=1)]
                     for r in rows])


def descriptor_embedding(frames: np.ndarray) -> np.ndarray:
    """Deterministic 768-dim video descriptor.

    Layout (before padding/truncation to 768 and unit normalization):
    per-frame 8x8 pooled luminance grids, per-frame RGB channel means,
    consecutive-frame mean absolute luminance differences, and the global
    luminance standard deviation.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError("need at least one (H, W, 3) frame")
    if min(frames.shape[1], frames.shape[2]) < DESCRIPTOR_GRID:
        raise ValueError(
            f"frames must be at least {DESCRIPTOR_GRID}px on each side")
    luma = frames @ _LUMA
    parts = [_pool(luma[t], DESCRIPTOR_GRID).ravel()
             for t in range(frames.shape[0])]
    parts.append(frames.mean(axis=(1, 2)).ravel())
    if frames.shape[0] > 1:
        parts.append(np.abs(np.diff(luma, axis=0)).mean(axis=(1, 2)))
    parts.append(np.array([luma.std()]))
    vec = np.concatenate(parts)
    if vec.size < EMBED_DIM:
        vec = np.pad(vec, (0, EMBED_DIM - vec.size))
    else:
        vec = vec[:EMBED_DIM]
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError("degenerate all-zero video descriptor")
    return vec / norm
