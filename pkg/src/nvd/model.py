"""The layered neural video decomposition model.

Two (or more) layer modules -- each a mapping MLP, a hash-encoded texture
MLP and a hash-encoded residual MLP -- plus an alpha MLP. All parameters
live in a flat name -> tensor mapping so they can come either from direct
training or from a hypernetwork.

Coordinate conventions: video coordinates p = (x, y, t) are normalized to
[-1, 1]; the mapping heads emit tanh-bounded texture coordinates (u, v) in
(-1, 1), remapped to [0, 1] at the hash-encoding boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hashgrid
from .autodiff import Parameter, Tensor, affine
from .hashgrid import HashGridSpec

N_MLP_LAYERS = 4  # input layer, 2 hidden layers, output layer


@dataclass(frozen=True)
class ArchSpec:
    mapping_hidden: int = 64
    texture_hidden: int = 64
    residual_hidden: int = 64
    alpha_hidden: int = 64
    n_foreground: int = 1
    texture_grid: HashGridSpec = field(
        default_factory=lambda: HashGridSpec(
            levels=8, base_resolution=8, max_resolution=128,
            table_size=4096, feature_dim=2, input_dim=2)
    )
    residual_grid: HashGridSpec = field(
        default_factory=lambda: HashGridSpec(
            levels=8, base_resolution=8, max_resolution=64,
            table_size=4096, feature_dim=2, input_dim=3)
    )

    def __post_init__(self):
        if self.texture_grid.input_dim != 2:
            raise ValueError("texture grid must be 2D")
        if self.residual_grid.input_dim != 3:
            raise ValueError("residual grid must be 3D")
        if self.n_foreground < 1:
            raise ValueError("need at least one foreground layer")

    def to_dict(self) -> dict:
        return {
            "mapping_hidden": self.mapping_hidden,
            "texture_hidden": self.texture_hidden,
            "residual_hidden": self.residual_hidden,
            "alpha_hidden": self.alpha_hidden,
            "n_foreground": self.n_foreground,
            "texture_grid": self.texture_grid.to_dict(),
            "residual_grid": self.residual_grid.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        d = dict(d)
        d["texture_grid"] = HashGridSpec.from_dict(d["texture_grid"])
        d["residual_grid"] = HashGridSpec.from_dict(d["residual_grid"])
        return ArchSpec(**d)


def layer_ids(spec: ArchSpec) -> list[str]:
    """Background first, then foreground layers back-to-front."""
    if spec.n_foreground == 1:
        return ["b", "f"]
    return ["b"] + [f"f{i}" for i in range(spec.n_foreground)]


def foreground_ids(spec: ArchSpec) -> list[str]:
    return layer_ids(spec)[1:]


def _mlp_shapes(in_dim: int, hidden: int, out_dim: int) -> list[tuple]:
    dims = [in_dim] + [hidden] * (N_MLP_LAYERS - 1) + [out_dim]
    shapes = []
    for i in range(N_MLP_LAYERS):
        shapes.append((dims[i], dims[i + 1]))
        shapes.append((dims[i + 1],))
    return shapes


def _mlp_names(prefix: str) -> list[str]:
    names = []
    for i in range(N_MLP_LAYERS):
        names.append(f"{prefix}.w{i}")
        names.append(f"{prefix}.b{i}")
    return names


def param_shapes(spec: ArchSpec) -> dict:
    """Ordered name -> shape map; the checkpoint/hypernet contract."""
    shapes: dict = {}

    def add_mlp(prefix, in_dim, hidden, out_dim):
        for name, shape in zip(_mlp_names(prefix),
                               _mlp_shapes(in_dim, hidden, out_dim)):
            shapes[name] = shape

    for layer in layer_ids(spec):
        add_mlp(f"{layer}.mapping", 3, spec.mapping_hidden, 2)
        tg, rg = spec.texture_grid, spec.residual_grid
        for name in hashgrid.table_names(tg, f"{layer}.texture"):
            shapes[name] = (tg.table_size, tg.feature_dim)
        add_mlp(f"{layer}.texture", tg.output_dim, spec.texture_hidden, 3)
        for name in hashgrid.table_names(rg, f"{layer}.residual"):
            shapes[name] = (rg.table_size, rg.feature_dim)
        add_mlp(f"{layer}.residual", rg.output_dim, spec.residual_hidden, 1)
    add_mlp("alpha", 3, spec.alpha_hidden, spec.n_foreground)
    return shapes


def param_count(spec: ArchSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def init_params(spec: ArchSpec, rng: np.random.Generator) -> dict:
    """Random initialization: uniform He-style fan-in for MLPs, tiny tables."""
    params: dict = {}
    for name, shape in param_shapes(spec).items():
        if ".table" in name:
            data = rng.uniform(-1e-4, 1e-4, size=shape)
        elif name.rsplit(".", 1)[-1].startswith("b"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(data, name=name)
    return params


def check_params(spec: ArchSpec, params) -> None:
    """Verify the tensor collection matches the architecture exactly."""
    expected = param_shapes(spec)
    missing = [n for n in expected if n not in params]
    extra = [n for n in params if n not in expected]
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        got = tuple(params[name].data.shape)
        if got != tuple(shape):
            raise ValueError(f"{name}: expected shape {shape}, got {got}")


def _mlp_forward(params, prefix: str, x: Tensor, head: str | None) -> Tensor:
    for i in range(N_MLP_LAYERS):
        x = affine(x, params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"])
        if i < N_MLP_LAYERS - 1:
            x = x.relu()
    if head == "tanh":
        return x.tanh()
    if head == "sigmoid":
        return x.sigmoid()
    if head == "one_plus_tanh":
        return 1.0 + x.tanh()
    return x


def _as_tensor(coords) -> Tensor:
    return coords if isinstance(coords, Tensor) else Tensor(coords)


def map_points(params, layer: str, coords) -> Tensor:
    """(x, y, t) -> tanh-bounded texture coordinates (u, v)."""
    return _mlp_forward(params, f"{layer}.mapping", _as_tensor(coords), "tanh")


def texture_color(spec: ArchSpec, params, layer: str, uv) -> Tensor:
    """(u, v) in (-1, 1)^2 -> RGB in [0, 1]."""
    uv01 = (_as_tensor(uv) + 1.0) * 0.5
    tables = [params[n] for n in hashgrid.table_names(spec.texture_grid,
                                                      f"{layer}.texture")]
    feat = hashgrid.encode(uv01, spec.texture_grid, tables)
    rgb = _mlp_forward(params, f"{layer}.texture", feat, "tanh")
    return (rgb + 1.0) * 0.5


def residual_coeff(spec: ArchSpec, params, layer: str, coords) -> Tensor:
    """(x, y, t) -> multiplicative lighting coefficient in (0, 2)."""
    c01 = (_as_tensor(coords) + 1.0) * 0.5
    tables = [params[n] for n in hashgrid.table_names(spec.residual_grid,
                                                      f"{layer}.residual")]
    feat = hashgrid.encode(c01, spec.residual_grid, tables)
    return _mlp_forward(params, f"{layer}.residual", feat, "one_plus_tanh")


def alpha_value(params, coords) -> Tensor:
    """(x, y, t) -> per-foreground-layer opacity in (0, 1), shape (N, n_fg)."""
    return _mlp_forward(params, "alpha", _as_tensor(coords), "sigmoid")


@dataclass
class ModelOutputs:
    """Everything the losses need from one forward pass."""
    comp: Tensor                  # composited color, unclamped
    alpha: Tensor                 # (N, n_foreground)
    uv: dict                      # layer -> (N, 2)
    color: dict                   # layer -> pre-residual color (N, 3)
    residual: dict                # layer -> (N, 1)
    shaded: dict                  # layer -> color * residual


def reconstruct_points(spec: ArchSpec, params, coords,
                       alpha_override: Tensor | None = None) -> ModelOutputs:
    """Full forward pass: per-layer colors, residuals, alpha, composition."""
    coords = _as_tensor(coords)
    uv, color, residual, shaded = {}, {}, {}, {}
    for layer in layer_ids(spec):
        uv[layer] = map_points(params, layer, coords)
        color[layer] = texture_color(spec, params, layer, uv[layer])
        residual[layer] = residual_coeff(spec, params, layer, coords)
        shaded[layer] = color[layer] * residual[layer]
    alpha = alpha_override if alpha_override is not None \
        else alpha_value(params, coords)
    comp = shaded["b"]
    for i, layer in enumerate(foreground_ids(spec)):
        a = alpha[:, i : i + 1]
        comp = (1.0 - a) * comp + a * shaded[layer]
    return ModelOutputs(comp=comp, alpha=alpha, uv=uv, color=color,
                        residual=residual, shaded=shaded)


def normalize_coords(frames: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                     n_frames: int, height: int, width: int) -> np.ndarray:
    """Pixel indices -> normalized (x, y, t) in [-1, 1]^3."""
    x = 2.0 * cols / (width - 1) - 1.0 if width > 1 else np.zeros_like(cols, float)
    y = 2.0 * rows / (height - 1) - 1.0 if height > 1 else np.zeros_like(rows, float)
    if n_frames > 1:
        t = 2.0 * frames / (n_frames - 1) - 1.0
    else:
        t = np.zeros_like(frames, dtype=float)
    return np.stack([x, y, t], axis=-1).astype(np.float64)
