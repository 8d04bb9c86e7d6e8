"""Texture atlas rendering, edit application, recomposition and metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import model
from .model import ArchSpec

PSNR_CAP = 99.0


@dataclass
class TextureAtlas:
    """A rendered G x G image of one layer's canonical texture.

    Pixel (i, j) corresponds to uv = (2j/(G-1) - 1, 2i/(G-1) - 1); no
    residual is applied, the atlas stores canonical appearance only.
    """
    layer: str
    pixels: np.ndarray  # (G, G, 3) in [0, 1]

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass
class EditedAtlas:
    base: TextureAtlas
    pixels: np.ndarray  # replacement (G, G, 3)

    def __post_init__(self):
        if self.pixels.shape != self.base.pixels.shape:
            raise ValueError(
                f"edit resolution {self.pixels.shape} does not match atlas "
                f"{self.base.pixels.shape}")


def _atlas_uv_grid(g: int) -> np.ndarray:
    lin = 2.0 * np.arange(g) / (g - 1) - 1.0
    u, v = np.meshgrid(lin, lin)  # u varies along columns, v along rows
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def render_atlas(spec: ArchSpec, params, layer: str, g: int = 1000,
                 chunk: int = 8192) -> TextureAtlas:
    """Evaluate the texture module over the canonical uv square."""
    if g < 2:
        raise ValueError("atlas resolution must be >= 2")
    uv = _atlas_uv_grid(g)
    out = np.empty((g * g, 3))
    for lo in range(0, uv.shape[0], chunk):
        part = uv[lo : lo + chunk]
        out[lo : lo + part.shape[0]] = model.texture_color(
            spec, params, layer, part).data
    return TextureAtlas(layer=layer, pixels=out.reshape(g, g, 3))


def sample_edited_atlas(edited: EditedAtlas, uv: np.ndarray) -> np.ndarray:
    """Bilinear sample of the edited pixel grid at uv in [-1, 1]^2."""
    g = edited.base.resolution
    uv = np.asarray(uv, dtype=np.float64)
    xs = np.clip((uv[:, 0] + 1.0) * (g - 1) / 2.0, 0.0, g - 1.0)
    ys = np.clip((uv[:, 1] + 1.0) * (g - 1) / 2.0, 0.0, g - 1.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, g - 2)
    y0 = np.clip(np.floor(ys).astype(int), 0, g - 2)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    px = edited.pixels
    return ((1 - fy) * (1 - fx) * px[y0, x0]
            + (1 - fy) * fx * px[y0, x0 + 1]
            + fy * (1 - fx) * px[y0 + 1, x0]
            + fy * fx * px[y0 + 1, x0 + 1])


def recompose_video(spec: ArchSpec, params, dims: tuple,
                    edits: dict | None = None, chunk: int = 8192) -> np.ndarray:
    """Re-render every frame, swapping edited layers' colors in.

    dims is (F, H, W); `edits` maps layer id -> EditedAtlas. Unedited
    layers use the texture network directly. Residuals and alpha always
    come from the model; output is clamped to [0, 1].
    """
    f, h, w = dims
    edits = edits or {}
    for layer in edits:
        if layer not in model.layer_ids(spec):
            raise ValueError(f"unknown layer {layer!r}")
    tt, rr, cc = np.meshgrid(np.arange(f), np.arange(h), np.arange(w),
                             indexing="ij")
    coords = model.normalize_coords(
        tt.ravel(), rr.ravel(), cc.ravel(), f, h, w)
    out = np.empty((coords.shape[0], 3))
    fg = model.foreground_ids(spec)
    for lo in range(0, coords.shape[0], chunk):
        part = coords[lo : lo + chunk]
        shaded = {}
        for layer in model.layer_ids(spec):
            uv = model.map_points(params, layer, part)
            if layer in edits:
                color = sample_edited_atlas(edits[layer], uv.data)
            else:
                color = model.texture_color(spec, params, layer, uv.data).data
            r = model.residual_coeff(spec, params, layer, part).data
            shaded[layer] = color * r
        alpha = model.alpha_value(params, part).data
        comp = shaded["b"]
        for i, layer in enumerate(fg):
            a = alpha[:, i : i + 1]
            comp = (1.0 - a) * comp + a * shaded[layer]
        out[lo : lo + part.shape[0]] = comp
    return np.clip(out.reshape(f, h, w, 3), 0.0, 1.0)


def reconstruct_video(spec: ArchSpec, params, dims: tuple,
                      chunk: int = 8192) -> np.ndarray:
    """Clamped model reconstruction of all frames (no edits)."""
    return recompose_video(spec, params, dims, edits=None, chunk=chunk)


# -- metrics ------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] data, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


_LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 8
_C1 = 0.01**2
_C2 = 0.03**2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM with a uniform 8x8 window on the luminance channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ _LUMA
        b = b @ _LUMA
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(
            f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = (SSIM_WINDOW, SSIM_WINDOW)
    wa = np.lib.stride_tricks.sliding_window_view(a, win)
    wb = np.lib.stride_tricks.sliding_window_view(b, win)
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a**2 + mu_b**2 + _C1) * (var_a + var_b + _C2)
    return float((num / den).mean())


def video_ssim(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean([ssim(a[t], b[t]) for t in range(a.shape[0])]))


# -- atlas file IO ------------------------------------------------------------

def save_atlas_png(atlas: TextureAtlas, path, checkpoint_digest: str = "") -> None:
    """8-bit PNG export plus a sidecar recording layer, size and provenance."""
    path = Path(path)
    img = np.clip(np.round(atlas.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)
    sidecar = path.with_suffix(path.suffix + ".meta")
    sidecar.write_text(
        f"layer={atlas.layer}\nsize={atlas.resolution}\n"
        f"checkpoint={checkpoint_digest}\n")


def load_atlas_png(path, layer: str | None = None) -> TextureAtlas:
    path = Path(path)
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"atlas must be square, got {img.shape}")
    if layer is None:
        sidecar = path.with_suffix(path.suffix + ".meta")
        layer = "f"
        if sidecar.exists():
            for line in sidecar.read_text().splitlines():
                if line.startswith("layer="):
                    layer = line.split("=", 1)[1]
    return TextureAtlas(layer=layer, pixels=img)
