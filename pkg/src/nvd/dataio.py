"""Dataset ingestion and generation.

Covers the NVDT binary tensor format, video directory loading (tensor or
PNG layout), the synthetic translating-sprite generator with analytic flow
and masks, forward-backward flow gating, and point-batch sampling.

Directory layout per video:
    <dir>/frames.nvdt  or frame_0000.png, frame_0001.png, ...
    <dir>/masks.nvdt   or mask_0000.png, ...
    <dir>/flow_fwd.nvdt
    <dir>/flow_bwd.nvdt
Flows are stored in pixel units; batches carry normalized-coordinate
displacements.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .model import normalize_coords

MAGIC = b"NVDT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFileError(IOError):
    pass


def save_tensor(path, tensor: np.ndarray) -> None:
    """Write an array in the NVDT binary layout (little-endian, row-major)."""
    arr = np.ascontiguousarray(tensor)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise TensorFileError(
            f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    code, ndim = struct.unpack_from("<BB", raw, 8)
    if code not in _DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 10)
    offset = 10 + 4 * ndim
    dtype = _DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise TensorFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# -- flow gating --------------------------------------------------------------

def _bilinear_lookup(field: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Sample a (H, W, C) field at float positions, clamped to the border."""
    h, w = field.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros_like(ys, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros_like(xs, int)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    f00 = field[y0, x0]
    f01 = field[y0, x0 + 1] if w > 1 else f00
    f10 = field[y0 + 1, x0] if h > 1 else f00
    f11 = field[y0 + 1, x0 + 1] if w > 1 and h > 1 else f00
    return ((1 - fy) * (1 - fx) * f00 + (1 - fy) * fx * f01
            + fy * (1 - fx) * f10 + fy * fx * f11)


def flow_consistency_weights(flow_fwd: np.ndarray, flow_bwd_next: np.ndarray,
                             threshold: float = 1.0) -> np.ndarray:
    """Forward-backward cycle check for one frame pair.

    flow_fwd maps frame t -> t+1 and flow_bwd_next maps t+1 -> t, both in
    pixel units with (dx, dy) channel order. Returns a {0,1} float map:
    1 where the warped point lands in bounds and the cycle error is below
    the threshold.
    """
    h, w = flow_fwd.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    wx = xs + flow_fwd[..., 0]
    wy = ys + flow_fwd[..., 1]
    in_bounds = (wx >= 0) & (wx <= w - 1) & (wy >= 0) & (wy <= h - 1)
    back = _bilinear_lookup(flow_bwd_next, wy, wx)
    err = np.hypot(flow_fwd[..., 0] + back[..., 0],
                   flow_fwd[..., 1] + back[..., 1])
    return ((err < threshold) & in_bounds).astype(np.float64)


def _video_consistency(flow_fwd, flow_bwd, threshold=1.0):
    """Per-frame forward gate; the last frame has no forward flow -> 0."""
    f = flow_fwd.shape[0]
    w = np.zeros(flow_fwd.shape[:3], dtype=np.float64)
    for t in range(f - 1):
        w[t] = flow_consistency_weights(flow_fwd[t], flow_bwd[t + 1], threshold)
    return w


# -- datasets -----------------------------------------------------------------

@dataclass
class VideoDataset:
    frames: np.ndarray    # (F, H, W, 3) in [0, 1]
    masks: np.ndarray     # (F, H, W) in [0, 1]
    flow_fwd: np.ndarray  # (F, H, W, 2) pixel displacements, last frame zero
    flow_bwd: np.ndarray  # (F, H, W, 2), first frame zero
    w: np.ndarray         # (F, H, W) forward consistency gate in {0, 1}
    id: str = ""

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def validate(self):
        f, h, w = self.frames.shape[:3]
        for name in ("masks", "flow_fwd", "flow_bwd", "w"):
            arr = getattr(self, name)
            if arr.shape[:3] != (f, h, w):
                raise ValueError(
                    f"{name} shape {arr.shape} inconsistent with frames {self.frames.shape}")
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise ValueError("frame colors must lie in [0, 1]")
        if self.masks.min() < 0 or self.masks.max() > 1:
            raise ValueError("mask values must lie in [0, 1]")
        return self


def _load_png_sequence(dir_path: Path, pattern: str, mode: str) -> np.ndarray | None:
    files = sorted(dir_path.glob(pattern))
    if not files:
        return None
    frames = []
    for f in files:
        img = Image.open(f).convert(mode)
        frames.append(np.asarray(img, dtype=np.float64) / 255.0)
    return np.stack(frames)


def load_video_dataset(dir_path) -> VideoDataset:
    dir_path = Path(dir_path)
    if (dir_path / "frames.nvdt").exists():
        frames = load_tensor(dir_path / "frames.nvdt").astype(np.float64)
    else:
        frames = _load_png_sequence(dir_path, "frame_*.png", "RGB")
        if frames is None:
            raise FileNotFoundError(f"{dir_path}: no frames.nvdt or frame_*.png")
    if (dir_path / "masks.nvdt").exists():
        masks = load_tensor(dir_path / "masks.nvdt").astype(np.float64)
    else:
        masks = _load_png_sequence(dir_path, "mask_*.png", "L")
        if masks is None:
            raise FileNotFoundError(f"{dir_path}: no masks.nvdt or mask_*.png")
    flow_fwd = load_tensor(dir_path / "flow_fwd.nvdt").astype(np.float64)
    flow_bwd = load_tensor(dir_path / "flow_bwd.nvdt").astype(np.float64)
    ds = VideoDataset(
        frames=frames, masks=masks, flow_fwd=flow_fwd, flow_bwd=flow_bwd,
        w=_video_consistency(flow_fwd, flow_bwd), id=dir_path.name,
    )
    return ds.validate()


# -- synthetic scenes ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSceneSpec:
    height: int = 64
    width: int = 64
    n_frames: int = 8
    background_seed: int = 0
    sprite_seed: int = 1
    sprite_shape: str = "rectangle"  # or "disk"
    sprite_size: int = 16
    start_row: int = 8
    start_col: int = 8
    velocity: tuple = (2, 1)  # (vx, vy) pixels per frame

    def __post_init__(self):
        if self.sprite_shape not in ("rectangle", "disk"):
            raise ValueError(f"unknown sprite shape {self.sprite_shape!r}")
        vx, vy = self.velocity
        for t in range(self.n_frames):
            r = self.start_row + t * vy
            c = self.start_col + t * vx
            if r < 0 or c < 0 or r + self.sprite_size > self.height \
                    or c + self.sprite_size > self.width:
                raise ValueError(
                    f"sprite leaves the frame at t={t} "
                    f"(top-left ({r}, {c}), size {self.sprite_size})")


def _smooth_texture(rng: np.random.Generator, h: int, w: int,
                    sigma: float = 2.0) -> np.ndarray:
    """Band-limited random RGB texture in [0.1, 0.9]."""
    tex = gaussian_filter(rng.random((h, w, 3)), sigma=(sigma, sigma, 0))
    lo = tex.min(axis=(0, 1), keepdims=True)
    hi = tex.max(axis=(0, 1), keepdims=True)
    return 0.1 + 0.8 * (tex - lo) / np.maximum(hi - lo, 1e-9)


def synth_generate(spec: SynthSceneSpec, out_dir=None) -> VideoDataset:
    """Textured sprite translating over a static textured background.

    Flow inside the sprite equals the velocity, zero elsewhere; masks mark
    sprite support. With integer velocities the motion is an exact pixel
    shift, so brightness constancy holds exactly inside the sprite.
    """
    h, w, f = spec.height, spec.width, spec.n_frames
    bg = _smooth_texture(np.random.default_rng(spec.background_seed), h, w)
    s = spec.sprite_size
    sprite = _smooth_texture(np.random.default_rng(spec.sprite_seed), s, s,
                             sigma=1.5)
    if spec.sprite_shape == "disk":
        yy, xx = np.mgrid[0:s, 0:s]
        support = (yy - (s - 1) / 2) ** 2 + (xx - (s - 1) / 2) ** 2 \
            <= ((s - 1) / 2) ** 2
    else:
        support = np.ones((s, s), dtype=bool)

    vx, vy = spec.velocity
    frames = np.empty((f, h, w, 3))
    masks = np.zeros((f, h, w))
    flow_fwd = np.zeros((f, h, w, 2))
    flow_bwd = np.zeros((f, h, w, 2))
    for t in range(f):
        r = int(round(spec.start_row + t * vy))
        c = int(round(spec.start_col + t * vx))
        frame = bg.copy()
        patch = frame[r : r + s, c : c + s]
        patch[support] = sprite[support]
        frames[t] = frame
        masks[t, r : r + s, c : c + s][support] = 1.0
        if t < f - 1:
            flow_fwd[t, r : r + s, c : c + s][support] = (vx, vy)
        if t > 0:
            flow_bwd[t, r : r + s, c : c + s][support] = (-vx, -vy)
    ds = VideoDataset(
        frames=frames, masks=masks, flow_fwd=flow_fwd, flow_bwd=flow_bwd,
        w=_video_consistency(flow_fwd, flow_bwd),
        id=Path(out_dir).name if out_dir else "synth",
    ).validate()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_tensor(out_dir / "frames.nvdt", frames)
        save_tensor(out_dir / "masks.nvdt", masks)
        save_tensor(out_dir / "flow_fwd.nvdt", flow_fwd)
        save_tensor(out_dir / "flow_bwd.nvdt", flow_bwd)
    return ds


# -- point batches ------------------------------------------------------------

@dataclass
class PointBatch:
    """A batch of sampled video points with supervision targets.

    All fields are numpy arrays over n points. Neighbor coordinates are the
    one-pixel-right / one-pixel-down points used by derivative terms; at the
    frame border they repeat the center point and the validity flag is 0.
    Flow displacements are in normalized coordinates; a direction flag is 0
    where that temporal neighbor does not exist or the warp leaves the frame.
    """
    coords: np.ndarray        # (n, 3)
    color: np.ndarray         # (n, 3)
    mask: np.ndarray          # (n,)
    w: np.ndarray             # (n,) forward consistency gate
    w_bwd: np.ndarray         # (n,) backward gate (cycle check at t via bwd)
    coords_x: np.ndarray      # (n, 3)
    coords_y: np.ndarray      # (n, 3)
    color_x: np.ndarray       # (n, 3)
    color_y: np.ndarray       # (n, 3)
    valid_x: np.ndarray       # (n,) bool
    valid_y: np.ndarray       # (n,) bool
    coords_fwd: np.ndarray    # (n, 3) flow-displaced point at t+1
    coords_bwd: np.ndarray    # (n, 3) flow-displaced point at t-1
    has_fwd: np.ndarray       # (n,) bool
    has_bwd: np.ndarray       # (n,) bool
    frame_idx: np.ndarray     # (n,) int

    @property
    def n(self):
        return self.coords.shape[0]


def sample_point_batch(ds: VideoDataset, n: int,
                       rng: np.random.Generator) -> PointBatch:
    """Uniform point samples over (frame, row, col) with all targets attached."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    f, h, w = ds.n_frames, ds.height, ds.width
    ts = rng.integers(0, f, size=n)
    rows = rng.integers(0, h, size=n)
    cols = rng.integers(0, w, size=n)

    coords = normalize_coords(ts, rows, cols, f, h, w)
    color = ds.frames[ts, rows, cols]
    mask = ds.masks[ts, rows, cols]
    gate = ds.w[ts, rows, cols]

    valid_x = cols < w - 1
    valid_y = rows < h - 1
    cols_x = np.where(valid_x, cols + 1, cols)
    rows_y = np.where(valid_y, rows + 1, rows)
    coords_x = normalize_coords(ts, rows, cols_x, f, h, w)
    coords_y = normalize_coords(ts, rows_y, cols, f, h, w)
    color_x = ds.frames[ts, rows, cols_x]
    color_y = ds.frames[ts, rows_y, cols]

    sx = 2.0 / (w - 1) if w > 1 else 0.0
    sy = 2.0 / (h - 1) if h > 1 else 0.0
    st = 2.0 / (f - 1) if f > 1 else 0.0

    fwd = ds.flow_fwd[ts, rows, cols]
    bwd = ds.flow_bwd[ts, rows, cols]
    tx_f = cols + fwd[:, 0]
    ty_f = rows + fwd[:, 1]
    has_fwd = (ts < f - 1) & (tx_f >= 0) & (tx_f <= w - 1) \
        & (ty_f >= 0) & (ty_f <= h - 1)
    tx_b = cols + bwd[:, 0]
    ty_b = rows + bwd[:, 1]
    has_bwd = (ts > 0) & (tx_b >= 0) & (tx_b <= w - 1) \
        & (ty_b >= 0) & (ty_b <= h - 1)

    coords_fwd = coords + np.stack(
        [fwd[:, 0] * sx, fwd[:, 1] * sy, np.full(n, st)], axis=-1)
    coords_bwd = coords + np.stack(
        [bwd[:, 0] * sx, bwd[:, 1] * sy, np.full(n, -st)], axis=-1)
    # keep excluded points inside the valid cube so forwards never reject them
    coords_fwd = np.where(has_fwd[:, None], coords_fwd, coords)
    coords_bwd = np.where(has_bwd[:, None], coords_bwd, coords)

    # backward gate: cycle t -> t-1 -> t checked against the stored fwd flow
    w_bwd = np.zeros(n)
    for t in np.unique(ts[has_bwd]):
        sel = np.flatnonzero(has_bwd & (ts == t))
        back_fwd = _bilinear_lookup(ds.flow_fwd[t - 1], ty_b[sel], tx_b[sel])
        err = np.hypot(bwd[sel, 0] + back_fwd[:, 0], bwd[sel, 1] + back_fwd[:, 1])
        w_bwd[sel] = (err < 1.0).astype(np.float64)

    return PointBatch(
        coords=coords, color=color, mask=mask, w=gate, w_bwd=w_bwd,
        coords_x=coords_x, coords_y=coords_y,
        color_x=color_x, color_y=color_y,
        valid_x=valid_x, valid_y=valid_y,
        coords_fwd=coords_fwd, coords_bwd=coords_bwd,
        has_fwd=has_fwd, has_bwd=has_bwd, frame_idx=ts,
    )
