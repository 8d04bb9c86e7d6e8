"""Self-supervised training objective for layered video decomposition.

Every term is differentiable through the autodiff substrate. Term functions
return unweighted scalars unless noted; `compute_losses` assembles the
weighted total with the iteration schedules and an itemized report.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import model
from .autodiff import Tensor
from .model import ArchSpec, ModelOutputs

_NORM_EPS = 1e-12


@dataclass
class LossWeights:
    rgb: float = 5.0             # lambda_r
    grad: float = 1.0            # lambda_g
    flow_p: float = 0.01         # lambda_fp
    flow_alpha: float = 0.05     # lambda_f-alpha
    sparsity: float = 1.0        # lambda_s
    res_smooth: float = 0.1      # lambda_res-s
    res_reg: float = 0.5         # lambda_res-r
    alpha_reg: float = 0.1       # lambda_alpha-reg
    rigidity: float = 0.001      # lambda_rigid
    alpha_boot: float = 2.0      # lambda_alpha
    rigid_until: int = 5000
    bootstrap_until: int = 10000
    ncc_patch: int = 3
    ncc_eps: float = 1e-6
    n_residual_patches: int = 64
    # the literal text sums +NCC; the stated intent is positive correlation,
    # which (1 - NCC) rewards -- flag restores the literal formula
    literal_ncc: bool = False
    # self-entropy binarization by default; flag switches to BCE(max alpha, 1)
    alpha_reg_target_one: bool = False
    log_eps: float = 1e-7
    jacobian_delta: float = 1e-10

    def __post_init__(self):
        for name in ("rgb", "grad", "flow_p", "flow_alpha", "sparsity",
                     "res_smooth", "res_reg", "alpha_reg", "rigidity",
                     "alpha_boot"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.ncc_patch < 3 or self.ncc_patch % 2 == 0:
            raise ValueError("ncc_patch must be odd and >= 3")
        if self.rigid_until < 0 or self.bootstrap_until < 0:
            raise ValueError("schedule cutoffs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)


@dataclass
class LossReport:
    iteration: int
    terms: dict = field(default_factory=dict)  # weighted contributions
    total: float = 0.0

    def line(self) -> str:
        parts = [f"iter={self.iteration}"]
        parts += [f"{k}={v:.6g}" for k, v in self.terms.items()]
        parts.append(f"total={self.total:.6g}")
        return " ".join(parts)

    def check(self, rel_tol: float = 1e-6) -> None:
        s = sum(self.terms.values())
        if abs(s - self.total) > rel_tol * max(1.0, abs(self.total)):
            raise AssertionError(
                f"report total {self.total} != sum of terms {s}")


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of `values` over entries where mask is nonzero (0 if none)."""
    count = float(np.count_nonzero(mask))
    if count == 0:
        return Tensor(np.zeros(()))
    return (values * mask.astype(float)).sum() * (1.0 / count)


def _row_norm(delta: Tensor) -> Tensor:
    """Per-row Euclidean norm; exactly 0 (with zero gradient) on zero rows."""
    sq = (delta * delta).sum(axis=1)
    nz = (sq.data > 0).astype(float)
    return (sq + _NORM_EPS * (1.0 - nz)).sqrt() * nz


# -- individual terms ---------------------------------------------------------

def rgb_loss(recon: Tensor, gt: np.ndarray) -> Tensor:
    """Mean per-point squared color distance."""
    diff = recon - Tensor.const(gt)
    return (diff * diff).sum(axis=1).mean()


def grad_loss(comp, comp_x, comp_y, gt, gt_x, gt_y, valid_x, valid_y) -> Tensor:
    """Forward-difference spatial derivative matching, boundary excluded."""
    dhat_x = comp_x - comp
    dhat_y = comp_y - comp
    dx = Tensor.const(gt_x - gt)
    dy = Tensor.const(gt_y - gt)
    ex = ((dhat_x - dx) ** 2).sum(axis=1)
    ey = ((dhat_y - dy) ** 2).sum(axis=1)
    return _masked_mean(ex, valid_x) + _masked_mean(ey, valid_y)


def flow_loss(spec: ArchSpec, uv_p: dict, uv_q: dict, alpha_p: Tensor,
              alpha_q: Tensor, gate: np.ndarray, weights: LossWeights) -> Tensor:
    """Weighted mapping + alpha consistency along one flow direction.

    `gate` combines the forward-backward check with direction validity.
    Foreground mapping terms are opacity-weighted, the background term by
    the composite transparency. Already includes lambda_fp / lambda_f-alpha.
    """
    fg = model.foreground_ids(spec)
    transparency = None
    term_p = None
    for i, layer in enumerate(fg):
        a = alpha_p[:, i]
        contrib = a * _row_norm(uv_p[layer] - uv_q[layer])
        term_p = contrib if term_p is None else term_p + contrib
        t = 1.0 - a
        transparency = t if transparency is None else transparency * t
    term_p = term_p + transparency * _row_norm(uv_p["b"] - uv_q["b"])
    term_a = (alpha_p - alpha_q).abs().sum(axis=1)
    per_point = weights.flow_p * term_p + weights.flow_alpha * term_a
    return _masked_mean(per_point, gate)


def sparsity_loss(alpha: Tensor, fg_colors: list) -> Tensor:
    """Mean squared norm of transparency-weighted foreground color."""
    total = None
    for i, c in enumerate(fg_colors):
        masked = (1.0 - alpha[:, i : i + 1]) * c
        term = (masked * masked).sum(axis=1)
        total = term if total is None else total + term
    return total.mean()


def residual_smoothness(r1: Tensor, r2: Tensor,
                        weights: LossWeights) -> Tensor:
    """Patchwise temporal correlation term over (P, k*k) residual patches.

    Default form is (1 - NCC) + var(r2); constant patches (sigma below the
    guard) drop the correlation term but keep the variance term.
    """
    m1 = r1.mean(axis=1, keepdims=True)
    m2 = r2.mean(axis=1, keepdims=True)
    c1 = r1 - m1
    c2 = r2 - m2
    var1 = (c1 * c1).mean(axis=1)
    var2 = (c2 * c2).mean(axis=1)
    s1 = (var1 + _NORM_EPS).sqrt()
    s2 = (var2 + _NORM_EPS).sqrt()
    ncc = (c1 * c2).mean(axis=1) / (s1 * s2)
    active = ((s1.data > weights.ncc_eps)
              & (s2.data > weights.ncc_eps)).astype(float)
    corr = ncc if weights.literal_ncc else 1.0 - ncc
    return (corr * active + var2).mean()


def residual_reg(residuals: list) -> Tensor:
    """Mean |r - 1| over all layers' residual samples."""
    total = None
    count = 0
    for r in residuals:
        s = (r - 1.0).abs().sum()
        total = s if total is None else total + s
        count += r.size
    return total * (1.0 / count)


def _max_alpha(alpha: Tensor) -> Tensor:
    if alpha.data.shape[1] == 1:
        return alpha[:, 0]
    idx = np.argmax(alpha.data, axis=1)
    return alpha[np.arange(alpha.data.shape[0]), idx]


def alpha_reg_loss(alpha: Tensor, weights: LossWeights) -> Tensor:
    """Binarization pressure on the maximum opacity (unweighted)."""
    a = _max_alpha(alpha).clip(weights.log_eps, 1.0 - weights.log_eps)
    if weights.alpha_reg_target_one:
        return (-(a.log())).mean()
    ent = -(a * a.log()) - (1.0 - a) * (1.0 - a).log()
    return ent.mean()


def alpha_bootstrap_loss(alpha: Tensor, mask: np.ndarray,
                         weights: LossWeights) -> Tensor:
    """BCE between the (max) predicted opacity and the reference mask."""
    a = _max_alpha(alpha).clip(weights.log_eps, 1.0 - weights.log_eps)
    m = Tensor.const(mask)
    bce = -(m * a.log()) - (1.0 - m) * (1.0 - a).log()
    return bce.mean()


def dirichlet_energy(j1: Tensor, j2: Tensor, delta: float) -> Tensor:
    """Per-point ||J^T J||_F + ||(J^T J + delta I)^-1||_F for 2x2 Jacobians.

    j1, j2 are the (N, 2) Jacobian columns. Closed-form 2x2 algebra keeps
    this cheap and exactly differentiable.
    """
    a = (j1 * j1).sum(axis=1)
    b = (j1 * j2).sum(axis=1)
    c = (j2 * j2).sum(axis=1)
    fro = (a * a + 2.0 * (b * b) + c * c + _NORM_EPS).sqrt()
    ad = a + delta
    cd = c + delta
    det = ad * cd - b * b
    fro_inv = (ad * ad + 2.0 * (b * b) + cd * cd + _NORM_EPS).sqrt() / det
    return fro + fro_inv


def rigidity_loss(spec: ArchSpec, uv_p: dict, uv_x: dict, uv_y: dict,
                  valid_x: np.ndarray, valid_y: np.ndarray,
                  scale_x: float, scale_y: float,
                  weights: LossWeights) -> Tensor:
    """Symmetric-Dirichlet rigidity of every mapping module (unweighted).

    The finite-difference Jacobian is scaled so an isometric video-to-
    texture map yields J = I. Points whose pixel neighbors fall outside
    the frame are excluded.
    """
    valid = valid_x & valid_y
    total = None
    for layer in model.layer_ids(spec):
        j1 = (uv_x[layer] - uv_p[layer]) * scale_x
        j2 = (uv_y[layer] - uv_p[layer]) * scale_y
        d = dirichlet_energy(j1, j2, weights.jacobian_delta)
        term = _masked_mean(d, valid)
        total = term if total is None else total + term
    return total


# -- residual patch sampling --------------------------------------------------

def sample_residual_patches(ds_dims: tuple, weights: LossWeights,
                            rng: np.random.Generator):
    """Coordinates for P patch/time-pair triples: two (P*k*k, 3) arrays.

    Patches share spatial locations across two distinct random frames.
    Requires at least two frames; returns None otherwise.
    """
    f, h, w = ds_dims
    if f < 2:
        return None
    k = weights.ncc_patch
    p = weights.n_residual_patches
    rows = rng.integers(0, h - k + 1, size=p)
    cols = rng.integers(0, w - k + 1, size=p)
    t1 = rng.integers(0, f, size=p)
    shift = rng.integers(1, f, size=p)
    t2 = (t1 + shift) % f
    dy, dx = np.mgrid[0:k, 0:k]
    rr = (rows[:, None] + dy.ravel()[None, :]).ravel()
    cc = (cols[:, None] + dx.ravel()[None, :]).ravel()
    tt1 = np.repeat(t1, k * k)
    tt2 = np.repeat(t2, k * k)
    c1 = model.normalize_coords(tt1, rr, cc, f, h, w)
    c2 = model.normalize_coords(tt2, rr, cc, f, h, w)
    return c1, c2


def residual_loss(spec: ArchSpec, params, batch_residuals: list,
                  patch_coords, weights: LossWeights) -> Tensor:
    """Combined residual term: lambda_res-s * smoothness + lambda_res-r * reg."""
    reg = residual_reg(batch_residuals)
    total = weights.res_reg * reg
    if patch_coords is not None and weights.res_smooth > 0:
        c1, c2 = patch_coords
        k2 = weights.ncc_patch**2
        p = c1.shape[0] // k2
        smooth = None
        for layer in model.layer_ids(spec):
            r1 = model.residual_coeff(spec, params, layer, c1).reshape(p, k2)
            r2 = model.residual_coeff(spec, params, layer, c2).reshape(p, k2)
            s = residual_smoothness(r1, r2, weights)
            smooth = s if smooth is None else smooth + s
        total = total + weights.res_smooth * (smooth * (1.0 / len(model.layer_ids(spec))))
    return total


# -- assembly -----------------------------------------------------------------

def compute_loss_tensors(spec: ArchSpec, params, batch, weights: LossWeights,
                         iteration: int, rng: np.random.Generator,
                         frame_dims: tuple):
    """Evaluate the full objective on one point batch.

    frame_dims is (F, H, W) of the source video (for Jacobian scaling and
    residual patch sampling). Returns (total Tensor, weighted term Tensors).
    """
    f, h, w = frame_dims
    out_p: ModelOutputs = model.reconstruct_points(spec, params, batch.coords)
    out_x: ModelOutputs = model.reconstruct_points(spec, params, batch.coords_x)
    out_y: ModelOutputs = model.reconstruct_points(spec, params, batch.coords_y)

    terms: dict[str, Tensor] = {}
    terms["rgb"] = weights.rgb * rgb_loss(out_p.comp, batch.color)
    terms["grad"] = weights.grad * grad_loss(
        out_p.comp, out_x.comp, out_y.comp,
        batch.color, batch.color_x, batch.color_y,
        batch.valid_x, batch.valid_y)

    # flow consistency over both temporal directions
    flow_total = None
    n_dirs = 0
    for coords_q, has_dir, gate in (
            (batch.coords_fwd, batch.has_fwd, batch.w),
            (batch.coords_bwd, batch.has_bwd, batch.w_bwd)):
        g = gate * has_dir.astype(float)
        if np.count_nonzero(g) == 0:
            continue
        uv_q = {layer: model.map_points(params, layer, coords_q)
                for layer in model.layer_ids(spec)}
        alpha_q = model.alpha_value(params, coords_q)
        term = flow_loss(spec, out_p.uv, uv_q, out_p.alpha, alpha_q, g, weights)
        flow_total = term if flow_total is None else flow_total + term
        n_dirs += 1
    if flow_total is None:
        flow_total = Tensor(np.zeros(()))
    else:
        flow_total = flow_total * (1.0 / n_dirs)
    terms["flow"] = flow_total

    fg = model.foreground_ids(spec)
    terms["sparsity"] = weights.sparsity * sparsity_loss(
        out_p.alpha, [out_p.color[layer] for layer in fg])

    patch_coords = sample_residual_patches((f, h, w), weights, rng)
    terms["residual"] = residual_loss(
        spec, params,
        [out_p.residual[layer] for layer in model.layer_ids(spec)],
        patch_coords, weights)

    terms["alpha_reg"] = weights.alpha_reg * alpha_reg_loss(out_p.alpha, weights)

    if iteration < weights.rigid_until:
        scale_x = (w - 1) / 2.0 if w > 1 else 1.0
        scale_y = (h - 1) / 2.0 if h > 1 else 1.0
        terms["rigidity"] = weights.rigidity * rigidity_loss(
            spec, out_p.uv, out_x.uv, out_y.uv,
            batch.valid_x, batch.valid_y, scale_x, scale_y, weights)
    if iteration < weights.bootstrap_until:
        terms["alpha_boot"] = weights.alpha_boot * alpha_bootstrap_loss(
            out_p.alpha, batch.mask, weights)

    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total, terms


def compute_losses(spec: ArchSpec, params, batch, weights: LossWeights,
                   iteration: int, rng: np.random.Generator,
                   frame_dims: tuple):
    """Like compute_loss_tensors, but returns (total Tensor, LossReport)."""
    total, terms = compute_loss_tensors(spec, params, batch, weights,
                                        iteration, rng, frame_dims)
    report = LossReport(
        iteration=iteration,
        terms={k: float(v.data) for k, v in terms.items()},
        total=float(total.data),
    )
    return total, report
