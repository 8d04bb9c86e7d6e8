"""Central finite-difference gradient verification.

Used by the test suite and the `nvd gradcheck` subcommand. Checks run in
64-bit precision; large tensors are spot-checked on a random subset of
entries to keep the suite fast.
"""

from __future__ import annotations

import numpy as np

from . import dataio, losses, model
from .autodiff import Parameter, zero_grads
from .hashgrid import HashGridSpec
from .model import ArchSpec


def max_rel_error(fn, params, h: float = 1e-5, max_entries: int | None = None,
                  rng: np.random.Generator | None = None,
                  scale: float = 1.0) -> float:
    """Compare analytic grads of the scalar fn() against central differences.

    `params` is a name -> Parameter mapping; the relative error denominator
    is max(|analytic|, |numeric|, scale).
    """
    params = dict(params)
    zero_grads(params)
    fn().backward()
    analytic = {n: p.grad.copy() for n, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(fn().data)
            flat[i] = orig - h
            lo = float(fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), scale)
            worst = max(worst, err)
    return worst


def tiny_arch() -> ArchSpec:
    return ArchSpec(
        mapping_hidden=8, texture_hidden=8, residual_hidden=8, alpha_hidden=8,
        texture_grid=HashGridSpec(levels=2, base_resolution=4,
                                  max_resolution=8, table_size=64,
                                  feature_dim=2, input_dim=2),
        residual_grid=HashGridSpec(levels=2, base_resolution=4,
                                   max_resolution=8, table_size=64,
                                   feature_dim=2, input_dim=3),
    )


def tiny_batch(seed: int = 0, n: int = 16):
    scene = dataio.SynthSceneSpec(height=16, width=16, n_frames=3,
                                  sprite_size=6, start_row=2, start_col=2,
                                  velocity=(1, 1),
                                  background_seed=seed, sprite_seed=seed + 1)
    ds = dataio.synth_generate(scene)
    rng = np.random.default_rng(seed)
    return ds, dataio.sample_point_batch(ds, n, rng)


LOSS_TERMS = ("rgb", "grad", "flow", "sparsity", "residual", "alpha_reg",
              "rigidity", "alpha_boot", "total")


def check_loss_term(term: str, seed: int = 0, h: float = 1e-5,
                    max_entries: int = 4) -> float:
    """Max relative FD error of one weighted loss term w.r.t. all params."""
    arch = tiny_arch()
    rng = np.random.default_rng(seed)
    params = model.init_params(arch, rng)
    # Move params well off their init: near-flat networks put |r - 1| and
    # the patch-sigma guard right on their kinks, and near-singular mapping
    # Jacobians make the inverse term too stiff for central differences.
    for name, p in params.items():
        p.data += rng.uniform(-0.5, 0.5, size=p.data.shape)
        if ".residual." in name:
            p.data *= 2.0
    ds, batch = tiny_batch(seed)
    weights = losses.LossWeights(rigid_until=10, bootstrap_until=10)
    dims = (ds.n_frames, ds.height, ds.width)
    patch_rng_seed = seed + 17

    def fn():
        # fixed patch RNG so every FD evaluation sees the same sample
        total, tensors = losses.compute_loss_tensors(
            arch, params, batch, weights, 0,
            np.random.default_rng(patch_rng_seed), dims)
        return total if term == "total" else tensors[term]

    return max_rel_error(fn, params, h=h, max_entries=max_entries,
                         rng=np.random.default_rng(seed + 1))


def run_gradcheck(seed: int = 0, tol: float = 1e-4,
                  verbose: bool = False) -> int:
    """Check every loss term; returns the number of failures."""
    failures = 0
    for term in LOSS_TERMS:
        err = check_loss_term(term, seed=seed)
        ok = err < tol
        if verbose:
            print(f"term={term} max_rel_err={err:.3g} "
                  f"status={'pass' if ok else 'FAIL'}")
        if not ok:
            failures += 1
    return failures
