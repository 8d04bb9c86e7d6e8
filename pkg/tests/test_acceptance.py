"""End-to-end acceptance gate.

Ten numbered checks covering gradients, encoding fidelity, training
quality, metamodel transfer, editing, flow gating, reproducibility and
the embedding compressor. Every test prints one `[acceptance NN]`
PASS/FAIL line straight to the terminal before asserting, so the
verdicts survive output capture.

The training checks run at desk scale (small frames, shrunk grids) in
32-bit precision; numeric identity checks run in 64-bit.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from nvd import atlas, dataio, gradcheck, hashgrid, hypernet, losses, model, \
    trainer
from nvd.autodiff import Tensor, set_precision
from nvd.hashgrid import HashGridSpec
from nvd.hypernet import HyperNetConfig
from nvd.losses import LossWeights
from nvd.model import ArchSpec
from nvd.trainer import MetaTrainer, NVDTrainer, TrainConfig, finetune_nvd, \
    train_meta


def announce(capsys, num: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        status = "PASS" if ok else "FAIL"
        print(f"\n[acceptance {num:02d}] {status} {detail}")


def video_alpha(params, dims, chunk=8192):
    f, h, w = dims
    tt, rr, cc = np.meshgrid(np.arange(f), np.arange(h), np.arange(w),
                             indexing="ij")
    coords = model.normalize_coords(tt.ravel(), rr.ravel(), cc.ravel(),
                                    f, h, w)
    out = np.empty(coords.shape[0])
    for lo in range(0, coords.shape[0], chunk):
        part = coords[lo : lo + chunk]
        out[lo : lo + part.shape[0]] = \
            model.alpha_value(params, part).data[:, 0]
    return out.reshape(dims)


# -- shared training runs -----------------------------------------------------

def overfit_arch() -> ArchSpec:
    return ArchSpec(
        mapping_hidden=32, texture_hidden=32, residual_hidden=32,
        alpha_hidden=32,
        texture_grid=HashGridSpec(levels=6, base_resolution=4,
                                  max_resolution=128, table_size=2048,
                                  feature_dim=2, input_dim=2),
        residual_grid=HashGridSpec(levels=4, base_resolution=4,
                                   max_resolution=32, table_size=512,
                                   feature_dim=2, input_dim=3))


@pytest.fixture(scope="session")
def overfit_run():
    """Train one model on a 64x64x8 scene until it clears 30 dB."""
    set_precision("train")
    scene = dataio.SynthSceneSpec(
        height=64, width=64, n_frames=8, sprite_size=16,
        start_row=8, start_col=8, velocity=(2, 1),
        background_seed=10, sprite_seed=11)
    ds = dataclasses.replace(dataio.synth_generate(scene), id="overfit")
    config = TrainConfig(iterations=5000, pretrain_iterations=100,
                         batch_size=1024, seed=0, arch=overfit_arch(),
                         log_interval=0, eval_interval=0)
    t = NVDTrainer(config, ds)
    start = time.perf_counter()
    t.pretrain()
    psnr = 0.0
    while t.iteration < config.iterations:
        t.step()
        if t.iteration % 250 == 0:
            psnr = trainer.evaluate_psnr(t.arch, t.params, ds)
            if psnr >= 30.0:
                break
    elapsed = time.perf_counter() - start
    dims = (ds.n_frames, ds.height, ds.width)
    alpha = video_alpha(t.params, dims)
    return {"arch": t.arch, "params": t.params, "ds": ds, "dims": dims,
            "psnr": psnr, "iterations": t.iteration, "elapsed": elapsed,
            "alpha": alpha}


def transfer_scene(i: int, shape: str, velocity) -> dataio.SynthSceneSpec:
    return dataio.SynthSceneSpec(
        height=32, width=32, n_frames=4, sprite_size=8,
        start_row=4, start_col=4, velocity=velocity, sprite_shape=shape,
        background_seed=100 + 2 * i, sprite_seed=101 + 2 * i)


@pytest.fixture(scope="session")
def transfer_runs(tmp_path_factory):
    """3-video metamodel, per-video 1-video baselines, paired fine-tunes.

    Scenes v0..v2 train the metamodel; v3 stays unseen and is used for the
    paired fine-tune-vs-scratch comparison over three seeds.
    """
    set_precision("train")
    specs = [transfer_scene(0, "rectangle", (2, 1)),
             transfer_scene(1, "disk", (1, 2)),
             transfer_scene(2, "rectangle", (1, 1)),
             transfer_scene(3, "disk", (2, 2))]
    datasets = {f"v{i}": dataclasses.replace(dataio.synth_generate(s),
                                             id=f"v{i}")
                for i, s in enumerate(specs)}
    arch = ArchSpec(
        mapping_hidden=32, texture_hidden=32, residual_hidden=32,
        alpha_hidden=32,
        texture_grid=HashGridSpec(levels=5, base_resolution=4,
                                  max_resolution=64, table_size=1024,
                                  feature_dim=2, input_dim=2),
        residual_grid=HashGridSpec(levels=4, base_resolution=4,
                                   max_resolution=16, table_size=512,
                                   feature_dim=2, input_dim=3))
    hyper = HyperNetConfig(embed_dim=32, hidden=64, n_hidden=1)

    def meta_config(videos):
        return TrainConfig(iterations=600, pretrain_iterations=100,
                           batch_size=512, seed=0, arch=arch, hyper=hyper,
                           embedding_mode="learnable", mrhe_mode="universal",
                           videos=videos, log_interval=0, eval_interval=0)

    meta = train_meta(meta_config(["v0", "v1", "v2"]), datasets=datasets)
    multi_scores = meta.eval_all()
    meta_path = tmp_path_factory.mktemp("transfer") / "meta.nvdc"
    meta.save(meta_path)

    single_scores = {}
    for vid in ("v0", "v1", "v2"):
        single = train_meta(meta_config([vid]), datasets=datasets)
        single_scores[vid] = single.eval_all()[vid]

    budget = 100
    pairs = []
    for seed in (0, 1, 2):
        config = TrainConfig(iterations=budget, pretrain_iterations=100,
                             batch_size=512, seed=seed, arch=arch,
                             hyper=hyper, log_interval=0, eval_interval=20)
        scratch = finetune_nvd(meta_path, datasets["v3"], config,
                               scratch=True)
        scratch_final = scratch.run()
        tuned = finetune_nvd(meta_path, datasets["v3"], config)
        tuned.run()
        crossing = next((it for it, p in tuned.psnr_curve
                         if p >= scratch_final), None)
        pairs.append({"seed": seed, "scratch_final": scratch_final,
                      "tuned_final": tuned.psnr_curve[-1][1],
                      "crossing": crossing})
    return {"multi": multi_scores, "single": single_scores,
            "pairs": pairs, "budget": budget}


# -- the ten checks -----------------------------------------------------------

def test_acceptance_01_loss_gradients_match_finite_differences(capsys):
    start = time.perf_counter()
    errors = {term: gradcheck.check_loss_term(term, max_entries=3)
              for term in gradcheck.LOSS_TERMS}
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 120.0
    announce(capsys, 1, ok,
             f"all {len(errors)} loss terms vs central differences: "
             f"worst rel err {worst:.2e} (tol 1e-4), {elapsed:.0f}s")
    assert worst < 1e-4, errors
    assert elapsed < 120.0


def test_acceptance_02_hash_encoding_matches_reference(capsys):
    start = time.perf_counter()
    set_precision("train")
    rng = np.random.default_rng(2)
    worst = 0.0
    for input_dim in (2, 3):
        spec = HashGridSpec(levels=4, base_resolution=4, max_resolution=32,
                            table_size=1024, feature_dim=2,
                            input_dim=input_dim)
        tables = hashgrid.init_tables(spec, rng, "g", scale=1.0)
        pts = rng.uniform(0, 1, (1000, input_dim)).astype(np.float32)
        out = hashgrid.encode(Tensor.const(pts), spec, tables).data
        ref = hashgrid.encode_reference(pts, spec, tables)
        worst = max(worst, float(np.abs(out - ref).max()))

    # vertex exactness: grid vertices read their table rows back verbatim
    spec2 = HashGridSpec(levels=3, base_resolution=4, max_resolution=16,
                         table_size=256, feature_dim=2, input_dim=2)
    tables2 = hashgrid.init_tables(spec2, rng, "g")
    vertex_exact = True
    for level in range(spec2.levels):
        n = hashgrid.resolution_for_level(spec2, level)
        pt = np.array([[2 / n, 3 / n]], dtype=np.float32)
        got = hashgrid.encode(Tensor.const(pt), spec2, tables2).data[0]
        idx = hashgrid.hash_cell_index(np.array([[2, 3]]), spec2.table_size)
        lo = level * spec2.feature_dim
        vertex_exact &= bool(np.array_equal(
            got[lo : lo + spec2.feature_dim],
            tables2[level].data[idx[0]]))

    # cell centers blend the four corners with equal weight
    spec1 = HashGridSpec(levels=1, base_resolution=4, max_resolution=4,
                         table_size=256, feature_dim=2, input_dim=2)
    tables1 = hashgrid.init_tables(spec1, rng, "g")
    center = np.array([[1.5 / 4, 2.5 / 4]], dtype=np.float32)
    got = hashgrid.encode(Tensor.const(center), spec1, tables1).data[0]
    idx = hashgrid.hash_cell_index(
        np.array([(1, 2), (2, 2), (1, 3), (2, 3)]), spec1.table_size)
    center_err = float(np.abs(got - tables1[0].data[idx].mean(axis=0)).max())

    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and vertex_exact and center_err < 1e-7 \
        and elapsed < 10.0
    announce(capsys, 2, ok,
             f"2000 random points vs reference: max err {worst:.2e} "
             f"(tol 1e-6), vertex exact={vertex_exact}, "
             f"center err {center_err:.1e}, {elapsed:.1f}s")
    assert worst < 1e-6
    assert vertex_exact
    assert center_err < 1e-7
    assert elapsed < 10.0


def test_acceptance_03_single_video_overfit(capsys, overfit_run):
    r = overfit_run
    alpha_err = float(np.abs(r["alpha"] - r["ds"].masks).mean())
    ok = (r["psnr"] >= 30.0 and r["iterations"] <= 5000
          and r["elapsed"] < 1800.0 and alpha_err < 0.1)
    announce(capsys, 3, ok,
             f"64x64x8 scene: {r['psnr']:.2f} dB at iteration "
             f"{r['iterations']} ({r['elapsed']:.0f}s), "
             f"mean |alpha - mask| = {alpha_err:.3f}")
    assert r["psnr"] >= 30.0
    assert r["iterations"] <= 5000
    assert r["elapsed"] < 1800.0
    assert alpha_err < 0.1


def test_acceptance_04_metamodel_speeds_up_unseen_video(capsys,
                                                        transfer_runs):
    pairs = transfer_runs["pairs"]
    budget = transfer_runs["budget"]
    wins = sum(p["crossing"] is not None and p["crossing"] <= budget
               for p in pairs)
    gains = [p["tuned_final"] - p["scratch_final"] for p in pairs]
    detail = ", ".join(
        f"seed {p['seed']}: scratch {p['scratch_final']:.1f} dB at "
        f"{budget}, tuned crosses at {p['crossing']}" for p in pairs)
    ok = wins >= 2
    announce(capsys, 4, ok,
             f"{wins}/3 fine-tunes reach the scratch PSNR within the "
             f"budget ({detail}); final gains "
             f"{', '.join(f'{g:+.2f} dB' for g in gains)} [reported only]")
    assert wins >= 2


def test_acceptance_05_multi_video_drop_is_bounded(capsys, transfer_runs):
    multi = transfer_runs["multi"]
    single = transfer_runs["single"]
    drops = {vid: single[vid] - multi[vid] for vid in single}
    ok = all(0.0 < d < 6.0 for d in drops.values())
    detail = ", ".join(f"{vid} {single[vid]:.1f}->{multi[vid]:.1f} "
                       f"(-{d:.2f} dB)" for vid, d in drops.items())
    announce(capsys, 5, ok, f"3-video sharing cost per video: {detail}; "
             f"required 0 < drop < 6 dB")
    for vid, d in drops.items():
        assert 0.0 < d < 6.0, (vid, d)


def test_acceptance_06_closed_form_loss_values(capsys):
    w = LossWeights()
    j1 = Tensor.const(np.array([[1.0, 0.0]]))
    j2 = Tensor.const(np.array([[0.0, 1.0]]))
    rigid = float(losses.dirichlet_energy(j1, j2, w.jacobian_delta).data[0])
    rigid_err = abs(rigid - 2.0 * math.sqrt(2.0))

    # analytic translating scene with ground-truth-consistent mappings
    rng = np.random.default_rng(6)
    vel = (0.25, 0.125)
    dt = 0.125
    coords = rng.uniform(-0.5, 0.5, (200, 3))
    on_sprite = rng.uniform(0, 1, 200) < 0.5
    step = np.where(on_sprite[:, None],
                    np.array([[vel[0] * dt, vel[1] * dt, dt]]),
                    np.array([[0.0, 0.0, dt]]))

    def ideal_uv(c):
        bg = np.column_stack([c[:, 0], c[:, 1]]) / 2.0
        fg = np.column_stack([c[:, 0] - c[:, 2] * vel[0],
                              c[:, 1] - c[:, 2] * vel[1]]) / 4.0
        return {"b": Tensor.const(bg), "f": Tensor.const(fg)}

    alpha = Tensor.const(on_sprite.astype(float)[:, None])
    flow_val = abs(float(losses.flow_loss(
        ArchSpec(), ideal_uv(coords), ideal_uv(coords + step),
        alpha, alpha, np.ones(200), w).data))

    half = Tensor.const(np.full((10, 1), 0.5))
    areg = w.alpha_reg * float(losses.alpha_reg_loss(half, w).data)
    areg_err = abs(areg - 0.1 * math.log(2.0))
    boot = w.alpha_boot * float(
        losses.alpha_bootstrap_loss(half, np.ones(10), w).data)
    boot_err = abs(boot - 2.0 * math.log(2.0))

    ok = max(rigid_err, flow_val, areg_err, boot_err) < 1e-9
    announce(capsys, 6, ok,
             f"rigidity(I) err {rigid_err:.1e}, ideal-mapping flow "
             f"{flow_val:.1e}, alpha-reg err {areg_err:.1e}, "
             f"bootstrap err {boot_err:.1e} (all tol 1e-9)")
    assert rigid_err < 1e-9
    assert flow_val < 1e-9
    assert areg_err < 1e-9
    assert boot_err < 1e-9


def test_acceptance_07_edit_round_trip(capsys, overfit_run):
    set_precision("train")
    r = overfit_run
    arch, params, dims = r["arch"], r["params"], r["dims"]
    recon = atlas.reconstruct_video(arch, params, dims)

    edits = {}
    for layer in model.layer_ids(arch):
        a = atlas.render_atlas(arch, params, layer, g=1000)
        edits[layer] = atlas.EditedAtlas(a, a.pixels)
    identity = atlas.recompose_video(arch, params, dims, edits=edits)
    id_psnr = atlas.psnr(identity, recon)

    # moderate foreground recolor; background-dominant pixels must not move
    base = atlas.render_atlas(arch, params, "f", g=256)
    tinted = np.clip(base.pixels + np.array([0.2, -0.2, 0.2]), 0, 1)
    edited = atlas.recompose_video(
        arch, params, dims, edits={"f": atlas.EditedAtlas(base, tinted)})
    delta = np.abs(edited - recon).max(axis=-1)
    bg_dominant = r["alpha"] < 0.01
    bg_leak = float(delta[bg_dominant].max())
    fg_moved = float(delta[r["alpha"] > 0.9].max())

    ok = id_psnr >= 40.0 and bg_leak < 1.0 / 255.0 and fg_moved > 0.05
    announce(capsys, 7, ok,
             f"identity edit at G=1000: {id_psnr:.1f} dB (>= 40); "
             f"foreground tint leaks {bg_leak * 255:.2f}/255 into "
             f"alpha<0.01 pixels (< 1), moves opaque pixels by "
             f"{fg_moved:.2f}")
    assert id_psnr >= 40.0
    assert bg_leak < 1.0 / 255.0
    assert fg_moved > 0.05


def test_acceptance_08_flow_consistency_gate(capsys):
    scene = dataio.SynthSceneSpec(
        height=64, width=64, n_frames=6, sprite_size=16, start_row=8,
        start_col=8, velocity=(1, 1), background_seed=20, sprite_seed=21)
    ds = dataio.synth_generate(scene)
    accept = min(float(ds.w[t].mean()) for t in range(ds.n_frames - 1))

    bad = ds.flow_fwd[0] + np.array([2.0, 0.0])
    w = dataio.flow_consistency_weights(bad, ds.flow_bwd[1])
    ys, xs = np.mgrid[0:64, 0:64]
    in_bounds = (xs + bad[..., 0] >= 0) & (xs + bad[..., 0] <= 63)
    reject = 1.0 - float(w[in_bounds].mean())

    ok = accept >= 0.99 and reject >= 0.99
    announce(capsys, 8, ok,
             f"ground-truth flow accepted on {accept:.1%} of pixels "
             f"(>= 99%), 2-px corrupted flow rejected on {reject:.1%} "
             f"(>= 99%)")
    assert accept >= 0.99
    assert reject >= 0.99


def test_acceptance_09_training_is_bit_reproducible(capsys, tmp_path):
    set_precision("train")
    datasets = {}
    for i in range(2):
        ds = dataio.synth_generate(transfer_scene(i, "rectangle", (1, 1)))
        datasets[f"v{i}"] = dataclasses.replace(ds, id=f"v{i}")
    config = TrainConfig(
        iterations=10, pretrain_iterations=100, batch_size=256, seed=0,
        arch=ArchSpec(mapping_hidden=16, texture_hidden=16,
                      residual_hidden=16, alpha_hidden=16,
                      texture_grid=HashGridSpec(
                          levels=3, base_resolution=4, max_resolution=16,
                          table_size=256, feature_dim=2, input_dim=2),
                      residual_grid=HashGridSpec(
                          levels=3, base_resolution=4, max_resolution=16,
                          table_size=256, feature_dim=2, input_dim=3)),
        hyper=HyperNetConfig(embed_dim=32, hidden=32, n_hidden=1),
        embedding_mode="learnable", mrhe_mode="universal",
        videos=["v0", "v1"], log_interval=0, eval_interval=0)

    paths = []
    for run in range(2):
        t = train_meta(dataclasses.replace(config), datasets=datasets)
        p = tmp_path / f"run{run}.nvdc"
        t.save(p)
        paths.append(p)
    identical = paths[0].read_bytes() == paths[1].read_bytes()

    # interrupted-and-resumed run replays the uninterrupted one exactly
    half = MetaTrainer(dataclasses.replace(config, iterations=5),
                       datasets=datasets)
    half.run()
    mid = tmp_path / "mid.nvdc"
    half.save(mid)
    resumed = MetaTrainer.load(mid, datasets=datasets)
    resumed.config.iterations = 10
    resumed.run()
    final = tmp_path / "resumed.nvdc"
    resumed.save(final)
    resumed_tensors = trainer.load_checkpoint(final).tensors
    full_tensors = trainer.load_checkpoint(paths[0]).tensors
    replay_ok = all(np.array_equal(full_tensors[k], resumed_tensors[k])
                    for k in full_tensors)

    ok = identical and replay_ok
    announce(capsys, 9, ok,
             f"two seeded runs byte-identical={identical}, "
             f"checkpoint resume replays bit-exactly={replay_ok}")
    assert identical
    assert replay_ok


def test_acceptance_10_embedding_compressor(capsys):
    rng = np.random.default_rng(10)
    features = np.outer(rng.standard_normal(768), rng.standard_normal(64))
    embedding, final_l1 = hypernet.compress_embedding(features, epochs=2000)
    ok = final_l1 < 1e-3 and embedding.shape == (768,)
    announce(capsys, 10, ok,
             f"rank-1 768x64 matrix: L1 {final_l1:.2e} after 2000 steps "
             f"(tol 1e-3), embedding length {embedding.size}")
    assert final_l1 < 1e-3
    assert embedding.shape == (768,)
