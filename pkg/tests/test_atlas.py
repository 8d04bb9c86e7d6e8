"""Atlas rendering, edited recomposition, image metrics, PNG export."""

import numpy as np
import pytest

from nvd import atlas, model
from nvd.atlas import EditedAtlas, TextureAtlas

from conftest import tiny_arch


@pytest.fixture()
def arch():
    return tiny_arch()


@pytest.fixture()
def params(arch, rng):
    p = model.init_params(arch, rng)
    for t in p.values():
        t.data += rng.uniform(-0.3, 0.3, t.data.shape)
    return p


# -- rendering ----------------------------------------------------------------

def test_atlas_grid_at_g2_hits_corners(arch, params):
    out = atlas.render_atlas(arch, params, "b", g=2)
    assert out.pixels.shape == (2, 2, 3)
    corners = {
        (0, 0): (-1.0, -1.0), (0, 1): (1.0, -1.0),
        (1, 0): (-1.0, 1.0), (1, 1): (1.0, 1.0),
    }
    for (i, j), (u, v) in corners.items():
        direct = model.texture_color(arch, params, "b",
                                     np.array([[u, v]])).data[0]
        np.testing.assert_array_equal(out.pixels[i, j], direct)


def test_atlas_pixel_centers_match_texture_module(arch, params, rng):
    g = 9
    out = atlas.render_atlas(arch, params, "f", g=g)
    for _ in range(20):
        i, j = rng.integers(0, g, 2)
        uv = np.array([[2.0 * j / (g - 1) - 1.0, 2.0 * i / (g - 1) - 1.0]])
        direct = model.texture_color(arch, params, "f", uv).data[0]
        assert np.abs(out.pixels[i, j] - direct).max() < 1e-6


def test_atlas_render_deterministic_and_chunk_invariant(arch, params):
    a = atlas.render_atlas(arch, params, "b", g=16, chunk=8192)
    b = atlas.render_atlas(arch, params, "b", g=16, chunk=7)
    np.testing.assert_array_equal(a.pixels, b.pixels)


def test_atlas_rejects_degenerate_resolution(arch, params):
    with pytest.raises(ValueError):
        atlas.render_atlas(arch, params, "b", g=1)


# -- edits --------------------------------------------------------------------

def test_edit_resolution_must_match(arch, params):
    base = atlas.render_atlas(arch, params, "b", g=8)
    with pytest.raises(ValueError):
        EditedAtlas(base, np.zeros((9, 9, 3)))


def test_constant_edit_samples_constant(rng):
    base = TextureAtlas("f", np.full((16, 16, 3), 0.25))
    edited = EditedAtlas(base, np.full((16, 16, 3), 0.75))
    uv = rng.uniform(-1, 1, (100, 2))
    np.testing.assert_allclose(atlas.sample_edited_atlas(edited, uv), 0.75)


def test_edited_sample_matches_unedited_lookup(arch, params, rng):
    # sampling an identity edit reproduces the atlas' own bilinear surface
    base = atlas.render_atlas(arch, params, "b", g=64)
    edited = EditedAtlas(base, base.pixels.copy())
    g = 64
    ij = rng.integers(0, g, (50, 2))
    uv = np.column_stack([2.0 * ij[:, 1] / (g - 1) - 1.0,
                          2.0 * ij[:, 0] / (g - 1) - 1.0])
    got = atlas.sample_edited_atlas(edited, uv)
    np.testing.assert_allclose(got, base.pixels[ij[:, 0], ij[:, 1]],
                               atol=1e-12)


def test_identity_edit_recomposition_matches_reconstruction(arch, params):
    dims = (2, 12, 12)
    recon = atlas.reconstruct_video(arch, params, dims)
    edits = {layer: EditedAtlas(a := atlas.render_atlas(arch, params, layer,
                                                        g=256), a.pixels)
             for layer in model.layer_ids(arch)}
    edited = atlas.recompose_video(arch, params, dims, edits=edits)
    assert atlas.psnr(edited, recon) >= 40.0


def test_all_black_edit_darkens_everything(arch, params):
    dims = (2, 10, 10)
    black = np.zeros((32, 32, 3))
    edits = {layer: EditedAtlas(atlas.render_atlas(arch, params, layer, g=32),
                                black)
             for layer in model.layer_ids(arch)}
    out = atlas.recompose_video(arch, params, dims, edits=edits)
    assert np.abs(out).max() < 1e-12


def test_recompose_rejects_unknown_layer(arch, params):
    base = atlas.render_atlas(arch, params, "b", g=8)
    with pytest.raises(ValueError):
        atlas.recompose_video(arch, params, (1, 4, 4),
                              edits={"sky": EditedAtlas(base, base.pixels)})


# -- metrics ------------------------------------------------------------------

def test_psnr_known_mse(rng):
    a = np.full((8, 8, 3), 0.5)
    b = a + 0.1  # MSE = 0.01 -> 20 dB
    assert abs(atlas.psnr(a, b) - 20.0) < 1e-9
    assert atlas.psnr(a, b) == atlas.psnr(b, a)


def test_psnr_identical_is_capped():
    a = np.zeros((4, 4, 3))
    assert atlas.psnr(a, a) == 99.0


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        atlas.psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_identical_and_constant(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    assert abs(atlas.ssim(img, img) - 1.0) < 1e-12
    flat = np.full((16, 16, 3), 0.3)
    assert abs(atlas.ssim(flat, flat) - 1.0) < 1e-12


def test_ssim_penalizes_noise(rng):
    img = rng.uniform(0.2, 0.8, (24, 24, 3))
    noisy = np.clip(img + rng.normal(0, 0.2, img.shape), 0, 1)
    assert atlas.ssim(img, noisy) < 0.95


def test_ssim_window_too_small():
    with pytest.raises(ValueError):
        atlas.ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_ssim_matches_loop_reference(rng):
    a = rng.uniform(0, 1, (12, 12))
    b = rng.uniform(0, 1, (12, 12))
    got = atlas.ssim(a, b)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(12 - 8 + 1):
        for j in range(12 - 8 + 1):
            wa = a[i : i + 8, j : j + 8]
            wb = b[i : i + 8, j : j + 8]
            ma, mb = wa.mean(), wb.mean()
            va, vb = wa.var(), wb.var()
            cov = (wa * wb).mean() - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert abs(got - np.mean(vals)) < 1e-12


def test_video_ssim_averages_frames(rng):
    vid = rng.uniform(0, 1, (3, 16, 16, 3))
    per_frame = [atlas.ssim(vid[t], vid[t]) for t in range(3)]
    assert abs(atlas.video_ssim(vid, vid) - np.mean(per_frame)) < 1e-12


# -- PNG round trip -----------------------------------------------------------

def test_atlas_png_round_trip(tmp_path, arch, params):
    out = atlas.render_atlas(arch, params, "f", g=16)
    path = tmp_path / "f.png"
    atlas.save_atlas_png(out, path, checkpoint_digest="abc123")
    back = atlas.load_atlas_png(path)
    assert back.layer == "f"
    assert back.resolution == 16
    assert np.abs(back.pixels - out.pixels).max() <= 0.5 / 255.0 + 1e-12
    meta = (tmp_path / "f.png.meta").read_text()
    assert "layer=f" in meta and "checkpoint=abc123" in meta


def test_atlas_png_layer_override(tmp_path, arch, params):
    out = atlas.render_atlas(arch, params, "b", g=8)
    path = tmp_path / "b.png"
    atlas.save_atlas_png(out, path)
    assert atlas.load_atlas_png(path, layer="b").layer == "b"
