import numpy as np
import pytest

from nvd import dataio
from nvd.autodiff import set_precision
from nvd.hashgrid import HashGridSpec
from nvd.model import ArchSpec


@pytest.fixture(autouse=True)
def _test_precision():
    """All tests run in 64-bit unless they opt into train mode themselves."""
    set_precision("test")
    yield
    set_precision("test")


def tiny_arch(n_foreground: int = 1) -> ArchSpec:
    """A model small enough for oracles and finite differences."""
    return ArchSpec(
        mapping_hidden=8, texture_hidden=8, residual_hidden=8, alpha_hidden=8,
        n_foreground=n_foreground,
        texture_grid=HashGridSpec(levels=2, base_resolution=4,
                                  max_resolution=8, table_size=64,
                                  feature_dim=2, input_dim=2),
        residual_grid=HashGridSpec(levels=2, base_resolution=4,
                                   max_resolution=8, table_size=64,
                                   feature_dim=2, input_dim=3),
    )


def small_arch(hidden: int = 32) -> ArchSpec:
    """Desk-scale-but-fast model used by training tests."""
    return ArchSpec(
        mapping_hidden=hidden, texture_hidden=hidden,
        residual_hidden=hidden, alpha_hidden=hidden,
        texture_grid=HashGridSpec(levels=4, base_resolution=4,
                                  max_resolution=32, table_size=512,
                                  feature_dim=2, input_dim=2),
        residual_grid=HashGridSpec(levels=4, base_resolution=4,
                                   max_resolution=16, table_size=512,
                                   feature_dim=2, input_dim=3),
    )


def make_scene(height=24, width=24, n_frames=4, seed=0, velocity=(1, 1),
               sprite_size=8, shape="rectangle"):
    return dataio.SynthSceneSpec(
        height=height, width=width, n_frames=n_frames,
        sprite_size=sprite_size, start_row=3, start_col=3,
        velocity=velocity, sprite_shape=shape,
        background_seed=seed * 2 + 10, sprite_seed=seed * 2 + 11)


@pytest.fixture(scope="session")
def small_video():
    """A 24x24x4 synthetic clip shared by read-only tests."""
    return dataio.synth_generate(make_scene())


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
