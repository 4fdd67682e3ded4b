import numpy as np
import pytest

from deepntl.calib import ProductId
from deepntl.dataset import build_examples, sample_points, split_manifest, synth_series
from deepntl.errors import CheckpointError, DataError
from deepntl.model import ModelConfig, init_params, save_checkpoint
from deepntl.pipeline import (bilinear_upsample2x, plan_layout, reassemble, reconstruct_year,
                              tile_grid)
from deepntl.raster import Raster
from deepntl.train import TrainConfig, train_loop, with_target_scale


class TestBilinear:
    def test_ramp(self):
        out = bilinear_upsample2x(Raster(np.array([[0.0, 2.0]])))
        assert out.data.tolist() == [[0, 0.5, 1.5, 2], [0, 0.5, 1.5, 2]]

    def test_constant(self):
        out = bilinear_upsample2x(Raster(np.full((3, 5), 7.25)))
        assert out.shape == (6, 10)
        assert np.all(out.data == 7.25)

    def test_mean_preserved(self):
        ramp = np.add.outer(np.arange(9.0), 3 * np.arange(13.0))
        for a in (np.full((4, 4), 3.0), ramp):
            out = bilinear_upsample2x(Raster(a))
            assert out.data.mean() == pytest.approx(a.mean(), abs=1e-6)

    def test_georef(self):
        out = bilinear_upsample2x(Raster(np.ones((2, 2)), 10, 20, 1, -1))
        assert (out.x0, out.y0, out.dx, out.dy) == (10, 20, 0.5, -0.5)


class TestTiling:
    def test_exact_fit(self):
        tiles, lay = tile_grid(Raster(np.zeros((256, 256))), 128, 128)
        assert len(tiles) == 4 and (lay.pad_bottom, lay.pad_right) == (0, 0)

    def test_padding(self):
        tiles, lay = tile_grid(Raster(np.ones((130, 130))), 128, 128)
        assert len(tiles) == 4
        assert (lay.pad_bottom, lay.pad_right) == (126, 126)
        assert lay.grid_rows * lay.tile_h == lay.source_rows + lay.pad_bottom
        assert tiles[3].data[2:, :].sum() == 0 and tiles[3].data[:2, :2].sum() == 4

    def test_single_tile(self):
        r = Raster(np.random.default_rng(0).random((10, 10)))
        tiles, lay = tile_grid(r, 10, 10)
        assert tiles == [r]
        assert reassemble(tiles, lay) == r

    def test_row_major(self):
        r = Raster(np.arange(16.0).reshape(4, 4))
        tiles, _ = tile_grid(r, 2, 2)
        assert [t.data[0, 0] for t in tiles] == [0, 2, 8, 10]

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rows, cols = rng.integers(1, 301, size=2)
            th, tw = rng.integers(1, 160, size=2)
            r = Raster(rng.normal(size=(rows, cols)).astype(np.float32))
            back = reassemble(*tile_grid(r, th, tw))
            assert back.data.tobytes() == r.data.tobytes()

    def test_wrong_count_and_shape(self):
        tiles, lay = tile_grid(Raster(np.ones((5, 5))), 2, 2)
        with pytest.raises(DataError):
            reassemble(tiles[:-1], lay)
        with pytest.raises(DataError):
            reassemble(tiles[:-1] + [Raster(np.ones((3, 3)))], lay)

    def test_overlap_averages(self):
        r = Raster(np.random.default_rng(1).random((20, 17)).astype(np.float32))
        tiles, lay = tile_grid(r, 8, 8, overlap=3)
        assert lay.stride_h == 5
        assert np.allclose(reassemble(tiles, lay).data, r.data, atol=1e-6)

    def test_bad_tile(self):
        with pytest.raises(DataError):
            plan_layout(4, 4, 0, 2)
        with pytest.raises(DataError):
            plan_layout(4, 4, 2, 2, overlap=2)


def random_scene(rng, rows, cols):
    return (Raster(rng.integers(0, 64, size=(rows, cols)).astype(float)),
            Raster(rng.integers(0, 64, size=(rows, cols)).astype(float)),
            Raster(rng.uniform(0, 300, size=(2 * rows, 2 * cols))))


class TestReconstruct:
    def test_shape_and_clamp(self):
        cfg = ModelConfig.toy(8, 8)
        scene = random_scene(np.random.default_rng(0), 20, 13)
        out = reconstruct_year(save_checkpoint(init_params(cfg), cfg), *scene, ceil=1.0)
        assert out.shape == (40, 26)
        assert out.data.min() >= 0 and out.data.max() <= 1.0

    def test_deterministic_and_threads(self):
        cfg = ModelConfig.toy(8, 8)
        ckpt = save_checkpoint(init_params(cfg, 2), cfg)
        scene = random_scene(np.random.default_rng(1), 40, 24)
        a = reconstruct_year(ckpt, *scene, batch_size=2)
        b = reconstruct_year(ckpt, *scene, batch_size=2)
        c = reconstruct_year(ckpt, *scene, batch_size=2, threads=4)
        assert a.data.tobytes() == b.data.tobytes() == c.data.tobytes()

    def test_errors(self):
        cfg = ModelConfig.toy(8, 8)
        ckpt = save_checkpoint(init_params(cfg), cfg)
        d, t, v = random_scene(np.random.default_rng(2), 16, 16)
        with pytest.raises(DataError, match="differ"):
            reconstruct_year(ckpt, d, Raster(np.zeros((8, 16))), v)
        with pytest.raises(DataError, match="twice"):
            reconstruct_year(ckpt, d, t, d)
        with pytest.raises(CheckpointError):
            reconstruct_year(ckpt, d, t, v, tile_h=4, tile_w=4)

    def test_boundary_symmetry(self):
        # content repeats with the tile period, so both sides of every seam
        # see identical inputs
        cfg = ModelConfig.toy(8, 8)
        rng = np.random.default_rng(3)
        base = random_scene(rng, 8, 8)
        scene = [Raster(np.tile(r.data, (2, 3))) for r in base]
        out = reconstruct_year((init_params(cfg, 4), cfg), *scene).data
        assert np.allclose(out[:, :16], out[:, 16:32], rtol=1e-6, atol=1e-6)
        assert np.allclose(out[:16], out[16:], rtol=1e-6, atol=1e-6)


@pytest.fixture(scope="module")
def trained():
    series = synth_series(0, 32, 32, 3)
    d_ref, v_ref = series[1]
    targets = [(ProductId(2013 + k, "F15"), d, v) for k, (d, v) in enumerate(series)]
    pts = sample_points(d_ref, v_ref, 8, 8, 8, seed=0)
    m = split_manifest(build_examples(pts, d_ref, v_ref, targets), 0.75, 0)
    cfg = with_target_scale(ModelConfig.toy(8, 8), m.subset("train"))
    res = train_loop(m, cfg, TrainConfig(lr0=3e-3, epochs=40, seed=0))
    return res, cfg, d_ref, v_ref


def test_zero_difference_probe(trained):
    res, cfg, d_ref, v_ref = trained
    out = reconstruct_year((res.params, cfg), d_ref, d_ref, v_ref)
    n_tiles = (d_ref.rows // cfg.h) * (d_ref.cols // cfg.w)
    # same units as the training loss: summed per tile, divided by the scale
    gap = np.abs(out.data.astype(np.float64) - v_ref.data).sum() / cfg.viirs_scale / n_tiles
    best_val = min(r.val_loss for r in res.log)
    assert gap < best_val
