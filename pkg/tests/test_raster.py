import os


import numpy as np
import pytest

from oodseg.raster import (
    ImageRaster,
    LogitMap,
    ObjectCutout,
    RasterError,
    ScoreMap,
    SemanticLabelMap,
    TriLabelMask,
    load_cutout,
    load_raster,
    pad_embed,
    save_cutout,
    save_raster,
)

from oracles import read_npy_by_hand


class TestRoundTrips:
    def test_image_round_trip(self, tmp_path, rng):
        img = ImageRaster(rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8))
        path = tmp_path / "img.png"
        save_raster(img, path)
        back = load_raster(path, "image")
        np.testing.assert_array_equal(back.data, img.data)

    def test_labels_round_trip(self, tmp_path, rng):
        codes = rng.choice([0, 1, 255], size=(6, 6)).astype(np.uint8)
        mask = TriLabelMask(codes)
        path = tmp_path / "labels.png"
        save_raster(mask, path)
        back = load_raster(path, "labels")
        np.testing.assert_array_equal(back.data, mask.data)

    def test_logits_round_trip_tiny_value(self, tmp_path):
        data = np.zeros((2, 1, 1))
        data[0, 0, 0] = 1e-300
        logits = LogitMap(data)
        path = tmp_path / "logits.npy"
        save_raster(logits, path)
        back = load_raster(path, "logits")
        assert back.data[0, 0, 0] == 1e-300  # exact 64-bit round trip
        np.testing.assert_array_equal(back.data, logits.data)

    def test_scores_round_trip(self, tmp_path, rng):
        scores = ScoreMap(rng.standard_normal((4, 5)))
        path = tmp_path / "scores.npy"
        save_raster(scores, path)
        np.testing.assert_array_equal(load_raster(path, "scores").data, scores.data)

    def test_cutout_round_trip(self, tmp_path, square_cutout):
        path = tmp_path / "cutout.png"
        save_cutout(square_cutout, path)
        back = load_cutout(path, tag="box")
        np.testing.assert_array_equal(back.image.data, square_cutout.image.data)
        np.testing.assert_array_equal(back.alpha, square_cutout.alpha)

    def test_image_payload_bytes_identical(self, tmp_path, rng):
        img = ImageRaster(rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8))
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        save_raster(img, p1)
        save_raster(img, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestValidation:
    def test_unknown_label_code_rejected(self, tmp_path):
        from PIL import Image

        arr = np.zeros((3, 3), dtype=np.uint8)
        arr[1, 1] = 7
        Image.fromarray(arr, mode="L").save(tmp_path / "bad.png")
        with pytest.raises(RasterError, match="unknown label code 7"):
            load_raster(tmp_path / "bad.png", "labels")

    def test_nan_logits_rejected(self, tmp_path):
        arr = np.zeros((2, 2, 2))
        arr[0, 0, 0] = np.nan
        np.save(tmp_path / "bad.npy", arr)
        with pytest.raises(RasterError, match="NaN or Inf"):
            load_raster(tmp_path / "bad.npy", "logits")

    def test_inf_scores_rejected(self, tmp_path):
        arr = np.zeros((2, 2))
        arr[0, 0] = np.inf
        np.save(tmp_path / "bad.npy", arr)
        with pytest.raises(RasterError):
            load_raster(tmp_path / "bad.npy", "scores")

    def test_wrong_rank_rejected(self, tmp_path):
        np.save(tmp_path / "flat.npy", np.zeros(8))
        with pytest.raises(RasterError, match="C,H,W"):
            load_raster(tmp_path / "flat.npy", "logits")

    def test_single_class_logits_rejected(self):
        with pytest.raises(RasterError, match="at least 2 classes"):
            LogitMap(np.zeros((1, 2, 2)))

    def test_alpha_out_of_range_rejected(self, rng):
        img = ImageRaster(rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8))
        with pytest.raises(RasterError, match=r"\[0,1\]"):
            ObjectCutout(image=img, alpha=np.full((2, 2), 1.5))

    def test_cutout_without_support_rejected(self, rng):
        img = ImageRaster(rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8))
        with pytest.raises(RasterError, match="alpha > 0.5"):
            ObjectCutout(image=img, alpha=np.full((2, 2), 0.3))

    def test_save_to_unwritable_path_leaves_nothing(self, tmp_path, rng):
        # parent of the target is a regular file, so any write fails
        blocker = tmp_path / "blocker"
        blocker.write_bytes(b"")
        img = ImageRaster(rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8))
        target = blocker / "img.png"
        with pytest.raises(OSError):
            save_raster(img, target)
        assert not target.exists()
        assert blocker.read_bytes() == b""
        assert sorted(tmp_path.iterdir()) == [blocker]


class TestFileFormat:
    def test_header_declared_shape_matches_independent_reader(self, tmp_path, rng):
        # a file with header shape [19,8,8] and 19*64 doubles loads as C=19,H=8,W=8
        data = rng.standard_normal((19, 8, 8))
        path = tmp_path / "logits.npy"
        save_raster(LogitMap(data), path)

        by_hand = read_npy_by_hand(path)
        assert by_hand.shape == (19, 8, 8)
        loaded = load_raster(path, "logits")
        assert (loaded.num_classes, loaded.height, loaded.width) == (19, 8, 8)
        np.testing.assert_array_equal(loaded.data, by_hand)

    def test_all_saved_arrays_are_v1_little_endian_c_order(self, tmp_path, rng):
        save_raster(ScoreMap(rng.standard_normal((3, 4))), tmp_path / "s.npy")
        arr = read_npy_by_hand(tmp_path / "s.npy")  # asserts v1.0, <f8, C-order
        assert arr.shape == (3, 4)


class TestPadEmbed:
    def test_one_pixel_into_corner(self):
        out = pad_embed(np.ones((1, 1)), (2, 2), (0, 0))
        np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])

    def test_out_of_bounds_offset(self):
        with pytest.raises(RasterError, match="exceeds canvas"):
            pad_embed(np.ones((1, 1)), (2, 2), (2, 2))

    def test_mass_conservation(self, rng):
        for _ in range(20):
            h, w = rng.integers(1, 5, size=2)
            ch, cw = h + rng.integers(0, 4), w + rng.integers(0, 4)
            r = rng.integers(0, ch - h + 1)
            c = rng.integers(0, cw - w + 1)
            plane = rng.standard_normal((h, w))
            out = pad_embed(plane, (ch, cw), (r, c))
            assert out.sum() == pytest.approx(plane.sum(), abs=1e-12)
            assert np.count_nonzero(out) <= h * w

    def test_zeros_outside_window(self, rng):
        plane = rng.standard_normal((2, 3)) + 10.0
        out = pad_embed(plane, (5, 6), (1, 2))
        window = np.zeros((5, 6), dtype=bool)
        window[1:3, 2:5] = True
        assert (out[~window] == 0).all()
        np.testing.assert_array_equal(out[window].reshape(2, 3), plane)


class TestImmutability:
    def test_rasters_are_read_only(self, rng):
        logits = LogitMap(rng.standard_normal((2, 2, 2)))
        with pytest.raises(ValueError):
            logits.data[0, 0, 0] = 1.0
