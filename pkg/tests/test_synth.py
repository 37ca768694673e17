import json

import numpy as np
import pytest

from oodseg.raster import (
    LABEL_ANOMALY,
    LABEL_INLIER,
    LABEL_VOID,
    ImageRaster,
    ObjectCutout,
    SemanticLabelMap,
    load_raster,
    save_cutout,
    save_raster,
)
from oodseg.synth import (
    Placement,
    PlacementSearchError,
    SynthConfig,
    SynthConfigError,
    blend_composite,
    harmonize_cutout,
    item_rng,
    luminance,
    propose_placement,
    replay_manifest,
    scaled_size,
    synthesize_dataset,
)


def flat_cutout(value, h=3, w=3, alpha=1.0):
    img = ImageRaster(np.full((h, w, 3), value, dtype=np.uint8))
    return ObjectCutout(image=img, alpha=np.full((h, w), float(alpha)), tag="flat")


class TestConfig:
    def test_anomaly_id_must_exceed_classes(self):
        SynthConfig(num_classes=19, anomaly_id=20)  # valid
        with pytest.raises(SynthConfigError, match="anomaly id 5"):
            SynthConfig(num_classes=19, anomaly_id=5)

    def test_anomaly_id_must_avoid_void(self):
        with pytest.raises(SynthConfigError, match="void"):
            SynthConfig(num_classes=19, anomaly_id=255)

    def test_scale_bounds(self):
        with pytest.raises(SynthConfigError):
            SynthConfig(scale_min=0.9, scale_max=0.5)


class TestBlend:
    def test_zero_alpha_is_identity(self, street_scene):
        x_in, y_in = street_scene
        cutout = ObjectCutout(
            image=ImageRaster(np.full((3, 3, 3), 9, dtype=np.uint8)),
            alpha=np.zeros((3, 3)),
            support_threshold=-1.0,
        )
        cfg = SynthConfig()
        x, y, m = blend_composite(x_in, y_in, cutout, Placement(2, 2, 1.0), cfg)
        np.testing.assert_array_equal(x.data, x_in.data)
        np.testing.assert_array_equal(y.data, y_in.data)
        assert (m.data == LABEL_INLIER).all()

    def test_single_pixel_pointwise_update(self, street_scene):
        x_in, y_in = street_scene
        img = ImageRaster(np.array([[[10, 20, 30]]], dtype=np.uint8))
        cutout = ObjectCutout(image=img, alpha=np.ones((1, 1)))
        cfg = SynthConfig(num_classes=19, anomaly_id=20)
        x, y, m = blend_composite(x_in, y_in, cutout, Placement(0, 0, 1.0), cfg)
        assert tuple(x.data[0, 0]) == (10, 20, 30)
        assert y.data[0, 0] == 20
        assert m.data[0, 0] == LABEL_ANOMALY
        np.testing.assert_array_equal(x.data[1:], x_in.data[1:])
        np.testing.assert_array_equal(y.data[1:], y_in.data[1:])

    def test_out_of_bounds_rejected(self, street_scene):
        x_in, y_in = street_scene
        with pytest.raises(PlacementSearchError, match="exceeds canvas"):
            blend_composite(
                x_in, y_in, flat_cutout(5), Placement(23, 31, 1.0), SynthConfig()
            )

    def test_void_pixels_stay_void_in_mask(self, street_scene):
        x_in, y_in = street_scene
        y = np.array(y_in.data)
        y[0, 0] = LABEL_VOID
        _, y_amy, m = blend_composite(
            x_in, SemanticLabelMap(y), flat_cutout(5), Placement(10, 10, 1.0),
            SynthConfig(),
        )
        assert m.data[0, 0] == LABEL_VOID
        assert y_amy.data[0, 0] == LABEL_VOID

    def test_exactness_property_random_battery(self, rng):
        # Eq.-style exactness: masked pixels copy the cutout bit-exactly,
        # unmasked pixels copy the scene; labels agree with the mask.
        cfg = SynthConfig(num_classes=19, anomaly_id=20)
        for _ in range(25):
            hc, wc = int(rng.integers(8, 20)), int(rng.integers(8, 20))
            x_in = ImageRaster(rng.integers(0, 256, (hc, wc, 3), dtype=np.uint8))
            y_in = SemanticLabelMap(
                rng.integers(0, 19, size=(hc, wc)).astype(np.uint8)
            )
            h = int(rng.integers(1, hc + 1))
            w = int(rng.integers(1, wc + 1))
            alpha = (rng.random((h, w)) > 0.4).astype(float)
            alpha[rng.integers(h), rng.integers(w)] = 1.0
            cutout = ObjectCutout(
                image=ImageRaster(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)),
                alpha=alpha,
            )
            place = Placement(
                int(rng.integers(0, hc - h + 1)), int(rng.integers(0, wc - w + 1)), 1.0
            )
            x, y, m = blend_composite(x_in, y_in, cutout, place, cfg)
            hard = alpha > 0.5
            win = np.s_[place.row : place.row + h, place.col : place.col + w]
            np.testing.assert_array_equal(x.data[win][hard], cutout.image.data[hard])
            untouched = np.ones((hc, wc), dtype=bool)
            untouched[win] = ~hard
            np.testing.assert_array_equal(x.data[untouched], x_in.data[untouched])
            np.testing.assert_array_equal(
                m.data == LABEL_ANOMALY, y.data == cfg.anomaly_id
            )
            assert set(np.unique(y.data)) <= set(range(19)) | {20, 255}

    def test_feather_zero_matches_hard_compositing(self, street_scene, rng):
        x_in, y_in = street_scene
        cutout = flat_cutout(77, h=4, w=4)
        hard_cfg = SynthConfig(feather_radius=0)
        x1, _, _ = blend_composite(x_in, y_in, cutout, Placement(5, 5, 1.0), hard_cfg)
        expected = np.array(x_in.data)
        expected[5:9, 5:9] = 77
        np.testing.assert_array_equal(x1.data, expected)


class TestHarmonize:
    def _scene(self, value):
        return ImageRaster(np.full((20, 20, 3), value, dtype=np.uint8))

    def test_gain_halves_bright_cutout(self):
        # cutout luminance 200, background 100 -> gain 0.5, pixel 200 -> 100
        cutout = flat_cutout(200, h=4, w=4)
        x_in = self._scene(100)
        result = harmonize_cutout(cutout, x_in, Placement(0, 0, 1.0), SynthConfig())
        assert result.gain == pytest.approx(0.5)
        assert (result.cutout.image.data == 100).all()
        assert result.gain_forced is False

    def test_equal_means_gain_one(self):
        cutout = flat_cutout(123, h=3, w=3)
        x_in = self._scene(123)
        result = harmonize_cutout(cutout, x_in, Placement(2, 2, 1.0), SynthConfig())
        assert result.gain == pytest.approx(1.0)
        np.testing.assert_array_equal(result.cutout.image.data, cutout.image.data)

    def test_gain_clamps_at_four(self):
        cutout = flat_cutout(10, h=3, w=3)
        x_in = self._scene(255)
        result = harmonize_cutout(cutout, x_in, Placement(0, 0, 1.0), SynthConfig())
        assert result.gain == 4.0
        assert (result.cutout.image.data == 40).all()

    def test_zero_luminance_forces_gain_one(self):
        cutout = flat_cutout(0, h=3, w=3)
        x_in = self._scene(200)
        result = harmonize_cutout(cutout, x_in, Placement(0, 0, 1.0), SynthConfig())
        assert result.gain == 1.0
        assert result.gain_forced is True

    def test_luminance_off_keeps_colors(self, square_cutout):
        x_in = self._scene(30)
        cfg = SynthConfig(luminance_matching=False)
        result = harmonize_cutout(square_cutout, x_in, Placement(0, 0, 1.0), cfg)
        np.testing.assert_array_equal(
            result.cutout.image.data, square_cutout.image.data
        )
        np.testing.assert_array_equal(result.cutout.alpha, square_cutout.alpha)

    def test_scaling_changes_size(self, square_cutout):
        x_in = self._scene(100)
        result = harmonize_cutout(
            square_cutout, x_in, Placement(0, 0, 2.0), SynthConfig()
        )
        assert (result.cutout.height, result.cutout.width) == (12, 12)

    def test_feather_softens_alpha(self, square_cutout):
        x_in = self._scene(100)
        cfg = SynthConfig(feather_radius=1)
        result = harmonize_cutout(square_cutout, x_in, Placement(0, 0, 1.0), cfg)
        assert ((result.cutout.alpha > 0) & (result.cutout.alpha < 1)).any()

    def test_luma_weights(self):
        assert luminance(np.array([[[255, 0, 0]]])) == pytest.approx(0.299 * 255)


class TestScaledSize:
    def test_rounding_and_floor(self):
        assert scaled_size(6, 6, 1.0) == (6, 6)
        assert scaled_size(6, 6, 0.5) == (3, 3)
        assert scaled_size(1, 1, 0.01) == (1, 1)


class TestPlacement:
    def test_base_lands_on_eligible_ground(self, street_scene, square_cutout):
        _, y_in = street_scene
        cfg = SynthConfig(ground_ids=(0,), scale_min=1.0, scale_max=1.0)
        for i in range(10):
            place = propose_placement(y_in, square_cutout, cfg, item_rng(3, i))
            sh, sw = scaled_size(6, 6, place.scale)
            base_row = place.row + sh - 1
            base_col = place.col + sw // 2
            assert y_in.data[base_row, base_col] == 0
            assert base_row >= y_in.height // 2

    def test_same_seed_same_placement(self, street_scene, square_cutout):
        _, y_in = street_scene
        cfg = SynthConfig(ground_ids=(0,))
        p1 = propose_placement(y_in, square_cutout, cfg, item_rng(9, 0))
        p2 = propose_placement(y_in, square_cutout, cfg, item_rng(9, 0))
        assert p1 == p2

    def test_degenerate_scale_model(self, street_scene, square_cutout):
        _, y_in = street_scene
        cfg = SynthConfig(ground_ids=(0,), scale_min=1.0, scale_max=1.0)
        place = propose_placement(y_in, square_cutout, cfg, item_rng(1, 0))
        assert place.scale == 1.0

    def test_scale_follows_row_model(self, street_scene, square_cutout):
        _, y_in = street_scene
        cfg = SynthConfig(ground_ids=(0,), scale_min=0.5, scale_max=1.0)
        rng = item_rng(4, 2)
        place = propose_placement(y_in, square_cutout, cfg, rng)
        sh, sw = scaled_size(6, 6, place.scale)
        base_row = place.row + sh - 1
        expected = 0.5 + 0.5 * (base_row / y_in.height)
        assert place.scale == pytest.approx(expected)

    def test_infeasible_after_budget(self, street_scene):
        _, y_in = street_scene
        huge = ObjectCutout(
            image=ImageRaster(np.zeros((40, 40, 3), dtype=np.uint8)),
            alpha=np.ones((40, 40)),
        )
        cfg = SynthConfig(ground_ids=(0,), max_attempts=50)
        with pytest.raises(PlacementSearchError, match="50 draws"):
            propose_placement(y_in, huge, cfg, item_rng(0, 0))

    def test_rejects_existing_anomaly_overlap(self, square_cutout):
        labels = np.zeros((20, 20), dtype=np.uint8)
        labels[10:, :] = 0
        labels[:10, :] = 5
        labels[12:18, :] = 20  # existing anomaly band blocks most of the ground
        y_in = SemanticLabelMap(labels)
        cfg = SynthConfig(ground_ids=(0,), scale_min=1.0, scale_max=1.0)
        for i in range(5):
            place = propose_placement(y_in, square_cutout, cfg, item_rng(2, i))
            window = labels[place.row : place.row + 6, place.col : place.col + 6]
            assert not (window == 20).any()

    def test_fallback_region_when_no_ground(self, square_cutout):
        labels = np.full((20, 20), 5, dtype=np.uint8)  # no ground ids present
        y_in = SemanticLabelMap(labels)
        cfg = SynthConfig(ground_ids=(0,), scale_min=1.0, scale_max=1.0)
        place = propose_placement(y_in, square_cutout, cfg, item_rng(0, 0))
        assert place.row + 5 >= 10  # base row in the lower half


def _write_assets(tmp_path, rng, n_images=2):
    images_dir = tmp_path / "in"
    images_dir.mkdir()
    entries = []
    for i in range(n_images):
        img = ImageRaster(rng.integers(0, 256, (24, 30, 3), dtype=np.uint8))
        labels = np.full((24, 30), 7, dtype=np.uint8)
        labels[12:, :] = 0
        save_raster(img, images_dir / f"scene{i}.png")
        save_raster(SemanticLabelMap(labels), images_dir / f"scene{i}_labels.png")
        entries.append(
            {"image": f"in/scene{i}.png", "labels": f"in/scene{i}_labels.png"}
        )
    img = rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)
    alpha = np.zeros((5, 5))
    alpha[1:4, 1:4] = 1.0
    save_cutout(
        ObjectCutout(image=ImageRaster(img), alpha=alpha, tag="toy"),
        tmp_path / "cutout.png",
    )
    images_manifest = tmp_path / "images.jsonl"
    images_manifest.write_text("".join(json.dumps(e) + "\n" for e in entries))
    cutouts_manifest = tmp_path / "cutouts.jsonl"
    cutouts_manifest.write_text(json.dumps({"cutout": "cutout.png", "tag": "toy"}) + "\n")
    return images_manifest, cutouts_manifest


class TestSynthesizeDataset:
    def test_two_images_deterministic(self, tmp_path, rng):
        images, cutouts = _write_assets(tmp_path, rng)
        cfg = SynthConfig(num_classes=19, anomaly_id=20, ground_ids=(0,), seed=5)
        rec1 = synthesize_dataset(images, cutouts, cfg, tmp_path / "out1")
        rec2 = synthesize_dataset(images, cutouts, cfg, tmp_path / "out2")
        assert len(rec1) == 2
        assert rec1 == rec2
        for name in sorted(p.name for p in (tmp_path / "out1").iterdir()):
            b1 = (tmp_path / "out1" / name).read_bytes()
            b2 = (tmp_path / "out2" / name).read_bytes()
            assert b1 == b2, name

    def test_empty_cutout_library_rejected(self, tmp_path, rng):
        images, _ = _write_assets(tmp_path, rng)
        empty = tmp_path / "none.jsonl"
        empty.write_text("")
        with pytest.raises(SynthConfigError, match="empty"):
            synthesize_dataset(images, empty, SynthConfig(ground_ids=(0,)), tmp_path / "out")

    def test_replay_reproduces_bytes(self, tmp_path, rng):
        images, cutouts = _write_assets(tmp_path, rng)
        cfg = SynthConfig(num_classes=19, anomaly_id=20, ground_ids=(0,), seed=11)
        synthesize_dataset(images, cutouts, cfg, tmp_path / "out")
        manifest = tmp_path / "out" / "synth_manifest.jsonl"
        replayed = replay_manifest(manifest, cfg, tmp_path / "replayed")
        originals = {
            p.name: p.read_bytes()
            for p in (tmp_path / "out").iterdir()
            if p.suffix == ".png"
        }
        for p in (tmp_path / "replayed").iterdir():
            assert p.read_bytes() == originals[p.name], p.name
        for rec_orig, rec_new in zip(
            [json.loads(l) for l in manifest.read_text().splitlines()], replayed
        ):
            assert rec_new["gain"] == rec_orig["gain"]

    def test_outputs_follow_mask_label_agreement(self, tmp_path, rng):
        images, cutouts = _write_assets(tmp_path, rng, n_images=1)
        cfg = SynthConfig(num_classes=19, anomaly_id=20, ground_ids=(0,), seed=2)
        synthesize_dataset(images, cutouts, cfg, tmp_path / "out")
        out = tmp_path / "out"
        label_file = next(p for p in out.iterdir() if p.name.endswith("_labels.png"))
        mask_file = next(p for p in out.iterdir() if p.name.endswith("_mask.png"))
        mask = load_raster(mask_file, "labels")
        from PIL import Image

        y = np.asarray(Image.open(label_file))
        np.testing.assert_array_equal(mask.data == LABEL_ANOMALY, y == 20)
        assert (mask.data == LABEL_ANOMALY).sum() > 0
