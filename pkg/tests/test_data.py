import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccreid.data import (AugConfig, Manifest, Sample, SynthSpec, augment_train,
                         camera_effect, generate_synthetic, identity_style,
                         load_manifest, render_person, save_manifest)

from conftest import TOY_SPEC


def write_manifest(path, rows, header="path,identity,camera,clothing,split"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")


class TestLoadManifest:
    def test_train_ids_remapped_contiguously(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [
            "a.png,5,0,0,train",
            "b.png,5,1,0,train",
            "c.png,9,0,1,train",
        ])
        m = load_manifest(tmp_path / "m.csv")
        assert m.num_identities == 2
        assert [s.identity for s in m.samples] == [0, 0, 1]
        assert m.identity_map == {5: 0, 9: 1}

    def test_query_gallery_keep_raw_labels(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [
            "a.png,5,0,0,train",
            "b.png,5,0,0,train",
            "q.png,42,0,1,query",
        ])
        m = load_manifest(tmp_path / "m.csv")
        assert m.split("query")[0].identity == 42

    def test_empty_file_rejected(self, tmp_path):
        (tmp_path / "m.csv").write_text("", encoding="utf-8")
        with pytest.raises(ValueError, match="empty manifest"):
            load_manifest(tmp_path / "m.csv")

    def test_header_only_rejected(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [])
        with pytest.raises(ValueError, match="empty manifest"):
            load_manifest(tmp_path / "m.csv")

    def test_missing_clothing_column_named(self, tmp_path):
        (tmp_path / "m.csv").write_text(
            "path,identity,camera,split\na.png,0,0,train\n", encoding="utf-8")
        with pytest.raises(ValueError, match="missing column: clothing"):
            load_manifest(tmp_path / "m.csv")

    def test_malformed_row_reports_line_number(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [
            "a.png,0,0,0,train",
            "b.png,0,0,train",
        ])
        with pytest.raises(ValueError, match="line 3"):
            load_manifest(tmp_path / "m.csv")

    def test_non_image_path_rejected(self, tmp_path):
        write_manifest(tmp_path / "m.csv", ["a.txt,0,0,0,train"])
        with pytest.raises(ValueError, match="not an image path"):
            load_manifest(tmp_path / "m.csv")

    def test_duplicate_path_split_rejected(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [
            "a.png,0,0,0,train",
            "a.png,0,0,0,train",
        ])
        with pytest.raises(ValueError, match="duplicate"):
            load_manifest(tmp_path / "m.csv")

    def test_same_path_in_two_splits_allowed(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [
            "a.png,0,0,0,train",
            "a.png,0,0,0,gallery",
        ])
        m = load_manifest(tmp_path / "m.csv")
        assert len(m.samples) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.csv")

    def test_round_trip(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [
            "b.png,3,1,0,train",
            "a.png,3,0,1,train",
            "q.png,7,0,2,query",
            "g.png,7,1,0,gallery",
        ])
        m = load_manifest(tmp_path / "m.csv")
        save_manifest(m, tmp_path / "copy.csv")
        again = load_manifest(tmp_path / "copy.csv")
        assert again == m


class TestGenerateSynthetic:
    def test_counts_and_query_layout(self, toy_dataset):
        spec = TOY_SPEC
        expected = (spec.num_identities * spec.clothes_per_identity
                    * spec.images_per_clothing)
        paths = {s.path for s in toy_dataset.samples}
        assert len(paths) == expected == 240
        for identity in range(spec.num_identities):
            clothes = {s.clothing for s in toy_dataset.split("query")
                       if s.identity == identity}
            assert len(clothes) == 1
        # held-out clothing never appears in training
        for s in toy_dataset.split("train"):
            assert s.clothing != spec.clothes_per_identity - 1

    def test_gallery_has_same_and_cross_clothing_matches(self, toy_dataset):
        q = toy_dataset.split("query")[0]
        gallery = toy_dataset.split("gallery")
        same = [g for g in gallery
                if g.identity == q.identity and g.clothing == q.clothing]
        cross = [g for g in gallery
                 if g.identity == q.identity and g.clothing != q.clothing
                 and g.camera != q.camera]
        assert same and cross

    def test_deterministic_bytes(self, toy_dataset, tmp_path):
        again = generate_synthetic(TOY_SPEC, tmp_path / "again")
        assert (again.root / "manifest.csv").read_bytes() == \
            (toy_dataset.root / "manifest.csv").read_bytes()
        for sample in again.samples[:6]:
            assert (again.root / sample.path).read_bytes() == \
                (toy_dataset.root / sample.path).read_bytes()

    def test_silhouette_invariant_across_clothing_and_camera(self):
        img_a, mask_a = render_person(TOY_SPEC, identity=3, clothing=0)
        img_b, mask_b = render_person(TOY_SPEC, identity=3, clothing=1)
        assert np.array_equal(mask_a, mask_b)
        # torso pixels differ between clothings, non-torso pixels match
        diff = np.any(img_a != img_b, axis=2)
        assert diff.any()
        assert (diff <= mask_a).all()

    def test_distinct_torso_colors(self):
        from ccreid.data import clothing_color
        colors = [clothing_color(TOY_SPEC, 0, c) for c in range(3)]
        assert not np.allclose(colors[0], colors[1])
        assert not np.allclose(colors[1], colors[2])

    def test_identity_styles_differ(self):
        a, b = identity_style(TOY_SPEC, 0), identity_style(TOY_SPEC, 1)
        assert not np.array_equal(a["stamp"], b["stamp"]) or \
            a["semi_h"] != b["semi_h"]

    def test_camera_effects_fixed(self):
        assert camera_effect(0) == (0.0, (0, 0))
        assert camera_effect(1)[0] != 0.0

    def test_too_few_clothes_rejected(self):
        with pytest.raises(ValueError, match="clothes_per_identity"):
            SynthSpec(clothes_per_identity=1)

    def test_unwritable_output_dir(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_synthetic(TOY_SPEC, blocker / "nested")


class TestAugment:
    def rng(self, seed=0):
        return np.random.default_rng(seed)

    def test_identity_config(self):
        img = self.rng(1).random((16, 12, 3))
        cfg = AugConfig(flip_probability=0.0, pad_pixels=0,
                        erase_probability=0.0)
        out = augment_train(img, cfg, self.rng())
        assert np.array_equal(out, img)

    def test_forced_flip(self):
        img = self.rng(2).random((10, 8, 3))
        cfg = AugConfig(flip_probability=1.0, pad_pixels=0,
                        erase_probability=0.0)
        out = augment_train(img, cfg, self.rng())
        assert np.array_equal(out, img[:, ::-1, :])

    def test_pad_too_large_rejected(self):
        img = np.zeros((8, 8, 3))
        with pytest.raises(ValueError, match="pad_pixels"):
            augment_train(img, AugConfig(pad_pixels=8), self.rng())

    def test_erase_rectangle_statistics(self):
        img = self.rng(3).random((64, 32, 3))
        cfg = AugConfig(flip_probability=0.0, pad_pixels=0,
                        erase_probability=1.0, erase_area_range=(0.02, 0.4),
                        erase_aspect_range=(0.3, 3.33))
        area = 64 * 32
        for trial in range(1000):
            out = augment_train(img, cfg, self.rng(trial))
            diff = np.any(out != img, axis=2)
            rows = np.where(diff.any(axis=1))[0]
            cols = np.where(diff.any(axis=0))[0]
            assert rows.size and cols.size
            h = rows[-1] - rows[0] + 1
            w = cols[-1] - cols[0] + 1
            # exactly one full rectangle differs
            assert diff.sum() == h * w
            assert diff[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].all()
            assert 0.02 <= h * w / area <= 0.4
            assert 0.3 <= h / w <= 3.33

    def test_values_stay_in_range(self):
        img = self.rng(4).random((32, 24, 3))
        cfg = AugConfig(flip_probability=0.5, pad_pixels=4,
                        erase_probability=1.0)
        for seed in range(20):
            out = augment_train(img, cfg, self.rng(seed))
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    @settings(max_examples=40, deadline=None)
    @given(
        h=st.integers(6, 40), w=st.integers(6, 40),
        flip=st.floats(0, 1), erase=st.floats(0, 1),
        pad=st.integers(0, 5), seed=st.integers(0, 2**31))
    def test_shape_and_range_property(self, h, w, flip, erase, pad, seed):
        if pad >= min(h, w):
            pad = min(h, w) - 1
        img = np.random.default_rng(seed).random((h, w, 3))
        cfg = AugConfig(flip_probability=flip, pad_pixels=pad,
                        erase_probability=erase)
        out = augment_train(img, cfg, np.random.default_rng(seed + 1))
        assert out.shape == (h, w, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_given_rng(self):
        img = self.rng(5).random((24, 16, 3))
        cfg = AugConfig()
        a = augment_train(img, cfg, np.random.default_rng(99))
        b = augment_train(img, cfg, np.random.default_rng(99))
        assert np.array_equal(a, b)

    def test_out_of_range_image_rejected(self):
        img = np.full((8, 8, 3), 1.5)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            augment_train(img, AugConfig(), self.rng())
