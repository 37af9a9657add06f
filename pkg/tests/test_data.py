import numpy as np
import pytest

from dsdistill.data import (GENERATOR_VERSION, generate, load_dataset,
                            save_dataset, stack)


class TestGenerate:
    def test_deterministic(self):
        a = generate(7, 5, 32, 32, 4)
        b = generate(7, 5, 32, 32, 4)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.mask, sb.mask)

    def test_per_index_independence(self):
        # sample i does not depend on how many samples were requested
        a = generate(7, 5, 32, 32, 4)
        b = generate(7, 3, 32, 32, 4)
        np.testing.assert_array_equal(a[2].image, b[2].image)

    def test_masks_in_range(self):
        for s in generate(1, 20, 32, 32, 6):
            assert s.mask.min() >= 0 and s.mask.max() < 6

    def test_images_finite_in_unit_range(self):
        for s in generate(2, 10, 32, 32, 3):
            assert np.isfinite(s.image).all()
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.image.shape == (3, 32, 32)

    def test_every_foreground_class_frequent(self):
        samples = generate(3, 1000, 32, 32, 6)
        c = 6
        counts = np.zeros(c)
        for s in samples:
            present = np.unique(s.mask)
            counts[present] += 1
        for cls in range(1, c):
            assert counts[cls] >= 0.10 * len(samples), f"class {cls} too rare"

    def test_different_seeds_differ(self):
        a = generate(1, 1, 32, 32, 4)[0]
        b = generate(2, 1, 32, 32, 4)[0]
        assert not np.array_equal(a.image, b.image)

    def test_shape_policies(self):
        for policy in ("rects", "discs", "bars", "mixed"):
            s = generate(5, 2, 32, 32, 3, shape_policy=policy)
            assert len(s) == 2

    def test_validation(self):
        with pytest.raises(ValueError):
            generate(0, 1, 32, 32, 1)
        with pytest.raises(ValueError):
            generate(0, 1, 8, 32, 3)
        with pytest.raises(ValueError):
            generate(0, 1, 32, 32, 3, shape_policy="hexagons")


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        samples = generate(11, 4, 32, 32, 5)
        meta = {"seed": 11, "n": 4, "h": 32, "w": 32, "c": 5}
        save_dataset(samples, tmp_path / "ds", meta)
        back, manifest = load_dataset(tmp_path / "ds")
        assert manifest["c"] == 5
        assert manifest["generator_version"] == GENERATOR_VERSION
        assert manifest["count"] == 4
        for sa, sb in zip(samples, back):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.mask, sb.mask)
            assert sb.mask.dtype == np.int64

    def test_version_mismatch_rejected(self, tmp_path):
        samples = generate(1, 1, 32, 32, 3)
        save_dataset(samples, tmp_path / "ds", {"c": 3})
        manifest = tmp_path / "ds" / "manifest.json"
        manifest.write_text(manifest.read_text().replace(
            f'"generator_version": {GENERATOR_VERSION}',
            '"generator_version": 999'))
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "ds")

    def test_stack_shapes(self):
        samples = generate(0, 3, 32, 48, 4)
        images, masks = stack(samples)
        assert images.shape == (3, 3, 32, 48)
        assert masks.shape == (3, 32, 48)
