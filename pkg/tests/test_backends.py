import numpy as np
import pytest

from aeroloc.backends import (
    HandcraftedDenseExtractor,
    HarrisFineBackend,
    NeuralFineBackend,
    write_reference_fine_weights,
)
from aeroloc.errors import BackendUnavailableError
from aeroloc.fine import FineConfig, decode_keypoints


def textured_image(rng, h=256, w=256):
    from scipy import ndimage

    img = rng.uniform(0, 1, size=(h, w))
    img = ndimage.gaussian_filter(img, 2.0)
    img += rng.uniform(0, 1, size=(h, w)) * 0.2
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


class TestHandcraftedDense:
    def test_grid_shape_and_stride_metadata(self, rng):
        img = textured_image(rng, 512, 512)
        f = HandcraftedDenseExtractor(stride=32).extract(img)
        assert (f.height, f.width) == (16, 16)
        assert f.stride == 32
        assert (f.source_height, f.source_width) == (512, 512)

    def test_nonsquare_image(self, rng):
        img = textured_image(rng, 96, 160)
        f = HandcraftedDenseExtractor(stride=32).extract(img)
        assert (f.height, f.width) == (3, 5)

    def test_deterministic(self, rng):
        img = textured_image(rng)
        e = HandcraftedDenseExtractor()
        assert np.array_equal(e.extract(img).data, e.extract(img).data)

    def test_nonnegative_features(self, rng):
        f = HandcraftedDenseExtractor().extract(textured_image(rng))
        assert f.data.min() >= 0.0

    def test_photometric_robustness(self, rng):
        # brightness/contrast jitter barely moves the descriptors
        img = textured_image(rng, 256, 256)
        e = HandcraftedDenseExtractor(stride=32)
        base = e.extract(img).data
        jittered = e.extract(np.clip(img * 1.2 - 0.1, 0, 1)).data
        base_flat = base.reshape(-1, base.shape[2])
        jit_flat = jittered.reshape(-1, base.shape[2])
        cos = np.sum(base_flat * jit_flat, axis=1) / (
            np.linalg.norm(base_flat, axis=1) * np.linalg.norm(jit_flat, axis=1) + 1e-12
        )
        assert np.median(cos) > 0.98


class TestHarrisFine:
    def test_map_shapes(self, rng):
        f = HarrisFineBackend().extract(textured_image(rng, 256, 256))
        assert f.descriptor_map.shape == (32, 32, 64)
        assert f.reliability_map.shape == (32, 32)
        assert f.keypoint_logits.shape == (32, 32, 65)

    def test_constant_image_zero_reliability(self):
        f = HarrisFineBackend().extract(np.full((64, 64), 0.5))
        assert np.all(f.reliability_map == 0.0)
        assert decode_keypoints(f, FineConfig()) == []

    def test_padding_of_odd_sizes(self, rng):
        f = HarrisFineBackend().extract(textured_image(rng, 100, 70))
        assert f.descriptor_map.shape[:2] == (128 // 8, 96 // 8)
        assert (f.height, f.width) == (100, 70)
        kps = decode_keypoints(f, FineConfig(sigma=0.0))
        assert all(kp.x < 70 and kp.y < 100 for kp in kps)

    def test_textured_image_produces_keypoints(self, rng):
        img = textured_image(rng, 256, 256)
        f = HarrisFineBackend().extract(img)
        kps = decode_keypoints(f, FineConfig(sigma=0.05))
        assert len(kps) > 20

    def test_deterministic(self, rng):
        img = textured_image(rng, 128, 128)
        b = HarrisFineBackend()
        f1, f2 = b.extract(img), b.extract(img)
        assert np.array_equal(f1.descriptor_map, f2.descriptor_map)
        assert np.array_equal(f1.reliability_map, f2.reliability_map)


class TestNeuralFine:
    def test_missing_weights_error(self, tmp_path):
        with pytest.raises(BackendUnavailableError, match="manifest.json"):
            NeuralFineBackend(tmp_path / "nowhere")

    def test_forward_shapes(self, tmp_path, rng):
        write_reference_fine_weights(tmp_path / "w", seed=0)
        backend = NeuralFineBackend(tmp_path / "w")
        f = backend.extract(textured_image(rng, 64, 96))
        assert f.descriptor_map.shape == (8, 12, 64)
        assert f.reliability_map.shape == (8, 12)
        assert f.keypoint_logits.shape == (8, 12, 65)
        assert 0.0 <= f.reliability_map.min() and f.reliability_map.max() <= 1.0

    def test_forward_deterministic(self, tmp_path, rng):
        write_reference_fine_weights(tmp_path / "w", seed=0)
        backend = NeuralFineBackend(tmp_path / "w")
        img = textured_image(rng, 64, 64)
        assert np.array_equal(backend.extract(img).descriptor_map, backend.extract(img).descriptor_map)

    def test_reproduces_golden_outputs(self, tmp_path):
        # golden files were produced once by an independent reference forward
        # pass (see scripts/make_fine_goldens.py) and are frozen in the repo
        from pathlib import Path

        from aeroloc.store import read_tensor

        golden_dir = Path(__file__).parent / "data" / "fine_golden"
        if not golden_dir.exists():
            pytest.skip("golden files not generated")
        write_reference_fine_weights(tmp_path / "w", seed=0)
        backend = NeuralFineBackend(tmp_path / "w")
        img_rng = np.random.default_rng(1234)
        from scipy import ndimage

        img = ndimage.gaussian_filter(img_rng.uniform(0, 1, size=(64, 64)), 1.5)
        f = backend.extract(img)
        for name, got in (
            ("descriptors", f.descriptor_map),
            ("reliability", f.reliability_map),
            ("logits", f.keypoint_logits),
        ):
            want, _ = read_tensor(golden_dir / f"{name}.glft")
            assert np.allclose(got, want.reshape(got.shape), atol=1e-4), name
