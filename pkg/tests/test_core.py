import numpy as np
import pytest
from PIL import Image

from helpers import product_image

from mirage.core import (BinaryMask, FeatureLayer, FeatureStack, ImageRef,
                         ScoreMap, read_image, read_mask_png, read_tensor,
                         write_image_png, write_mask_png, write_tensor)
from mirage.errors import ImageIOError, TensorFormatError, ValidationError


class TestImageIO:
    def test_round_trip_preserves_dims_and_range(self, tmp_path):
        img = product_image(48, 56, seed=3)
        p = tmp_path / "img.png"
        write_image_png(img, p)
        ref, buf = read_image(p, category="widget", role="normal")
        assert (ref.height, ref.width) == (48, 56)
        assert buf.shape == (48, 56, 3)
        assert buf.min() >= 0.0 and buf.max() <= 1.0
        # 8-bit quantization bound
        assert np.max(np.abs(buf - img)) <= 1.0 / 255.0 + 1e-12

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageIOError, match="nope.png"):
            read_image(tmp_path / "nope.png")

    def test_truncated_file_names_path(self, tmp_path):
        img = product_image(32, 32)
        p = tmp_path / "broken.png"
        write_image_png(img, p)
        p.write_bytes(p.read_bytes()[:60])
        with pytest.raises(ImageIOError, match="broken.png"):
            read_image(p)

    def test_grayscale_replicated_to_three_channels(self, tmp_path):
        gray = (np.linspace(0, 255, 32 * 32).reshape(32, 32)).astype(np.uint8)
        p = tmp_path / "gray.png"
        Image.fromarray(gray, mode="L").save(p)
        _, buf = read_image(p)
        expected = np.repeat((gray / 255.0)[:, :, None], 3, axis=2)
        assert np.array_equal(buf, expected)

    def test_image_ref_invariants(self):
        with pytest.raises(ValidationError):
            ImageRef(path="x", category="c", role="bogus", width=4, height=4)
        with pytest.raises(ValidationError):
            ImageRef(path="x", category="c", role="normal", width=0, height=4)


class TestMaskIO:
    def test_all_zero_and_all_one(self, tmp_path):
        for fill, pixel in ((0, 0), (1, 255)):
            mask = BinaryMask(np.full((8, 9), fill, dtype=np.uint8))
            p = tmp_path / f"m{fill}.png"
            write_mask_png(mask, p)
            raw = np.asarray(Image.open(p))
            assert raw.shape == (8, 9)
            assert np.all(raw == pixel)

    def test_random_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        mask = BinaryMask(rng.integers(0, 2, size=(33, 17)).astype(np.uint8))
        p = tmp_path / "m.png"
        write_mask_png(mask, p)
        back = read_mask_png(p)
        assert np.array_equal(back.values, mask.values)

    def test_mask_validation(self):
        with pytest.raises(ValidationError):
            BinaryMask(np.array([[0, 2]]))
        with pytest.raises(ValidationError):
            BinaryMask(np.zeros(4))


class TestTensorIO:
    def test_zeros_round_trip(self, tmp_path):
        p = tmp_path / "z.mten"
        write_tensor(p, np.zeros((2, 2), dtype=np.float32))
        assert np.array_equal(read_tensor(p), np.zeros((2, 2), dtype=np.float32))

    def test_random_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
        p = tmp_path / "r.mten"
        write_tensor(p, arr)
        back = read_tensor(p)
        assert back.dtype == np.float32
        assert back.tobytes() == arr.tobytes()

    def test_header_layout(self, tmp_path):
        p = tmp_path / "h.mten"
        write_tensor(p, np.zeros((7, 2), dtype=np.float32))
        blob = p.read_bytes()
        assert blob[:4] == b"MTEN"
        assert blob[4] == 1  # version
        assert blob[5] == 2  # rank
        assert int.from_bytes(blob[6:10], "little") == 7
        assert int.from_bytes(blob[10:14], "little") == 2

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.mten"
        write_tensor(p, np.zeros((2, 2)))
        blob = bytearray(p.read_bytes())
        blob[:4] = b"NOPE"
        p.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="magic"):
            read_tensor(p)

    def test_wrong_version_and_truncation(self, tmp_path):
        p = tmp_path / "bad.mten"
        write_tensor(p, np.zeros((2, 2)))
        blob = bytearray(p.read_bytes())
        blob[4] = 9
        p.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="version"):
            read_tensor(p)
        write_tensor(p, np.zeros((2, 2)))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(TensorFormatError, match="payload"):
            read_tensor(p)

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            write_tensor(tmp_path / "x.mten", np.array([np.inf]))

    def test_round_trip_many_shapes(self, tmp_path):
        rng = np.random.default_rng(7)
        for trial in range(20):
            rank = int(rng.integers(1, 5))
            dims = tuple(int(rng.integers(1, 6)) for _ in range(rank))
            arr = rng.normal(size=dims).astype(np.float32)
            p = tmp_path / f"t{trial}.mten"
            write_tensor(p, arr)
            back = read_tensor(p)
            assert back.shape == dims
            assert back.tobytes() == arr.tobytes()


class TestDomainTypes:
    def test_score_map_rejects_negative_and_nonfinite(self):
        with pytest.raises(ValidationError):
            ScoreMap(np.array([[0.1, -0.2]]))
        with pytest.raises(ValidationError):
            ScoreMap(np.array([[np.nan, 0.0]]))
        sm = ScoreMap(np.ones((3, 4)))
        assert (sm.height, sm.width) == (3, 4)

    def test_feature_stack_grid_coverage(self):
        layer = FeatureLayer(layer_id="l0", stride=4, values=np.zeros((2, 16, 16)))
        FeatureStack(source_height=64, source_width=64, layers=(layer,))
        bad = FeatureLayer(layer_id="l0", stride=4, values=np.zeros((2, 4, 4)))
        with pytest.raises(ValidationError):
            FeatureStack(source_height=64, source_width=64, layers=(bad,))
        with pytest.raises(ValidationError):
            FeatureStack(source_height=64, source_width=64, layers=())
