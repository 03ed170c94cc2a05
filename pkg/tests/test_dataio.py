"""Data path checks: PNG codec, degradation pipeline, dataset loading."""

import numpy as np
import pytest
from PIL import Image
from gradcheck import rel_err

from deepfusionnet.dataio import (
    batch_iter,
    blur_sigma,
    box_downsample2,
    gaussian_blur,
    gaussian_kernel1d,
    load_paired_dataset,
    load_png,
    make_sr_dataset,
    make_sr_pair,
    save_png,
)
from deepfusionnet.tensor import ShapeError, Tensor4, make_rng


def write_png(path, arr_u8):
    Image.fromarray(arr_u8).save(path, format="PNG")


def random_u8(rng, h, w, c=3):
    return rng.integers(0, 256, (h, w, c), dtype=np.uint8)


def reflect_blur_oracle(img, k):
    """Direct 2-d convolution with mirrored (edge-excluded) indexing."""
    g1 = gaussian_kernel1d(k)
    g2 = np.outer(g1, g1)
    h, w = img.shape
    pad = k // 2

    def ref(i, n):
        if i < 0:
            return -i
        if i >= n:
            return 2 * n - 2 - i
        return i

    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-pad, pad + 1):
                for dx in range(-pad, pad + 1):
                    acc += g2[dy + pad, dx + pad] * img[ref(y + dy, h), ref(x + dx, w)]
            out[y, x] = acc
    return out


class TestPngCodec:
    def test_load_scales_to_unit_range(self, tmp_path):
        arr = random_u8(make_rng(1), 5, 7)
        p = tmp_path / "x.png"
        write_png(p, arr)
        t = load_png(p, dtype=np.float64)
        assert t.shape == (1, 3, 5, 7)
        assert rel_err(t.data[0].transpose(1, 2, 0), arr / 255.0) < 1e-12

    def test_save_load_round_trip_is_lossless_on_8bit_data(self, tmp_path):
        arr = random_u8(make_rng(2), 6, 4)
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        write_png(p1, arr)
        save_png(load_png(p1), p2)
        assert np.array_equal(np.asarray(Image.open(p2)), arr)

    def test_save_clips_out_of_range(self, tmp_path):
        t = Tensor4(np.array([1.5, -0.5, 0.5]).reshape(1, 3, 1, 1))
        p = tmp_path / "c.png"
        save_png(t, p)
        assert np.array_equal(np.asarray(Image.open(p)).ravel(), [255, 0, 128])

    def test_rgba_drops_alpha_with_warning(self, tmp_path):
        arr = random_u8(make_rng(3), 4, 4, c=4)
        p = tmp_path / "a.png"
        write_png(p, arr)
        with pytest.warns(UserWarning, match="alpha"):
            t = load_png(p)
        assert t.c == 3

    def test_grayscale_rejected(self, tmp_path):
        p = tmp_path / "g.png"
        Image.fromarray(random_u8(make_rng(4), 4, 4)[:, :, 0], mode="L").save(p)
        with pytest.raises(ValueError, match="RGB"):
            load_png(p)

    def test_save_shape_validation(self, tmp_path):
        with pytest.raises(ShapeError):
            save_png(Tensor4(np.zeros((2, 3, 4, 4))), tmp_path / "x.png")


class TestDegradation:
    def test_sigma_formula(self):
        assert abs(blur_sigma(5) - 1.1) < 1e-12
        assert abs(blur_sigma(3) - 0.8) < 1e-12

    def test_kernel_normalized_symmetric(self):
        g = gaussian_kernel1d(5)
        assert abs(g.sum() - 1.0) < 1e-12
        assert np.array_equal(g, g[::-1])
        with pytest.raises(ShapeError):
            gaussian_kernel1d(4)

    def test_blur_matches_reflect_oracle(self):
        rng = make_rng(5)
        img = rng.uniform(0, 1, (7, 9))
        t = Tensor4(img[None, None])
        got = gaussian_blur(t, 5).data[0, 0]
        assert rel_err(got, reflect_blur_oracle(img, 5)) < 1e-12

    def test_blur_preserves_constant_image(self):
        t = Tensor4(np.full((1, 3, 8, 8), 0.37))
        assert rel_err(gaussian_blur(t, 5).data, t.data) < 1e-12

    def test_box_downsample_hand_value(self):
        t = Tensor4(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
        assert box_downsample2(t).item() == 4.0
        with pytest.raises(ShapeError):
            box_downsample2(Tensor4(np.zeros((1, 1, 3, 4))))

    def test_make_sr_pair_shapes_and_dc(self):
        high = Tensor4(np.full((1, 3, 8, 10), 0.6))
        low, back = make_sr_pair(high)
        assert back is high
        assert low.shape == (1, 3, 4, 5)
        assert rel_err(low.data, np.full((1, 3, 4, 5), 0.6)) < 1e-12


class TestDatasetLayout:
    def build_enh(self, root, stems, h=8, w=8):
        rng = make_rng(6)
        for sub in ("low", "high"):
            (root / "train" / sub).mkdir(parents=True, exist_ok=True)
        for s in stems:
            write_png(root / "train" / "low" / f"{s}.png", random_u8(rng, h, w))
            write_png(root / "train" / "high" / f"{s}.png", random_u8(rng, h, w))

    def test_pairs_sorted_by_stem(self, tmp_path):
        self.build_enh(tmp_path, ["b", "a", "c"])
        pairs = load_paired_dataset(tmp_path, "train", "enhancement")
        assert [p[2] for p in pairs] == ["a", "b", "c"]
        assert all(p[0].shape == (1, 3, 8, 8) for p in pairs)

    def test_unpaired_stem_is_named_in_error(self, tmp_path):
        self.build_enh(tmp_path, ["a", "b"])
        (tmp_path / "train" / "low" / "b.png").unlink()
        with pytest.raises(ValueError, match="b"):
            load_paired_dataset(tmp_path, "train", "enhancement")

    def test_missing_folder(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_paired_dataset(tmp_path, "train", "enhancement")

    def test_size_mismatch_rejected(self, tmp_path):
        rng = make_rng(7)
        for sub, size in (("low", 8), ("high", 12)):
            d = tmp_path / "train" / sub
            d.mkdir(parents=True)
            write_png(d / "a.png", random_u8(rng, size, size))
        with pytest.raises(ShapeError):
            load_paired_dataset(tmp_path, "train", "enhancement")

    def test_sr_layout_requires_exact_doubling(self, tmp_path):
        rng = make_rng(8)
        for sub, size in (("lowres_blurred", 8), ("highres", 17)):
            d = tmp_path / "val" / sub
            d.mkdir(parents=True)
            write_png(d / "a.png", random_u8(rng, size, size))
        with pytest.raises(ShapeError):
            load_paired_dataset(tmp_path, "val", "sr")

    def test_make_sr_dataset_end_to_end(self, tmp_path):
        rng = make_rng(9)
        src = tmp_path / "clean"
        src.mkdir()
        for s in ("x", "y"):
            write_png(src / f"{s}.png", random_u8(rng, 16, 16))
        n = make_sr_dataset(src, tmp_path / "ds", "train", kernel_sizes=(5,))
        assert n == 2
        pairs = load_paired_dataset(tmp_path / "ds", "train", "sr")
        assert [p[2] for p in pairs] == ["x", "y"]
        assert pairs[0][0].shape == (1, 3, 8, 8)
        assert pairs[0][1].shape == (1, 3, 16, 16)

    def test_per_image_kernel_draw_is_seeded(self, tmp_path):
        rng = make_rng(12)
        src = tmp_path / "clean"
        src.mkdir()
        stems = ["a", "b", "c", "d"]
        for s in stems:
            write_png(src / f"{s}.png", random_u8(rng, 16, 16))
        sizes, seed = (3, 7), 41
        make_sr_dataset(src, tmp_path / "ds", "train", kernel_sizes=sizes, seed=seed)
        # replay the documented draw: one generator, sorted file order
        draw = make_rng(seed)
        for s in stems:
            k = sizes[int(draw.integers(len(sizes)))]
            expect, _ = make_sr_pair(load_png(src / f"{s}.png"), k)
            got = load_png(tmp_path / "ds" / "train" / "lowres_blurred" / f"{s}.png")
            # written files round-trip through 8-bit quantization
            np.testing.assert_array_equal(
                np.rint(expect.data * 255.0), np.rint(got.data * 255.0))

    def test_same_seed_reproduces_dataset_bitwise(self, tmp_path):
        rng = make_rng(13)
        src = tmp_path / "clean"
        src.mkdir()
        for s in ("a", "b", "c"):
            write_png(src / f"{s}.png", random_u8(rng, 16, 16))
        for run in ("one", "two"):
            make_sr_dataset(src, tmp_path / run, "train", kernel_sizes=(3, 5, 7), seed=7)
        for sub in ("lowres_blurred", "highres"):
            for s in ("a", "b", "c"):
                b1 = (tmp_path / "one" / "train" / sub / f"{s}.png").read_bytes()
                b2 = (tmp_path / "two" / "train" / sub / f"{s}.png").read_bytes()
                assert b1 == b2

    def test_even_or_tiny_kernels_rejected(self, tmp_path):
        (tmp_path / "clean").mkdir()
        with pytest.raises(ValueError):
            make_sr_dataset(tmp_path / "clean", tmp_path / "ds", "train", kernel_sizes=(4,))
        with pytest.raises(ValueError):
            make_sr_dataset(tmp_path / "clean", tmp_path / "ds", "train", kernel_sizes=(1, 5))
        with pytest.raises(ValueError):
            make_sr_dataset(tmp_path / "clean", tmp_path / "ds", "train", kernel_sizes=())


class TestBatching:
    def make_pairs(self, n):
        rng = make_rng(10)
        return [
            (Tensor4(rng.uniform(0, 1, (1, 3, 8, 8))),
             Tensor4(rng.uniform(0, 1, (1, 3, 8, 8))), f"p{i}")
            for i in range(n)
        ]

    def test_epoch_keyed_determinism(self):
        pairs = self.make_pairs(7)
        a = [x.data.copy() for x, _ in batch_iter(pairs, 3, seed=5, epoch=2)]
        b = [x.data.copy() for x, _ in batch_iter(pairs, 3, seed=5, epoch=2)]
        c = [x.data.copy() for x, _ in batch_iter(pairs, 3, seed=5, epoch=3)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_every_sample_appears_once(self):
        pairs = self.make_pairs(10)
        seen = []
        for xs, ys in batch_iter(pairs, 4, seed=1, epoch=0):
            assert xs.shape[1:] == (3, 8, 8)
            assert xs.n == ys.n
            for i in range(xs.n):
                seen.append(xs.data[i])
        assert len(seen) == 10
        originals = sorted(float(p[0].data.sum()) for p in pairs)
        batched = sorted(float(s.sum()) for s in seen)
        assert np.allclose(originals, batched)

    def test_partial_final_batch(self):
        sizes = [xs.n for xs, _ in batch_iter(self.make_pairs(7), 3, seed=0, epoch=0)]
        assert sizes == [3, 3, 1]

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            list(batch_iter(self.make_pairs(3), 0, seed=0, epoch=0))
