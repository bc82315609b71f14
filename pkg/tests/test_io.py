"""Image files, atomic writes, checkpoints and config files."""

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clic import checkpoint
from clic.config import TrainConfig, load_config, parse_config
from clic.errors import ContractError, DataError
from clic.evaluation import gen_synthetic
from clic.imageio import (
    atomic_write_text,
    decode_pnm,
    encode_pnm,
    list_images,
    load_image,
    save_image,
    to_gray,
)
from clic.trainer import (
    load_training_checkpoint,
    save_training_checkpoint,
    train,
)

SMALL = TrainConfig(
    channels=(8, 16), embed_dim=16, resolution=32, batch_size=8, queue_capacity=32, epochs=3, seed=4
)


class TestPNM:
    @settings(max_examples=30)
    @given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
    def test_gray_round_trip(self, img):
        np.testing.assert_array_equal(decode_pnm(encode_pnm(img)), img)

    def test_rgb_round_trip(self):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
        np.testing.assert_array_equal(decode_pnm(encode_pnm(img)), img)

    def test_header_comments(self):
        buf = b"P5\n# made by hand\n3 # width\n1\n255\n" + bytes([1, 2, 3])
        np.testing.assert_array_equal(decode_pnm(buf), [[1, 2, 3]])

    def test_truncated_raster(self):
        with pytest.raises(DataError):
            decode_pnm(b"P5\n4 4\n255\n" + bytes(10))

    def test_truncated_header(self):
        with pytest.raises(DataError):
            decode_pnm(b"P5\n4 ")

    def test_ascii_variant_rejected(self):
        with pytest.raises(DataError):
            decode_pnm(b"P2\n1 1\n255\n7\n")

    def test_sixteen_bit_rejected(self):
        with pytest.raises(DataError):
            decode_pnm(b"P5\n1 1\n65535\n\x00\x01")


class TestFiles:
    @pytest.mark.parametrize("suffix", [".png", ".pgm"])
    def test_save_load(self, tmp_path, suffix):
        img = gen_synthetic("mosaic", 1, 0).images[0]
        save_image(tmp_path / f"a{suffix}", img)
        np.testing.assert_array_equal(load_image(tmp_path / f"a{suffix}"), img)

    def test_png_rgb(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (6, 4, 3), dtype=np.uint8)
        save_image(tmp_path / "c.png", img)
        np.testing.assert_array_equal(load_image(tmp_path / "c.png"), img)

    def test_unknown_format(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"GIF89a")
        with pytest.raises(DataError):
            load_image(tmp_path / "x.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_image(tmp_path / "none.png")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        atomic_write_text(tmp_path / "sub" / "out.csv", "a,b\n")
        assert (tmp_path / "sub" / "out.csv").read_text() == "a,b\n"
        assert os.listdir(tmp_path / "sub") == ["out.csv"]

    def test_list_images_sorted(self, tmp_path):
        for name in ["b.png", "a.pgm", "notes.txt"]:
            (tmp_path / name).write_bytes(b"")
        assert [p.name for p in list_images(tmp_path)] == ["a.pgm", "b.png"]

    def test_list_images_requires_dir(self, tmp_path):
        with pytest.raises(DataError):
            list_images(tmp_path / "missing")


class TestGray:
    def test_luma_weights(self):
        img = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], np.uint8)
        np.testing.assert_array_equal(to_gray(img), [[76, 150, 29]])

    @settings(max_examples=30)
    @given(hnp.arrays(np.uint8, (4, 5, 3)))
    def test_idempotent(self, img):
        g = to_gray(img)
        assert to_gray(g) is g or np.array_equal(to_gray(g), g)

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            to_gray(np.array([[300.0]]))


class TestCheckpointFormat:
    def test_round_trip(self):
        tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5)}
        buf = checkpoint.dumps(tensors, {"z": 1, "a": [1, 2]})
        meta, back = checkpoint.loads(buf)
        assert meta == {"a": [1, 2], "z": 1}
        np.testing.assert_array_equal(back["a"], tensors["a"])
        assert back["s"].shape == () and back["s"] == 2.5
        assert checkpoint.dumps(back, meta) == buf

    def test_bad_magic(self):
        with pytest.raises(DataError):
            checkpoint.loads(b"NOPE" + bytes(20))

    def test_truncated(self):
        buf = checkpoint.dumps({"w": np.ones((10, 10), np.float32)}, {})
        with pytest.raises(DataError):
            checkpoint.loads(buf[:-7])

    def test_corrupt_metadata(self):
        buf = bytearray(checkpoint.dumps({}, {"k": "v"}))
        buf[13] = 0xFF
        with pytest.raises(DataError):
            checkpoint.loads(bytes(buf))


@pytest.fixture(scope="module")
def images():
    return gen_synthetic("noise", 24, 3, size=32).images


class TestTrainingCheckpoint:
    def test_save_load_save_identical(self, tmp_path, images):
        res = train(images, SMALL, max_steps=2)
        save_training_checkpoint(tmp_path / "a.ckpt", res.state, SMALL)
        state, cfg, head = load_training_checkpoint(tmp_path / "a.ckpt")
        assert cfg == SMALL and head is None and state.step == 2
        save_training_checkpoint(tmp_path / "b.ckpt", state, cfg)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path, images):
        full = train(images, SMALL)
        part = train(images, SMALL, max_steps=4)
        save_training_checkpoint(tmp_path / "mid.ckpt", part.state, SMALL)
        state, cfg, _ = load_training_checkpoint(tmp_path / "mid.ckpt")
        rest = train(images, cfg, state=state)
        assert part.records + rest.records == full.records
        for a, b in zip(full.state.query.arrays(), rest.state.query.arrays()):
            assert a.tobytes() == b.tobytes()
        assert full.state.queue.buffer.tobytes() == rest.state.queue.buffer.tobytes()

    def test_same_seed_same_bytes(self, tmp_path, images):
        for name in ("x", "y"):
            save_training_checkpoint(tmp_path / f"{name}.ckpt", train(images, SMALL, max_steps=3).state, SMALL)
        assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"CLIC\x01\x00\x00\x00\xff\xff")
        with pytest.raises(DataError):
            load_training_checkpoint(tmp_path / "bad.ckpt")


class TestConfig:
    def test_text_round_trip(self):
        cfg = TrainConfig(lam=0.1, channels=(4, 8), lr_milestones=(0.5,), prior="cr")
        assert parse_config(cfg.to_text()) == cfg

    def test_comments_and_lambda_key(self):
        cfg = parse_config("# header\nlambda = 0.5  # weight\n\nepochs=3\n")
        assert cfg.lam == 0.5 and cfg.epochs == 3

    def test_unknown_key(self):
        with pytest.raises(DataError):
            parse_config("lamda = 0.5\n")

    def test_bad_value(self):
        with pytest.raises(DataError):
            parse_config("epochs = many\n")

    def test_invalid_combination(self):
        with pytest.raises(ContractError):
            parse_config("prior = lbp\n")

    def test_seed_override(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\n")
        assert load_config(path, env={}).seed == 1
        assert load_config(path, env={"CLIC_SEED": "9"}).seed == 9
        with pytest.raises(DataError):
            load_config(path, env={"CLIC_SEED": "x"})

    def test_lr_schedule(self):
        cfg = TrainConfig(epochs=20)
        assert [cfg.lr_at(e) for e in (0, 11, 12, 15, 16, 19)] == pytest.approx(
            [0.03, 0.03, 0.003, 0.003, 0.0003, 0.0003]
        )
