import numpy as np
import pytest
from PIL import Image

from celltrack_sr.errors import FormatError
from celltrack_sr.frames import SIDECAR_NAME, FrameSequence, list_frame_files, load_frames, save_frames


def test_sequence_validation():
    with pytest.raises(FormatError):
        FrameSequence(np.zeros((2, 2, 2, 2)))
    with pytest.raises(FormatError):
        FrameSequence(np.full((1, 2, 2), 1.5))
    with pytest.raises(FormatError):
        FrameSequence(np.zeros((1, 2, 2)), bit_depth=12)
    assert len(FrameSequence(np.zeros((4, 4)))) == 1


@pytest.mark.parametrize("bit_depth", [8, 16])
def test_roundtrip_within_quantisation(tmp_path, rng, bit_depth):
    seq = FrameSequence(rng.random((3, 10, 12)), bit_depth=bit_depth, frame_interval=20.0)
    paths = save_frames(seq, tmp_path / "frames")
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["frame_0001.png", "frame_0002.png", "frame_0003.png"]
    loaded = load_frames(tmp_path / "frames")
    levels = 255.0 if bit_depth == 8 else 65535.0
    assert np.max(np.abs(loaded.frames - seq.frames)) <= 0.5 / levels + 1e-12
    assert loaded.bit_depth == bit_depth and loaded.frame_interval == 20.0


def test_full_scale_16_bit(tmp_path):
    Image.fromarray(np.full((4, 4), 65535, dtype=np.uint16)).save(tmp_path / "img_1.png")
    seq = load_frames(tmp_path)
    assert seq.bit_depth == 16
    np.testing.assert_array_equal(seq.frames, 1.0)


def test_numeric_ordering(tmp_path):
    for n in (10, 2, 1):
        Image.fromarray(np.full((2, 2), n, dtype=np.uint8)).save(tmp_path / f"frame_{n}.png")
    assert [p.name for p in list_frame_files(tmp_path)] == ["frame_1.png", "frame_2.png", "frame_10.png"]
    np.testing.assert_allclose(load_frames(tmp_path).frames[:, 0, 0] * 255, [1, 2, 10])


def test_hundred_frames(tmp_path):
    save_frames(FrameSequence(np.zeros((100, 4, 4))), tmp_path)
    assert len(load_frames(tmp_path)) == 100


def test_mixed_shapes_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "frame_1.png")
    Image.fromarray(np.zeros((5, 4), dtype=np.uint8)).save(tmp_path / "frame_2.png")
    with pytest.raises(FormatError):
        load_frames(tmp_path)


def test_missing_directory_and_empty(tmp_path):
    with pytest.raises(FormatError):
        load_frames(tmp_path / "nope")
    with pytest.raises(FormatError):
        load_frames(tmp_path)


def test_colour_frames_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "frame_1.png")
    with pytest.raises(FormatError):
        load_frames(tmp_path)


def test_sidecar_is_written(tmp_path):
    save_frames(FrameSequence(np.zeros((2, 4, 4)), frame_interval=5.0), tmp_path)
    assert (tmp_path / SIDECAR_NAME).exists()


def test_center_crop(caplog):
    seq = FrameSequence(np.arange(63).reshape(1, 7, 9) / 100.0)
    cropped = seq.center_crop(4)
    assert cropped.frame_shape == (4, 8)
    np.testing.assert_array_equal(cropped.frames[0], seq.frames[0, 1:5, 0:8])
    assert "Cropping 7x9 frames to 4x8" in caplog.text
    assert seq.center_crop(1) is seq
    with pytest.raises(FormatError):
        seq.center_crop(16)
