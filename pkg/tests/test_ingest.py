import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flickerlens import netpbm
from flickerlens.errors import FormatError, InputError
from flickerlens.ingest import (
    CropBox, FrameSequence, clip_count, load_crops, load_sequence, make_clips, to_grayscale, write_sequence,
)
from oracles import enumerate_clip_starts


def seq_of(n, h=4, w=5, c=1, seed=0):
    rng = np.random.default_rng(seed)
    return FrameSequence(rng.integers(0, 256, size=(n, h, w, c), dtype=np.uint8))


class TestLoad:
    def test_directory_of_frames(self, tmp_path):
        write_sequence(tmp_path, np.zeros((32, 64, 64), dtype=np.uint8))
        seq = load_sequence(tmp_path)
        assert len(seq) == 32 and (seq.height, seq.width, seq.channels) == (64, 64, 1)

    def test_gap_in_indices(self, tmp_path):
        write_sequence(tmp_path, np.zeros((8, 4, 4), dtype=np.uint8))
        (tmp_path / "frame_000005.pgm").unlink()
        with pytest.raises(FormatError, match="missing frame index 5"):
            load_sequence(tmp_path)

    def test_ppm_maxval(self, tmp_path):
        (tmp_path / "frame_000000.ppm").write_bytes(b"P6\n1 1\n1023\n\0\0\0\0\0\0")
        with pytest.raises(FormatError):
            load_sequence(tmp_path)

    def test_mixed_sizes(self, tmp_path):
        netpbm.write(tmp_path / "frame_000000.pgm", np.zeros((4, 4), np.uint8))
        netpbm.write(tmp_path / "frame_000001.pgm", np.zeros((4, 5), np.uint8))
        with pytest.raises(FormatError):
            load_sequence(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FormatError):
            load_sequence(tmp_path)

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(FormatError):
            load_sequence(tmp_path / "nope")


class TestGrayscale:
    def test_white(self):
        g = to_grayscale(FrameSequence(np.full((1, 1, 1, 3), 255, np.uint8)))
        assert abs(g.frames.item() - 1.0) < 1e-12

    def test_red(self):
        g = to_grayscale(FrameSequence(np.array([[[[255, 0, 0]]]], np.uint8)))
        assert abs(g.frames.item() - 0.299) < 1e-12

    def test_gray_input_scaled(self):
        s = seq_of(3)
        assert np.array_equal(to_grayscale(s).frames, s.frames / 255.0)

    @given(st.integers(0, 2**31 - 1))
    def test_idempotent_within_quantization(self, seed):
        g1 = to_grayscale(seq_of(2, c=3, seed=seed))
        g2 = to_grayscale(g1)
        assert np.max(np.abs(g1.frames - g2.frames)) <= 1 / 255


class TestClips:
    def test_one_clip(self):
        assert len(make_clips(seq_of(32), 32, 1, 32)) == 1

    def test_two_clips(self):
        clips = make_clips(seq_of(64), 32, 1, 32)
        assert [c.start_index for c in clips] == [0, 32]

    def test_stride_membership(self):
        frames = np.arange(256, dtype=np.uint8).reshape(256, 1, 1, 1)
        clip = make_clips(FrameSequence(frames), 32, 8, 256)[0]
        assert np.allclose(clip.array[:, 0, 0] * 255, np.arange(0, 256, 8))

    def test_too_short(self):
        with pytest.raises(InputError):
            make_clips(seq_of(10), 32)

    @given(st.integers(1, 300), st.integers(2, 40), st.integers(1, 9), st.integers(1, 40))
    def test_count_matches_enumerator(self, n, length, stride, hop):
        assert clip_count(n, length, stride, hop) == len(enumerate_clip_starts(n, length, stride, hop))

    @given(st.integers(0, 2**31 - 1), st.integers(0, 3), st.integers(0, 3))
    def test_crop_commutes(self, seed, y0, x0):
        seq = seq_of(12, h=8, w=9, seed=seed)
        box = CropBox(x0, y0, x0 + 5, y0 + 4)
        cropped = make_clips(seq, 4, 2, 3, crop=box)
        whole = make_clips(seq, 4, 2, 3)
        for a, b in zip(cropped, whole):
            assert np.array_equal(a.array, b.array[:, y0:y0 + 4, x0:x0 + 5])

    def test_crop_outside_frame(self):
        with pytest.raises(InputError):
            make_clips(seq_of(4, h=4, w=4), 4, crop=CropBox(0, 0, 5, 4))


def test_load_crops(tmp_path):
    p = tmp_path / "crops.json"
    p.write_text(json.dumps({"v1": {"x0": 1, "y0": 2, "x1": 5, "y1": 6}}))
    assert load_crops(p) == {"v1": CropBox(1, 2, 5, 6)}


def test_degenerate_crop():
    with pytest.raises(InputError):
        CropBox(3, 0, 3, 4)
