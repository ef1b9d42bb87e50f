import logging

import numpy as np
import pytest
import torch

from vidcorr.data import (DatasetIndex, SyntheticSpec, generate_synthetic,
                          index_dataset, load_frame, load_keypoints, load_mask,
                          save_frame, save_keypoints, save_mask)
from vidcorr.errors import ConfigError, ValidationError


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


class TestSyntheticSpec:
    def test_validation(self):
        with pytest.raises(ValidationError):
            SyntheticSpec(video_count=0)
        with pytest.raises(ValidationError):
            SyntheticSpec(motion="teleport")
        with pytest.raises(ValidationError):
            SyntheticSpec(texture="plaid")


class TestGenerateSynthetic:
    def test_static_object_identical_frames(self, tmp_path):
        spec = SyntheticSpec(video_count=1, frames_per_video=2, frame_size=48,
                             objects_per_video=1, motion="static", seed=3)
        generate_synthetic(spec, tmp_path)
        video = tmp_path / "video_000"
        f0 = (video / "frames" / "00000.png").read_bytes()
        f1 = (video / "frames" / "00001.png").read_bytes()
        assert f0 == f1
        m0 = (video / "masks" / "00000.png").read_bytes()
        m1 = (video / "masks" / "00001.png").read_bytes()
        assert m0 == m1

    def test_translation_moves_mask_centroid(self, tmp_path):
        spec = SyntheticSpec(video_count=4, frames_per_video=3, frame_size=96,
                             objects_per_video=1, motion="translate", seed=11)
        generate_synthetic(spec, tmp_path)
        checked = 0
        for v in range(4):
            video = tmp_path / f"video_{v:03d}"
            kp = [load_keypoints(video / "keypoints" / f"{t:05d}.txt") for t in range(3)]
            velocity = kp[1][0, 1:] - kp[0][0, 1:]
            # keypoint files carry 3 decimals; equal velocity = no bounce
            if np.allclose(kp[2][0, 1:] - kp[1][0, 1:], velocity, atol=2e-3):
                masks = [load_mask(video / "masks" / f"{t:05d}.png") for t in range(3)]
                for t in (1, 2):
                    prev = np.argwhere(masks[t - 1] == 1).mean(axis=0)[::-1]
                    cur = np.argwhere(masks[t] == 1).mean(axis=0)[::-1]
                    assert np.all(np.abs((cur - prev) - velocity) <= 0.5)
                checked += 1
        assert checked > 0

    def test_deterministic_per_seed(self, tmp_path):
        spec = SyntheticSpec(video_count=2, frames_per_video=3, frame_size=48, seed=9)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_masks_and_keypoints_consistent(self, tmp_path):
        spec = SyntheticSpec(video_count=1, frames_per_video=4, frame_size=64,
                             objects_per_video=2, seed=5)
        generate_synthetic(spec, tmp_path)
        video = tmp_path / "video_000"
        for t in range(4):
            mask = load_mask(video / "masks" / f"{t:05d}.png")
            points = load_keypoints(video / "keypoints" / f"{t:05d}.txt")
            assert set(np.unique(mask)) <= {0, 1, 2}
            assert points.shape == (2, 3)
            for pid, x, y in points:
                assert 0 <= x < 64 and 0 <= y < 64

    def test_objects_stay_in_frame(self, tmp_path):
        # Objects may occlude each other, but they must never exit the frame:
        # visible at spawn and in most frames, with keypoints always in bounds.
        spec = SyntheticSpec(video_count=2, frames_per_video=24, frame_size=64,
                             objects_per_video=2, motion="translate+scale", seed=4)
        generate_synthetic(spec, tmp_path)
        for v in range(2):
            video = tmp_path / f"video_{v:03d}"
            visible = {1: 0, 2: 0}
            for t in range(24):
                mask = load_mask(video / "masks" / f"{t:05d}.png")
                points = load_keypoints(video / "keypoints" / f"{t:05d}.txt")
                assert np.all((points[:, 1:] >= 0) & (points[:, 1:] < 64))
                for obj in (1, 2):
                    visible[obj] += int((mask == obj).sum() > 0)
            assert (mask == 2).sum() > 0  # topmost object never disappears
            for obj in (1, 2):
                assert visible[obj] >= 17, f"object {obj} visible {visible[obj]}/24"


class TestImageIO:
    def test_frame_roundtrip(self, tmp_path):
        rgb = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        save_frame(tmp_path / "f.png", rgb)
        back = load_frame(tmp_path / "f.png")
        assert back.shape == (3, 16, 16)
        assert torch.allclose(back.permute(1, 2, 0), torch.from_numpy(rgb),
                              atol=1 / 255)

    def test_mask_roundtrip(self, tmp_path):
        mask = np.array([[0, 1], [2, 3]], dtype=np.int64)
        save_mask(tmp_path / "m.png", mask)
        assert (load_mask(tmp_path / "m.png") == mask).all()

    def test_keypoints_roundtrip(self, tmp_path):
        pts = np.array([[1, 3.25, 4.5], [2, 0.0, 15.0]])
        save_keypoints(tmp_path / "k.txt", pts)
        back = load_keypoints(tmp_path / "k.txt")
        np.testing.assert_allclose(back, pts)


class TestIndexDataset:
    def test_indexes_generated_dataset(self, tmp_path):
        spec = SyntheticSpec(video_count=3, frames_per_video=4, frame_size=48, seed=1)
        generate_synthetic(spec, tmp_path)
        index = index_dataset(tmp_path)
        assert len(index.videos) == 3
        entry = index.videos[0]
        assert len(entry.frames) == 4
        assert len(entry.masks) == 4
        assert len(entry.keypoints) == 4

    def test_single_frame_video_skipped(self, tmp_path, caplog):
        spec = SyntheticSpec(video_count=2, frames_per_video=3, frame_size=48, seed=1)
        generate_synthetic(spec, tmp_path)
        lone = tmp_path / "video_zzz" / "frames"
        lone.mkdir(parents=True)
        save_frame(lone / "00000.png", np.zeros((8, 8, 3), dtype=np.float32))
        with caplog.at_level(logging.WARNING):
            index = index_dataset(tmp_path)
        assert len(index.videos) == 2
        assert "video_zzz" in caplog.text

    def test_davis_style_layout(self, tmp_path):
        for seq in ("bear", "dog"):
            for t in range(3):
                save_frame(tmp_path / "JPEGImages" / seq / f"{t:05d}.jpg",
                           np.zeros((8, 8, 3), dtype=np.float32))
                save_mask(tmp_path / "Annotations" / seq / f"{t:05d}.png",
                          np.zeros((8, 8), dtype=np.int64))
        index = index_dataset(tmp_path)
        assert [v.video_id for v in index.videos] == ["bear", "dog"]
        assert len(index.videos[0].frames) == 3
        assert len(index.videos[0].masks) == 3

    def test_empty_root_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            index_dataset(tmp_path)

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            index_dataset(tmp_path / "nope")
