import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.spatial import cKDTree

from src.slam import brief_pattern
from src.slam.errors import PatchOutOfBounds, TooFewMatches
from src.slam.features import (
    Keypoint,
    Match,
    compute_brief,
    compute_orientation,
    detect_fast,
    extract_features,
    gaussian_blur,
    gaussian_kernel,
    hamming_matrix,
    match_arrays,
    match_descriptors,
    ransac_rigid_filter,
    write_keypoints,
)
from src.slam.geometry import PoseSE3, rot_z
from src.slam.raster import rasterize
from src.slam.schemas import FeatureConfig, MatchRansacConfig, RasterConfig
from src.slam.tracking import frame_features
from tests.conftest import random_descriptors


def _smooth_texture(seed: int, size: int = 81, sigma: float = 4.0) -> np.ndarray:
    noise = np.random.default_rng(seed).normal(size=(size, size))
    smooth = ndimage.gaussian_filter(noise, sigma)
    smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())
    return np.floor(1.0 + 254.0 * smooth).astype(np.uint8)


class TestBlur:
    def test_constant_image_unchanged(self):
        img = np.full((20, 30), 77, dtype=np.uint8)
        assert np.array_equal(gaussian_blur(img, 1.0), img)

    def test_impulse_response(self):
        img = np.zeros((21, 21), dtype=np.uint8)
        img[10, 10] = 255
        out = gaussian_blur(img, 1.0)
        k0 = gaussian_kernel(1.0)[3]
        assert out[10, 10] == np.floor(255 * k0 * k0 + 0.5)
        assert abs(int(out.sum()) - 255) <= 0.5 * 7 * 7

    def test_kernel_is_normalized(self):
        assert gaussian_kernel(1.5).sum() == pytest.approx(1.0)
        assert len(gaussian_kernel(1.0)) == 7

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            gaussian_blur(np.zeros((5, 5), dtype=np.uint8), 0.0)


class TestFast:
    def test_constant_image_has_no_corners(self):
        assert detect_fast(np.full((40, 40), 100, dtype=np.uint8), 20, 100) == []

    def test_single_bright_dot(self):
        img = np.zeros((31, 31), dtype=np.uint8)
        img[15, 15] = 255
        kps = detect_fast(img, 20, 100)
        assert [(k.u, k.v) for k in kps] == [(15.0, 15.0)]

    def test_square_gives_corners_only(self):
        img = np.zeros((40, 40), dtype=np.uint8)
        img[15:25, 15:25] = 255
        kps = detect_fast(img, 20, 100)
        corners = np.array([[15, 15], [24, 15], [15, 24], [24, 24]], dtype=float)
        found = np.array([[k.u, k.v] for k in kps])
        dist = np.linalg.norm(found[:, None, :] - corners[None, :, :], axis=2)
        assert np.all(dist.min(axis=1) <= 2.5)
        assert np.all(dist.min(axis=0) <= 2.5)

    def test_strongest_first_and_capped(self):
        img = _smooth_texture(3, size=120, sigma=2.0)
        kps = detect_fast(img, 5, 25)
        assert len(kps) == 25
        responses = [k.response for k in kps]
        assert responses == sorted(responses, reverse=True)

    def test_threshold_halved_when_too_few(self):
        img = np.zeros((31, 31), dtype=np.uint8)
        img[15, 15] = 30
        # contrast 30 fails at threshold 40 but passes at 20
        assert len(detect_fast(img, 40, 10)) == 1
        assert detect_fast(img, 70, 10) == []

    def test_border_is_respected(self):
        img = np.zeros((31, 31), dtype=np.uint8)
        img[5, 5] = 255
        assert detect_fast(img, 20, 10, border=3) != []
        assert detect_fast(img, 20, 10, border=8) == []


class TestOrientation:
    def test_symmetric_patch_is_zero(self):
        img = np.full((41, 41), 90, dtype=np.uint8)
        assert compute_orientation(img, Keypoint(20, 20, 0.0), 15) == 0.0

    def test_gradient_towards_columns(self):
        img = np.tile(np.arange(41, dtype=np.uint8) * 5, (41, 1))
        assert compute_orientation(img, Keypoint(20, 20, 0.0), 15) == pytest.approx(0.0, abs=1e-12)

    def test_quarter_turn_shifts_angle(self):
        img = _smooth_texture(11, size=41)
        a = compute_orientation(img, Keypoint(20, 20, 0.0), 15)
        b = compute_orientation(np.rot90(img), Keypoint(20, 20, 0.0), 15)
        assert np.mod(b - a, 2 * np.pi) == pytest.approx(1.5 * np.pi, abs=1e-9)

    def test_patch_must_fit(self):
        with pytest.raises(PatchOutOfBounds):
            compute_orientation(np.zeros((41, 41), dtype=np.uint8), Keypoint(5, 20, 0.0), 15)


class TestBrief:
    def test_deterministic(self):
        img = _smooth_texture(5)
        kp = Keypoint(40, 40, 0.0, angle=0.7)
        assert np.array_equal(compute_brief(img, kp), compute_brief(img, kp))

    def test_inverted_image_flips_all_unequal_pairs(self):
        img = _smooth_texture(6)
        kp = Keypoint(40, 40, 0.0, angle=0.0)
        a, b = compute_brief(img, kp), compute_brief(255 - img, kp)
        pattern = brief_pattern.STEERED[0]
        first = img[40 + pattern[:, 0], 40 + pattern[:, 1]]
        second = img[40 + pattern[:, 2], 40 + pattern[:, 3]]
        ties = int(np.sum(first == second))
        assert int(hamming_matrix(a, b)[0, 0]) == 256 - ties

    def test_half_turn_invariance(self):
        img = _smooth_texture(8)
        kp = Keypoint(40, 40, 0.0)
        turned = np.rot90(img, 2)
        angle = compute_orientation(img, kp, 15)
        angle_turned = compute_orientation(turned, kp, 15)
        a = compute_brief(img, Keypoint(40, 40, 0.0, angle))
        b = compute_brief(turned, Keypoint(40, 40, 0.0, angle_turned))
        assert int(hamming_matrix(a, b)[0, 0]) <= 64

    @pytest.mark.parametrize("seed", range(20))
    def test_quarter_turn_invariance(self, seed):
        img = _smooth_texture(seed)
        kp = Keypoint(40, 40, 0.0)
        turned = np.rot90(img)
        angle = compute_orientation(img, kp, 15)
        angle_turned = compute_orientation(turned, kp, 15)
        a = compute_brief(img, Keypoint(40, 40, 0.0, angle))
        b = compute_brief(turned, Keypoint(40, 40, 0.0, angle_turned))
        assert int(hamming_matrix(a, b)[0, 0]) <= 64

    def test_descriptor_is_32_bytes(self):
        assert compute_brief(_smooth_texture(1), Keypoint(40, 40, 0.0)).shape == (32,)

    def test_pattern_tables(self):
        assert brief_pattern.STEERED.shape == (30, 256, 4)
        assert brief_pattern.angle_bin(np.array([0.0, 2 * np.pi - 0.01, np.pi])).tolist() == [0, 0, 15]


class TestMatching:
    def test_identical_sets_match_one_to_one(self, rng):
        desc = random_descriptors(rng, 40)
        matches = match_descriptors(desc, desc, 0.75)
        assert [(m.idx_a, m.idx_b, m.hamming) for m in matches] == [(i, i, 0) for i in range(40)]

    def test_empty_side(self, rng):
        assert match_descriptors(random_descriptors(rng, 5), random_descriptors(rng, 0), 0.75) == []

    def test_distractors_are_ignored(self, rng):
        a = random_descriptors(rng, 5)
        distractors = random_descriptors(rng, 5)
        assert hamming_matrix(a, distractors).min() >= 80
        b = np.vstack([distractors[:2], a, distractors[2:]])
        matches = match_descriptors(a, b, 0.75)
        assert [(m.idx_a, m.idx_b) for m in matches] == [(i, i + 2) for i in range(5)]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        base = random_descriptors(rng, 30)
        noisy = base.copy()
        flips = rng.integers(0, 32, size=(30, 3))
        for row, cols in enumerate(flips):
            noisy[row, cols] ^= np.uint8(1)
        a, b = base[:25], np.vstack([noisy[5:], random_descriptors(rng, 4)])
        ia, ib, _ = match_arrays(a, b, 0.75)
        jb, ja, _ = match_arrays(b, a, 0.75)
        assert sorted(zip(ia.tolist(), ib.tolist())) == sorted(zip(ja.tolist(), jb.tolist()))

    def test_hamming_matrix(self):
        a = np.zeros((1, 32), dtype=np.uint8)
        b = np.zeros((2, 32), dtype=np.uint8)
        b[1, :4] = 0xFF
        assert hamming_matrix(a, b).tolist() == [[0, 32]]

    def test_ratio_bounds(self, rng):
        with pytest.raises(ValueError):
            match_arrays(random_descriptors(rng, 2), random_descriptors(rng, 2), 1.0)


class TestRansac:
    def _pairs(self, rng, n, motion):
        a = rng.uniform(-20, 20, size=(n, 3))
        return a, motion.apply(a)

    def test_consistent_translation_keeps_everything(self, rng):
        a, b = self._pairs(rng, 30, PoseSE3.from_translation([1.0, 0, 0]))
        matches = [Match(i, i, 0) for i in range(30)]
        kept, transform = ransac_rigid_filter(a, b, matches, MatchRansacConfig())
        assert len(kept) == 30
        assert np.allclose(transform.translation, [1, 0, 0], atol=1e-9)

    def test_outliers_removed(self, rng):
        motion = PoseSE3(rot_z(0.2), [2.0, -1.0, 0.3])
        a, b = self._pairs(rng, 25, motion)
        b[20:] += rng.uniform(3.0, 6.0, size=(5, 3))
        matches = [Match(i, i, 0) for i in range(25)]
        kept, transform = ransac_rigid_filter(a, b, matches, MatchRansacConfig())
        assert sorted(m.idx_a for m in kept) == list(range(20))
        assert transform.allclose(motion, atol=1e-9)

    def test_needs_three_matches(self, rng):
        a, b = self._pairs(rng, 2, PoseSE3.identity())
        with pytest.raises(TooFewMatches):
            ransac_rigid_filter(a, b, [Match(0, 0, 0), Match(1, 1, 0)], MatchRansacConfig())

    def test_input_order_does_not_matter(self, rng):
        motion = PoseSE3(rot_z(-0.4), [0.5, 0.5, 0.0])
        a, b = self._pairs(rng, 30, motion)
        b[::6] += 4.0
        matches = [Match(i, i, 0) for i in range(30)]
        kept1, t1 = ransac_rigid_filter(a, b, matches, MatchRansacConfig(seed=4))
        kept2, t2 = ransac_rigid_filter(a, b, matches[::-1], MatchRansacConfig(seed=4))
        assert [(m.idx_a, m.idx_b) for m in kept1] == [(m.idx_a, m.idx_b) for m in kept2]
        assert t1.allclose(t2, atol=0.0)


class TestFrameExtraction:
    def test_scene_yields_features(self, cam, scene_cloud):
        frame = rasterize(scene_cloud, cam, RasterConfig())
        rows, cols, resp, angles, desc = extract_features(frame.intensity, FeatureConfig())
        assert 50 <= len(rows) <= 1000
        assert desc.shape == (len(rows), 32)
        assert np.all((angles >= 0) & (angles < 2 * np.pi))

    def test_keypoints_lift_to_scene_points(self, cam, scene_cloud, scene_xyz):
        frame = rasterize(scene_cloud, cam, RasterConfig())
        feats = frame_features(frame, cam, FeatureConfig())
        assert len(feats) > 0
        # lifted points stay within a pixel footprint of the scene
        dist, _ = cKDTree(scene_xyz).query(feats.points)
        assert np.all(dist < 0.5)

    def test_write_keypoints(self, tmp_path, cam, scene_cloud):
        feats = frame_features(rasterize(scene_cloud, cam, RasterConfig()), cam, FeatureConfig())
        path = tmp_path / "kp.txt"
        write_keypoints(feats, path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(feats)
        first = feats.keypoints()[0]
        u, v, response, angle = map(float, lines[0].split())
        assert (u, v) == pytest.approx((first.u, first.v), abs=0.05)
        assert response == pytest.approx(first.response, abs=0.05)
        assert angle == pytest.approx(first.angle, abs=1e-6)
