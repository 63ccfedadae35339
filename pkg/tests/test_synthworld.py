import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facefactors import synthworld as sw
from facefactors.errors import (ConfigError, DataError, DatasetIntegrityError,
                                DatasetVersionError, FactorRangeError)


def _factors(**kw):
    base = sw.canonical_factors(0, sw.sample_appearance(0))
    return base.replaced(**kw)


class TestRenderer:
    def test_deterministic(self):
        f = _factors(lip_aperture=0.5, gaze=np.array([0.3, -0.2]))
        a = sw.render_frame(f)
        b = sw.render_frame(f)
        assert np.array_equal(a, b)
        assert a.shape == (sw.IMAGE_SIZE, sw.IMAGE_SIZE, 3)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_appearance_changes_image(self):
        a = sw.render_frame(_factors())
        b = sw.render_frame(sw.canonical_factors(1, sw.sample_appearance(1)))
        assert np.abs(a - b).mean() > 1e-3

    def test_every_factor_visibly_changes_image(self):
        base = sw.render_frame(_factors())
        variants = [
            _factors(lip_aperture=0.9),
            _factors(pose=np.array([0.2, 0.05, -0.05, 0.08])),
            _factors(gaze=np.array([0.9, 0.5])),
            _factors(blink=0.9),
            _factors(expression=np.array([0.9, -0.8, 0.8, 0.9])),
        ]
        for f in variants:
            assert np.abs(sw.render_frame(f) - base).max() > 0.01

    def test_blink_gaze_strictly_local_to_eye_mask(self):
        f = _factors()
        g = _factors(gaze=np.array([0.9, -0.8]), blink=0.7)
        mask = sw.eye_region_mask(f)
        diff = np.abs(sw.render_frame(f) - sw.render_frame(g))
        assert diff[~mask].max() == 0.0
        assert diff[mask].max() > 0.01

    def test_pose_equivariance_rotation(self):
        """Rotating the pose factor matches rotating the rendered image."""
        from scipy.ndimage import affine_transform
        theta = 0.25
        f0 = _factors()
        f1 = _factors(pose=np.array([theta, 0.0, 0.0, 0.0]))
        img0 = sw.render_frame(f0)
        img1 = sw.render_frame(f1)
        c = (sw.IMAGE_SIZE - 1) / 2.0
        ca, sa = np.cos(theta), np.sin(theta)
        m = np.array([[ca, -sa], [sa, ca]])
        warped = np.stack([
            affine_transform(img0[..., ch], m, offset=np.array([c, c]) - m @ [c, c],
                             order=1, mode="nearest")
            for ch in range(3)
        ], axis=-1)
        interior = np.zeros((sw.IMAGE_SIZE, sw.IMAGE_SIZE), bool)
        interior[10:-10, 10:-10] = True
        assert np.abs(warped - img1)[interior].mean() < 0.02

    def test_keypoints_track_pose_translation(self):
        f0 = _factors()
        f1 = _factors(pose=np.array([0.0, 0.1, -0.05, 0.0]))
        kp0, kp1 = sw.keypoints(f0), sw.keypoints(f1)
        shift = (kp1 - kp0).mean(axis=0)
        expected = np.array([0.1, -0.05]) * sw.IMAGE_SIZE / 2.0
        assert np.abs(shift - expected).max() < 0.5

    def test_keypoints_inside_image(self):
        kp = sw.keypoints(_factors(pose=np.array([0.3, 0.1, 0.1, 0.1])))
        assert kp.shape == (sw.N_KEYPOINTS, 2)
        assert (kp > -8).all() and (kp < sw.IMAGE_SIZE + 8).all()


class TestFactorVector:
    def test_roundtrip(self):
        f = _factors(lip_aperture=0.3, blink=0.2)
        arr = f.to_array()
        assert arr.shape == (sw.FACTOR_DIM,)
        g = sw.FactorVector.from_array(arr, identity_seed=f.identity_seed)
        assert np.allclose(g.to_array(), arr)

    def test_range_validation(self):
        with pytest.raises(FactorRangeError):
            _factors(lip_aperture=1.5)
        with pytest.raises(FactorRangeError):
            _factors(blink=-0.1)
        with pytest.raises(FactorRangeError):
            _factors(pose=np.array([9.0, 0, 0, 0]))

    @given(lip=st.floats(0, 1), blink=st.floats(0, 1))
    @settings(max_examples=25, deadline=None)
    def test_valid_ranges_accepted(self, lip, blink):
        f = _factors(lip_aperture=lip, blink=blink)
        assert 0.0 <= f.lip_aperture <= 1.0


class TestDynamics:
    def test_tracks_within_declared_bounds(self):
        spec = sw.DynamicsSpec(length=64)
        tracks = sw.sample_factor_tracks(7, spec)
        assert tracks["lip"].min() >= 0 and tracks["lip"].max() <= 1
        assert np.abs(tracks["pose"]).max() <= sw.POSE_RANGE.max() + 1e-9
        assert np.abs(tracks["gaze"]).max() <= 1.0
        assert np.abs(tracks["expression"]).max() <= 1.0

    def test_max_step_bounds(self):
        spec = sw.DynamicsSpec(length=96)
        tracks = sw.sample_factor_tracks(3, spec)
        assert np.abs(np.diff(tracks["lip"])).max() <= spec.lip_max_step
        norm_pose = tracks["pose"] / sw.POSE_RANGE
        assert np.abs(np.diff(norm_pose, axis=0)).max() <= spec.pose_max_step

    def test_streams_independent(self):
        """Changing dynamics of one factor leaves the others untouched."""
        a = sw.sample_factor_tracks(5, sw.DynamicsSpec(length=32))
        b = sw.sample_factor_tracks(5, sw.DynamicsSpec(length=32, lip_rate=0.3))
        assert not np.allclose(a["lip"], b["lip"])
        assert np.array_equal(a["pose"], b["pose"])
        assert np.array_equal(a["gaze"], b["gaze"])
        assert np.array_equal(a["blink"], b["blink"])
        assert np.array_equal(a["expression"], b["expression"])

    def test_bad_spec_rejected(self):
        with pytest.raises(ConfigError):
            sw.DynamicsSpec(length=0).validate()
        with pytest.raises(ConfigError):
            sw.DynamicsSpec(length=8, exp_segment_min=9, exp_segment_max=4).validate()


class TestAudio:
    def test_shape_and_determinism(self):
        lip = sw.sample_factor_tracks(1, sw.DynamicsSpec(length=30))["lip"]
        a = sw.synth_audio(lip, noise_seed=4)
        b = sw.synth_audio(lip, noise_seed=4)
        assert a.shape == (30, sw.AUDIO_DIM)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, sw.synth_audio(lip, noise_seed=5))

    def test_depends_on_lip_window_only(self):
        lip1 = np.linspace(0, 1, 40)
        lip2 = lip1.copy()
        lip2[30:] = 0.0           # future edit beyond the causal window
        a1 = sw.synth_audio(lip1, noise_seed=0)
        a2 = sw.synth_audio(lip2, noise_seed=0)
        assert np.array_equal(a1[:25], a2[:25])
        assert not np.array_equal(a1[30:], a2[30:])

    def test_rejects_out_of_range(self):
        from facefactors.errors import AudioRangeError
        with pytest.raises(AudioRangeError):
            sw.synth_audio(np.array([0.2, 1.4, 0.3]))

    def test_window_flattening(self):
        aud = sw.synth_audio(np.linspace(0, 1, 12), noise_seed=0)
        w = sw.audio_window(aud, 6)
        assert w.shape == (sw.AUDIO_WINDOW * sw.AUDIO_DIM,)
        assert np.array_equal(w[-sw.AUDIO_DIM:], aud[6])
        # left edge pads by repetition
        w0 = sw.audio_window(aud, 0)
        assert np.array_equal(w0[:sw.AUDIO_DIM], aud[0])


class TestDatasetIO:
    def test_roundtrip(self, tmp_path, small_clips):
        sw.write_dataset(small_clips, tmp_path / "ds")
        loaded = sw.read_dataset(tmp_path / "ds")
        assert len(loaded) == len(small_clips)
        for a, b in zip(small_clips, loaded):
            assert np.allclose(a.frames, b.frames, atol=1 / 254)
            assert np.allclose(a.audio, b.audio)
            assert np.allclose(a.factor_array(), b.factor_array())

    def test_corruption_detected(self, tmp_path, small_clips):
        sw.write_dataset(small_clips[:2], tmp_path / "ds")
        victim = next((tmp_path / "ds").rglob("audio.npy"))
        data = bytearray(victim.read_bytes())
        data[-1] ^= 0xFF
        victim.write_bytes(bytes(data))
        with pytest.raises(DatasetIntegrityError) as exc:
            sw.read_dataset(tmp_path / "ds")
        assert "clip" in str(exc.value)

    def test_version_mismatch(self, tmp_path, small_clips):
        import json
        sw.write_dataset(small_clips[:1], tmp_path / "ds")
        mpath = tmp_path / "ds" / "manifest.json"
        m = json.loads(mpath.read_text())
        m["world_version"] = "other-0"
        mpath.write_text(json.dumps(m))
        with pytest.raises(DatasetVersionError):
            sw.read_dataset(tmp_path / "ds")

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataError):
            sw.read_dataset(tmp_path / "nope")

    def test_clip_generation_deterministic(self):
        spec = sw.DynamicsSpec(length=10)
        a = sw.generate_clip(3, 10, spec)
        b = sw.generate_clip(3, 10, spec)
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.audio, b.audio)
        # different identity -> different clip
        c = sw.generate_clip(4, 10, spec)
        assert not np.array_equal(a.frames, c.frames)
