import json

import numpy as np
import pytest
import torch

from facefactors import evaluate as ev
from facefactors import synthworld as sw
from facefactors.errors import ConfigError, DataError, UndefinedMetricError


class TestScaleError:
    # published reference: per-method mean scale of generated vs ground-truth
    # clips, with the normalized error computed as |gen - gt| / gt
    CASES = [
        (1.336, 1.341, 0.004),
        (1.129, 1.341, 0.158),
        (1.201, 1.341, 0.104),
        (1.319, 1.334, 0.011),
        (1.148, 1.334, 0.139),
        (1.225, 1.334, 0.082),
    ]

    @pytest.mark.parametrize("gen,gt,expected", CASES)
    def test_reference_values(self, gen, gt, expected):
        assert abs(ev.nlsec(gen, gt) - expected) <= 2e-3

    def test_exact_arithmetic(self):
        assert ev.nlsec(2.0, 4.0) == 0.5
        assert ev.nlsec(6.0, 4.0) == 0.5

    def test_nonpositive_reference_rejected(self):
        with pytest.raises(UndefinedMetricError):
            ev.nlsec(1.0, 0.0)
        with pytest.raises(UndefinedMetricError):
            ev.nlsec(1.0, -0.5)


class TestSyncConfidence:
    def test_perfectly_aligned_features_positive(self):
        g = torch.Generator().manual_seed(0)
        f = torch.randn(20, 16, generator=g)
        assert ev.sync_confidence(f, f) > 0.5

    def test_shuffled_features_near_zero(self):
        g = torch.Generator().manual_seed(0)
        a = torch.randn(40, 16, generator=g)
        b = torch.randn(40, 16, generator=g)
        assert abs(ev.sync_confidence(a, b)) < 0.3

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            ev.sync_confidence(torch.ones(4, 8), torch.ones(5, 8))


class TestRetrieval:
    def test_identical_features_perfect(self):
        g = torch.Generator().manual_seed(1)
        f = torch.randn(30, 12, generator=g)
        assert ev.lip_retrieval_accuracy(f, f) == 1.0

    def test_random_features_near_chance(self):
        g = torch.Generator().manual_seed(2)
        a = torch.randn(60, 12, generator=g)
        b = torch.randn(60, 12, generator=g)
        acc = ev.lip_retrieval_accuracy(a, b)
        assert acc < 0.4        # chance is 1/9

    def test_short_clip_rejected(self):
        with pytest.raises(DataError):
            ev.lip_retrieval_accuracy(torch.ones(8, 4), torch.ones(8, 4))


class TestControlMSE:
    def test_zero_for_identical(self):
        r = np.random.default_rng(0).normal(size=(5, 12))
        assert ev.control_mse(r, r) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            ev.control_mse(np.zeros((3, 12)), np.zeros((4, 12)))


class TestSingleFactorTracks:
    @pytest.mark.parametrize("row", ev.ROWS)
    def test_only_row_moves(self, row):
        spec = sw.DynamicsSpec(length=24, blink_rate=0.5,
                               exp_segment_min=3, exp_segment_max=5)
        tracks = ev.single_factor_tracks(row, motion_seed=3, spec=spec)
        key = "expression" if row == "exp" else row
        for name, arr in tracks.items():
            if name == key:
                assert np.ptp(arr) > 0.0
            else:
                assert np.allclose(arr, 0.0)

    def test_unknown_row(self):
        with pytest.raises(ConfigError):
            ev.single_factor_tracks("teeth", 0, sw.DynamicsSpec(length=8))

    def test_tracks_to_factors_roundtrip(self):
        spec = sw.DynamicsSpec(length=10)
        tracks = ev.single_factor_tracks("pose", 1, spec)
        factors = ev.tracks_to_factors(tracks, identity_seed=7)
        assert len(factors) == 10
        assert all(f.lip_aperture == 0.0 for f in factors)
        assert any(np.abs(f.pose).max() > 0 for f in factors)


class TestOracleMatrix:
    def test_oracle_matrix_diag_dominant(self):
        probe_mat = pytest.importorskip("facefactors.train")
        # matrix of the oracle renderer through a frozen probe must already
        # concentrate variance on the diagonal; the model can only be worse
        from facefactors.config import StageConfig
        from facefactors.nets import NetConfig, PipelineModel
        from facefactors.train import set_global_determinism, train_probe
        set_global_determinism(0)
        model = PipelineModel(NetConfig(init_seed=0))
        train_probe(model, StageConfig(stage="probe", steps=250, batch_size=24,
                                       seed=1, probe_pool=600))
        mat = ev.disentanglement_matrix(
            lambda row, factors: ev.oracle_generate(factors),
            model.probe, n_clips=2, clip_length=16, seed=0)
        assert mat.shape == (5, 5)
        assert np.all(mat >= 0)
        assert np.all(np.diag(mat) > 0)

    def test_diag_dominance_formula(self):
        mat = np.eye(5) * 3.0 + 0.5
        # each row: diag 3.5, max off-diag 0.5 -> ratio 7
        assert ev.diag_dominance(mat) == pytest.approx(7.0)
        mat[2, 4] = 3.5
        assert ev.diag_dominance(mat) == pytest.approx(1.0)


class TestDriving:
    def test_generate_rejects_all_canonical_without_length(self, tiny_model):
        driver = ev.DrivenGenerator(tiny_model)
        f_app = driver.appearance(sw.render_frame(sw.canonical_factors(0)))
        with pytest.raises(ConfigError):
            driver.generate(f_app, ev.SlotFeatures())

    def test_generate_zero_fills_missing_slots(self, tiny_model):
        driver = ev.DrivenGenerator(tiny_model)
        frame = sw.render_frame(sw.canonical_factors(0))
        f_app = driver.appearance(frame)
        out1 = driver.generate(f_app, ev.SlotFeatures(), n_frames=3)
        zero = torch.zeros(3, tiny_model.cfg.dims["pose"])
        out2 = driver.generate(f_app, ev.SlotFeatures(pose=zero), n_frames=3)
        assert out1.shape == (3, sw.IMAGE_SIZE, sw.IMAGE_SIZE, 3)
        assert np.array_equal(out1, out2)

    def test_interpolation_endpoints_and_count(self, tiny_model, small_clips):
        clip = small_clips[0]
        strip = ev.interpolate_expression(tiny_model, clip.frames[0],
                                          clip.frames[2], clip.frames[9],
                                          n_steps=5)
        assert strip.shape[0] == 5
        assert strip.min() >= 0.0 and strip.max() <= 1.0


class TestProtocols:
    def test_protocol_validation(self):
        with pytest.raises(ConfigError):
            ev.ProtocolSpec(name="webcam").validate()
        with pytest.raises(ConfigError):
            ev.ProtocolSpec(n_pairs=0).validate()

    def test_cross_video_needs_two_clips(self, tiny_model, small_clips):
        from facefactors.train import ClipData
        data = ClipData([small_clips[0]])
        with pytest.raises(DataError):
            ev.run_protocol(tiny_model, data, ev.ProtocolSpec(name="cross_video"))

    def test_self_driving_report(self, tiny_model, small_data):
        rep = ev.run_protocol(tiny_model, small_data,
                              ev.ProtocolSpec(n_pairs=2, seed=3))
        assert rep.protocol == "self_driving"
        assert set(rep.metrics) == {"lmd", "lmd_m", "sync_conf"}
        assert len(rep.per_clip) == 2
        assert all(np.isfinite(v) for v in rep.metrics.values())

    def test_report_serialization(self, tmp_path):
        rep = ev.MetricsReport(protocol="self_driving",
                               metrics={"lmd": 1.5},
                               per_clip=[{"lmd": 1.0}, {"lmd": 2.0}])
        jp, cp = tmp_path / "m.json", tmp_path / "m.csv"
        rep.to_json(jp)
        rep.to_csv(cp)
        loaded = json.loads(jp.read_text())
        assert loaded["metrics"]["lmd"] == 1.5
        lines = cp.read_text().strip().splitlines()
        assert lines[0] == "clip,lmd"
        assert lines[1:] == ["0,1.0", "1,2.0"]

    def test_fixed_expression_sync_runs(self, tiny_model, small_data):
        score = ev.fixed_expression_sync(tiny_model, small_data, n_clips=2, seed=0)
        assert np.isfinite(score)


class TestLandmarkDistance:
    def test_zero_for_identical_images(self, tiny_model, small_clips):
        from facefactors.nets import frames_to_tensor
        imgs = frames_to_tensor(small_clips[0].frames[:4])
        assert ev.landmark_distance(tiny_model.probe, imgs, imgs) == 0.0
        assert ev.landmark_distance(tiny_model.probe, imgs, imgs,
                                    mouth_only=True) == 0.0

    def test_mouth_subset_differs_from_full(self, tiny_model, small_clips):
        from facefactors.nets import frames_to_tensor
        a = frames_to_tensor(small_clips[0].frames[:4])
        b = frames_to_tensor(small_clips[1].frames[:4])
        full = ev.landmark_distance(tiny_model.probe, a, b)
        mouth = ev.landmark_distance(tiny_model.probe, a, b, mouth_only=True)
        assert full > 0 and mouth > 0
        assert full != mouth
