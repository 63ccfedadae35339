import numpy as np
import pytest
import torch

from facefactors import checkpoint as ck
from facefactors import losses as ls
from facefactors import synthworld as sw
from facefactors import train as tr
from facefactors.config import StageConfig
from facefactors.errors import ConfigError, DataError
from facefactors.nets import NetConfig, PipelineModel

NET = NetConfig(init_seed=0)


def _probe_model():
    tr.set_global_determinism(0)
    m = PipelineModel(NET)
    tr.train_probe(m, StageConfig(stage="probe", steps=20, batch_size=8,
                                  seed=1, probe_pool=80))
    return m


@pytest.fixture(scope="module")
def data():
    spec = sw.DynamicsSpec(length=20)
    return tr.ClipData([sw.generate_clip(i, 20, spec) for i in range(3)])


@pytest.fixture(scope="module")
def staged_model(data):
    """One model pushed through a few steps of every stage."""
    m = _probe_model()
    tr.run_stage1(StageConfig(stage="1", steps=3, batch_size=4, seed=2), data, m)
    cache = tr.build_motion_cache(m, data)
    tr.run_stage2_lip(StageConfig(stage="2-lip", steps=3, batch_size=4, seed=2),
                      data, m, cache=cache)
    tr.run_stage2_eye(StageConfig(stage="2-eye", steps=3, batch_size=4, seed=2,
                                  n_eye_triplets=12), data, m)
    tr.run_stage2_pose(StageConfig(stage="2-pose", steps=3, batch_size=4, seed=2),
                       data, m, cache=cache)
    tr.run_stage3(StageConfig(stage="3", steps=4, batch_size=8, seed=2, k_win=3,
                              aug_variants=1, bank_capacity=32), data, m)
    return m


class TestFreezingContracts:
    def test_probe_must_precede_stage1(self, data):
        m = PipelineModel(NET)
        with pytest.raises(ConfigError):
            tr.run_stage1(StageConfig(stage="1", steps=1, batch_size=2, seed=0),
                          data, m)

    def test_stage1_leaves_heads_untouched(self, data):
        m = _probe_model()
        before = {k: v.clone() for k, v in m.state_dict().items()}
        tr.run_stage1(StageConfig(stage="1", steps=2, batch_size=4, seed=2), data, m)
        after = m.state_dict()
        for name in ("e_lip", "e_eye", "e_pose", "e_exp", "e_aud", "g.", "probe"):
            for k in before:
                if k.startswith(name):
                    assert torch.equal(before[k], after[k]), k
        assert any(not torch.equal(before[k], after[k])
                   for k in before if k.startswith("e_mot"))

    def test_stage2_freezes_everything_but_its_head(self, data):
        m = _probe_model()
        tr.run_stage1(StageConfig(stage="1", steps=1, batch_size=4, seed=2), data, m)
        before = {k: v.clone() for k, v in m.state_dict().items()}
        tr.run_stage2_lip(StageConfig(stage="2-lip", steps=2, batch_size=4, seed=2),
                          data, m)
        after = m.state_dict()
        for k in before:
            if k.startswith(("e_lip", "e_aud")):
                continue
            assert torch.equal(before[k], after[k]), k
        assert any(not torch.equal(before[k], after[k])
                   for k in before if k.startswith("e_lip"))

    def test_stage3_freezes_motion_encoder(self, data, staged_model):
        m = staged_model
        before = {k: v.clone() for k, v in m.state_dict().items()
                  if k.startswith(("e_mot", "e_app", "e_lip", "e_aud"))}
        tr.run_stage3(StageConfig(stage="3", steps=2, batch_size=8, seed=5,
                                  k_win=3, aug_variants=1, bank_capacity=32),
                      data, m)
        for k, v in before.items():
            assert torch.equal(v, m.state_dict()[k]), k

    def test_exp_freeze_fraction(self, data):
        m = _probe_model()
        tr.run_stage1(StageConfig(stage="1", steps=1, batch_size=4, seed=2), data, m)
        exp_before = {k: v.clone() for k, v in m.e_exp.state_dict().items()}
        # freeze point at step 0: expression encoder never updates
        tr.run_stage3(StageConfig(stage="3", steps=3, batch_size=8, seed=2,
                                  k_win=3, aug_variants=1, bank_capacity=32,
                                  exp_freeze_frac=0.0), data, m)
        for k, v in exp_before.items():
            assert torch.equal(v, m.e_exp.state_dict()[k])


class TestDeterminismAndResume:
    def test_repeat_runs_bit_identical(self, data, tmp_path):
        outs = []
        for rep in range(2):
            m = _probe_model()
            tr.run_stage1(StageConfig(stage="1", steps=3, batch_size=4, seed=9),
                          data, m)
            p = tmp_path / f"r{rep}.ff"
            tr.save_pipeline(p, m, "1", 3)
            outs.append(p.read_bytes())
        assert outs[0] == outs[1]

    def test_resume_bit_exact(self, data, tmp_path):
        cfg = StageConfig(stage="1", steps=6, batch_size=4, seed=9)
        full = _probe_model()
        tr.run_stage1(cfg, data, full)

        half = _probe_model()
        opts = tr.run_stage1(cfg, data, half, stop_step=3)
        p = tmp_path / "half.ff"
        tr.save_pipeline(p, half, "1", 3, opts)
        resumed = tr.resume_stage1(p, cfg, data, NET)

        for a, b in zip(full.state_dict().values(), resumed.state_dict().values()):
            assert torch.equal(a, b)

    def test_resume_rejects_wrong_stage(self, data, tmp_path):
        m = _probe_model()
        p = tmp_path / "probeonly.ff"
        tr.save_pipeline(p, m, "probe", 0)
        with pytest.raises(ConfigError):
            tr.resume_stage1(p, StageConfig(stage="1", steps=2, batch_size=2,
                                            seed=0), data, NET)


class TestStage3Mechanics:
    def test_memory_banks_filled(self, data):
        m = _probe_model()
        tr.run_stage1(StageConfig(stage="1", steps=1, batch_size=4, seed=2), data, m)
        banks = tr.run_stage3(StageConfig(stage="3", steps=3, batch_size=8, seed=2,
                                          k_win=3, aug_variants=1,
                                          bank_capacity=16), data, m)
        assert len(banks["exp"]) == 16       # 3 steps x 8 > capacity, FIFO
        assert len(banks["aud"]) == 16

    def test_losses_finite_and_logged(self, data, tmp_path):
        m = _probe_model()
        tr.run_stage1(StageConfig(stage="1", steps=1, batch_size=4, seed=2), data, m)
        log = tr.TrainingLog(tmp_path / "log.csv")
        tr.run_stage3(StageConfig(stage="3", steps=2, batch_size=8, seed=2,
                                  k_win=3, aug_variants=1, bank_capacity=32),
                      data, m, log)
        assert (tmp_path / "log.csv").exists()
        for row in log.history:
            for k, v in row.items():
                assert np.isfinite(v), k
        assert {"vgg", "adv", "fm", "con", "disc", "total"} <= set(log.history[0])


class TestDataPlumbing:
    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            tr.ClipData([])

    def test_clips_too_short_for_negatives(self):
        spec = sw.DynamicsSpec(length=8)
        short = tr.ClipData([sw.generate_clip(0, 8, spec)])
        m = _probe_model()
        with pytest.raises(DataError):
            tr.run_stage2_lip(StageConfig(stage="2-lip", steps=1, batch_size=2,
                                          seed=0), short, m)

    def test_canonical_dropout_target(self):
        f = sw.canonical_factors(0, sw.sample_appearance(0)).replaced(
            lip_aperture=0.8, blink=0.5, gaze=np.array([0.5, 0.5]),
            pose=np.array([0.1, 0.0, 0.0, 0.0]),
            expression=np.array([0.5, 0.5, 0.5, 0.5]))
        out = tr._dropout_target(f, ["aud", "eye"])
        assert out.lip_aperture == 0.0
        assert out.blink == 0.0
        assert np.allclose(out.gaze, 0.0)
        assert np.allclose(out.pose, f.pose)          # kept
        assert np.allclose(out.expression, f.expression)
        full = tr._dropout_target(f, ["aud", "eye", "pose", "exp"])
        assert np.allclose(full.to_array()[sw.APPEARANCE_DIM:], 0.0)
