"""Three-stage progressive training schedule.

Stage 1 learns appearance/motion disentanglement (E_app, E_mot, G0) with
augmentation and self-driving. Stage 2 isolates lip (audio-visual InfoNCE),
eye (compositing contrastive), and pose (probe-label regression) from the
frozen unified motion feature. Stage 3 trains the expression encoder and the
final generator with in-window averaging, memory-bank decorrelation, and
self-reconstruction. All randomness is drawn from stateless per-step
generators, so identical (config, dataset, seed) reproduce identical runs
and resuming from a checkpoint is exact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import augment as ag
from . import checkpoint as ck
from . import losses as ls
from . import synthworld as sw
from .config import RunConfig, StageConfig
from .errors import ConfigError, DataError, DegeneratePairError
from .nets import (NetConfig, PipelineModel, P_POSE, frames_to_tensor,
                   probe_targets)

TRAINED_BY_STAGE = {
    "probe": ("probe",),
    "1": ("e_app", "e_mot", "g0", "disc"),
    "2-lip": ("e_lip", "e_aud"),
    "2-eye": ("e_eye",),
    "2-pose": ("e_pose",),
    "3": ("e_exp", "g", "disc"),
}
ALL_NETS = ("e_app", "e_mot", "e_lip", "e_eye", "e_pose", "e_exp", "e_aud",
            "g0", "g", "disc", "probe")


def set_global_determinism(seed: int, single_thread: bool = False) -> None:
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)


def step_rng(seed: int, step: int, tag: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, step, tag])))


def apply_freeze(model: PipelineModel, stage: str) -> None:
    """Only the stage's own networks may receive gradients."""
    trained = TRAINED_BY_STAGE[stage]
    for name in ALL_NETS:
        module = getattr(model, name)
        flag = name in trained
        for p in module.parameters():
            p.requires_grad_(flag)
            if not flag:
                p.grad = None
    if stage != "probe":
        model.probe.require_frozen()


def assert_frozen_clean(model: PipelineModel, stage: str) -> None:
    """Stage monotonicity check: frozen parameters never accumulate grads."""
    trained = set(TRAINED_BY_STAGE[stage])
    for name in ALL_NETS:
        if name in trained:
            continue
        for p in getattr(model, name).parameters():
            if p.grad is not None and p.grad.abs().max() > 0:
                raise ConfigError(f"frozen network '{name}' accumulated gradient in stage {stage}")


class TrainingLog:
    """Append-only CSV of per-step loss scalars."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self._keys: Optional[List[str]] = None
        self.history: List[dict] = []

    def write(self, step: int, scalars: dict) -> None:
        row = {"step": step, **scalars}
        self.history.append(row)
        if self.path is None:
            return
        if self._keys is None:
            self._keys = list(row.keys())
            new = not self.path.exists()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=self._keys)
                if new:
                    w.writeheader()
                w.writerow(row)
        else:
            with open(self.path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=self._keys, restval="",
                               extrasaction="ignore").writerow(row)


# ---------------------------------------------------------------------------
# dataset access and feature caches


@dataclass
class ClipData:
    """In-memory view of a dataset with flat (clip, frame) indexing."""

    clips: List[sw.Clip]
    audio_windows: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.clips:
            raise DataError("empty dataset")
        for clip in self.clips:
            wins = np.stack([sw.audio_window(clip.audio, t) for t in range(len(clip))])
            self.audio_windows.append(wins.astype(np.float32))

    def __len__(self):
        return len(self.clips)

    def frame(self, c: int, t: int) -> np.ndarray:
        return self.clips[c].frames[t]

    def sample_items(self, rng: np.random.Generator, n: int) -> List[Tuple[int, int]]:
        cs = rng.integers(0, len(self.clips), n)
        return [(int(c), int(rng.integers(0, len(self.clips[c])))) for c in cs]


class FeatureCache:
    """Frozen-encoder features precomputed over a dataset.

    Valid only while the producing networks stay frozen; stages 2 and 3
    rebuild their caches right after loading the upstream checkpoint.
    """

    def __init__(self):
        self.fmot: List[torch.Tensor] = []
        self.fmot_aug: List[torch.Tensor] = []    # (A, T, D) per clip
        self.faud: List[torch.Tensor] = []
        self.feye: List[torch.Tensor] = []
        self.fpose: List[torch.Tensor] = []
        self.probe_pose: List[torch.Tensor] = []


@torch.no_grad()
def _batched_apply(fn, frames: np.ndarray, batch: int = 64) -> torch.Tensor:
    outs = []
    for i in range(0, len(frames), batch):
        outs.append(fn(frames_to_tensor(frames[i:i + batch])))
    return torch.cat(outs, dim=0)


@torch.no_grad()
def build_motion_cache(model: PipelineModel, data: ClipData,
                       n_aug_variants: int = 0, seed: int = 0,
                       aug_cfg: Optional[ag.AugmentConfig] = None) -> FeatureCache:
    model.eval()
    cache = FeatureCache()
    for c, clip in enumerate(data.clips):
        cache.fmot.append(_batched_apply(model.e_mot, clip.frames))
        if n_aug_variants > 0:
            variants = []
            for v in range(n_aug_variants):
                rng = step_rng(seed, c, 9000 + v)
                aug = np.stack([ag.geometric_augment(fr, rng, aug_cfg)[0] for fr in clip.frames])
                variants.append(_batched_apply(model.e_mot, aug))
            cache.fmot_aug.append(torch.stack(variants))
    model.train()
    return cache


@torch.no_grad()
def extend_cache_stage3(model: PipelineModel, data: ClipData, cache: FeatureCache) -> None:
    model.eval()
    for c, clip in enumerate(data.clips):
        cache.faud.append(model.e_aud(torch.from_numpy(data.audio_windows[c])))
        cache.feye.append(model.e_eye(cache.fmot[c]))
        cache.fpose.append(model.e_pose(cache.fmot[c]))
    model.train()


@torch.no_grad()
def cache_probe_pose(model: PipelineModel, data: ClipData, cache: FeatureCache) -> None:
    model.eval()
    for clip in data.clips:
        _, fac = model.probe(frames_to_tensor(clip.frames))
        cache.probe_pose.append(fac[:, P_POSE].clone())
    model.train()


def canonical_audio_window() -> np.ndarray:
    aud = sw.synth_audio(np.zeros(sw.AUDIO_WINDOW * 2), noise_seed=0)
    return sw.audio_window(aud, len(aud) - 1)


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_pipeline(path, model: PipelineModel, stage: str, step: int,
                  opts: Optional[Dict[str, torch.optim.Optimizer]] = None) -> None:
    blobs = ck.model_blobs(model)
    meta = {"opt": {}}
    for name, opt in (opts or {}).items():
        oblobs, ometa = ck.optimizer_blobs(opt, f"opt/{name}")
        blobs.update(oblobs)
        meta["opt"][name] = ometa
    save_flags = {"probe_frozen": model.probe.frozen}
    meta["flags"] = save_flags
    ck.save_checkpoint(path, stage, model.cfg.config_hash(), step, blobs, meta)


def load_pipeline(path, net_cfg: NetConfig) -> Tuple[PipelineModel, dict, Dict[str, np.ndarray]]:
    header, blobs = ck.load_checkpoint(path, expect_config_hash=net_cfg.config_hash())
    model = PipelineModel(net_cfg)
    ck.load_model_blobs(model, blobs)
    if header["meta"].get("flags", {}).get("probe_frozen"):
        model.probe.freeze()
    return model, header, blobs


def _set_lr(opt: torch.optim.Optimizer, base_lr: float, step: int, cfg: StageConfig) -> None:
    lr = base_lr * (cfg.decay_rate ** (step // cfg.decay_interval))
    for group in opt.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# probe pretraining (before stage 1)


def _random_factor(rng: np.random.Generator, appearance: np.ndarray) -> sw.FactorVector:
    return sw.FactorVector(
        identity_seed=0,
        appearance_params=appearance,
        lip_aperture=float(rng.uniform(0, 1)),
        pose=rng.uniform(-1, 1, sw.POSE_DIM) * sw.POSE_RANGE,
        gaze=rng.uniform(-1, 1, sw.GAZE_DIM),
        blink=float(rng.uniform(0, 1) if rng.uniform() < 0.4 else 0.0),
        expression=rng.uniform(-1, 1, sw.EXPRESSION_DIM),
    )


def train_probe(model: PipelineModel, cfg: StageConfig,
                log: Optional[TrainingLog] = None) -> None:
    """Supervised keypoint/factor regression on freshly rendered frames,
    then freeze the probe for the rest of the pipeline."""
    if model.probe.frozen:
        raise ConfigError("probe is already frozen")
    rng = step_rng(cfg.seed, 0, 1)
    pool_imgs, pool_kp, pool_fac = [], [], []
    for _ in range(cfg.probe_pool):
        f = _random_factor(rng, rng.uniform(-1, 1, sw.APPEARANCE_DIM))
        pool_imgs.append(sw.render_frame(f))
        pool_kp.append(sw.keypoints(f))
        pool_fac.append(probe_targets(f))
    imgs = frames_to_tensor(np.stack(pool_imgs))
    kps = torch.from_numpy(np.stack(pool_kp).astype(np.float32))
    facs = torch.from_numpy(np.stack(pool_fac))

    opt = torch.optim.Adam(model.probe.parameters(), lr=cfg.lr_head)
    size = float(model.probe.image_size)
    # upweight the low-contrast factors (gaze, blink, expression) so the
    # readout is usable for them, not just for pose and lip
    dim_w = torch.tensor([1.0] * 4 + [3.0, 3.0, 2.0] + [2.0] * 4 + [1.5])
    for step in range(cfg.steps):
        _set_lr(opt, cfg.lr_head, step, cfg)
        rng = step_rng(cfg.seed, step, 2)
        idx = torch.from_numpy(rng.integers(0, len(imgs), cfg.batch_size))
        batch = imgs[idx]
        # mild noise so the frozen probe stays stable on generated textures
        batch = (batch + torch.from_numpy(
            rng.normal(0, 0.015, batch.shape).astype(np.float32))).clamp(0, 1)
        kp_pred, fac_pred = model.probe(batch)
        loss = ((kp_pred - kps[idx]) / size).pow(2).mean() \
            + ((fac_pred - facs[idx]).pow(2) * dim_w).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and step % 25 == 0:
            log.write(step, {"probe_loss": float(loss.detach())})
    model.probe.freeze()


# ---------------------------------------------------------------------------
# stage 1: appearance / unified motion


def run_stage1(cfg: StageConfig, data: ClipData, model: PipelineModel,
               log: Optional[TrainingLog] = None,
               start_step: int = 0,
               stop_step: Optional[int] = None,
               opts: Optional[Dict[str, torch.optim.Optimizer]] = None,
               ) -> Dict[str, torch.optim.Optimizer]:
    """Self-driving reconstruction: appearance branch sees a clean frame,
    motion branch an augmented frame from the same clip."""
    if not data.clips[0].factors:
        raise DataError("dataset lacks factor tracks needed for probe targets")
    model.probe.require_frozen()
    apply_freeze(model, "1")
    pyr = ls.PerceptualPyramid()
    if opts is None:
        opts = {
            "g": torch.optim.Adam(
                list(model.e_app.parameters()) + list(model.e_mot.parameters())
                + list(model.g0.parameters()), lr=cfg.lr_gen),
            "d": torch.optim.Adam(model.disc.parameters(), lr=cfg.lr_disc),
        }
    aug_cfg = ag.AugmentConfig()
    for step in range(start_step, cfg.steps if stop_step is None else min(stop_step, cfg.steps)):
        _set_lr(opts["g"], cfg.lr_gen, step, cfg)
        _set_lr(opts["d"], cfg.lr_disc, step, cfg)
        rng = step_rng(cfg.seed, step, 10)
        app_np, drv_np, tgt_np = [], [], []
        for c, t in data.sample_items(rng, cfg.batch_size):
            t_app = int(rng.integers(0, len(data.clips[c])))
            app_np.append(data.frame(c, t_app))
            drv_np.append(ag.motion_branch_augment(data.frame(c, t), rng, aug_cfg))
            tgt_np.append(data.frame(c, t))
        app = frames_to_tensor(np.stack(app_np))
        drv = frames_to_tensor(np.stack(drv_np))
        tgt = frames_to_tensor(np.stack(tgt_np))

        i0 = model.generate0(model.e_app(app), model.e_mot(drv))

        gen_adv, _, _ = ls.adversarial_losses(model.disc, i0, tgt)
        report = ls.LossReport()
        report.add("recon", ls.perceptual_loss(pyr, i0, tgt), cfg.w_recon)
        report.add("adv", gen_adv, cfg.w_adv)
        report.add("mot", ls.motion_recon_loss(model.probe, i0, tgt), cfg.w_mot)
        report.check_finite()
        opts["g"].zero_grad()
        report.total().backward()
        opts["g"].step()

        _, disc_loss, _ = ls.adversarial_losses(model.disc, i0.detach(), tgt)
        opts["d"].zero_grad()
        disc_loss.backward()
        opts["d"].step()
        assert_frozen_clean(model, "1")
        report.add("disc", disc_loss.detach())
        if log:
            log.write(step, report.scalars())
    return opts


def resume_stage1(ckpt_path, cfg: StageConfig, data: ClipData,
                  net_cfg: NetConfig,
                  log: Optional[TrainingLog] = None) -> PipelineModel:
    """Continue a stage-1 run from ``ckpt_path`` to ``cfg.steps``.

    With the same config and dataset used to produce the checkpoint, the
    resumed run is bit-identical to one that never stopped.
    """
    model, header, blobs = load_pipeline(ckpt_path, net_cfg)
    if header["stage"] != "1":
        raise ConfigError(f"expected a stage-1 checkpoint, got stage {header['stage']!r}")
    apply_freeze(model, "1")
    opts = {
        "g": torch.optim.Adam(
            list(model.e_app.parameters()) + list(model.e_mot.parameters())
            + list(model.g0.parameters()), lr=cfg.lr_gen),
        "d": torch.optim.Adam(model.disc.parameters(), lr=cfg.lr_disc),
    }
    for name, opt in opts.items():
        ck.load_optimizer_blobs(opt, blobs, header["meta"]["opt"][name], f"opt/{name}")
    run_stage1(cfg, data, model, log, start_step=header["step"], opts=opts)
    return model


# ---------------------------------------------------------------------------
# stage 2: fine-grained heads


def run_stage2_lip(cfg: StageConfig, data: ClipData, model: PipelineModel,
                   log: Optional[TrainingLog] = None,
                   cache: Optional[FeatureCache] = None) -> None:
    apply_freeze(model, "2-lip")
    if cache is None:
        cache = build_motion_cache(model, data)
    min_len = min(len(c) for c in data.clips)
    if min_len < cfg.k_negatives + cfg.min_offset:
        raise DataError("clips too short for the configured negative count")
    opt = torch.optim.Adam(
        list(model.e_lip.parameters()) + list(model.e_aud.parameters()), lr=cfg.lr_head)
    for step in range(cfg.steps):
        _set_lr(opt, cfg.lr_head, step, cfg)
        rng = step_rng(cfg.seed, step, 20)
        fmot_pos, fmot_neg, aud_pos, aud_neg = [], [], [], []
        for c, t in data.sample_items(rng, cfg.batch_size):
            n = len(data.clips[c])
            cand = np.array([i for i in range(n) if abs(i - t) >= cfg.min_offset])
            neg = rng.choice(cand, size=cfg.k_negatives, replace=False)
            fmot_pos.append(cache.fmot[c][t])
            fmot_neg.append(cache.fmot[c][neg])
            aud_pos.append(data.audio_windows[c][t])
            aud_neg.append(data.audio_windows[c][neg])
        f_v = model.e_lip(torch.stack(fmot_pos))
        f_vn = model.e_lip(torch.stack(fmot_neg))
        f_a = model.e_aud(torch.from_numpy(np.stack(aud_pos)))
        f_an = model.e_aud(torch.from_numpy(np.stack(aud_neg)))
        report = ls.LossReport()
        report.add("a2v", ls.infonce(f_a, f_v, f_vn))
        report.add("v2a", ls.infonce(f_v, f_a, f_an))
        report.check_finite()
        opt.zero_grad()
        report.total().backward()
        opt.step()
        assert_frozen_clean(model, "2-lip")
        if log:
            log.write(step, report.scalars())


def build_eye_triplets(cfg: StageConfig, data: ClipData, model: PipelineModel,
                       seed_tag: int = 30) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pregenerate composited triplets and cache their unified motion
    features (E_mot is frozen in stage 2, so this is exact)."""
    rng = step_rng(cfg.seed, 0, seed_tag)
    v1s, v2s, anchors = [], [], []
    while len(anchors) < cfg.n_eye_triplets:
        ci = int(rng.integers(0, len(data.clips)))
        cj = int(rng.integers(0, len(data.clips)))
        t1 = int(rng.integers(0, len(data.clips[ci])))
        t2 = int(rng.integers(0, len(data.clips[cj])))
        try:
            tri = ag.composite_eyes(data.frame(ci, t1), data.clips[ci].factors[t1],
                                    data.frame(cj, t2), data.clips[cj].factors[t2])
        except DegeneratePairError:
            continue
        v1s.append(tri.v1)
        v2s.append(tri.v2)
        anchors.append(tri.anchor)
    with torch.no_grad():
        model.eval()
        fm1 = _batched_apply(model.e_mot, np.stack(v1s))
        fm2 = _batched_apply(model.e_mot, np.stack(v2s))
        fma = _batched_apply(model.e_mot, np.stack(anchors))
        model.train()
    return fm1, fm2, fma


def run_stage2_eye(cfg: StageConfig, data: ClipData, model: PipelineModel,
                   log: Optional[TrainingLog] = None,
                   triplets: Optional[Tuple[torch.Tensor, ...]] = None) -> None:
    apply_freeze(model, "2-eye")
    if triplets is None:
        triplets = build_eye_triplets(cfg, data, model)
    fm1, fm2, fma = triplets
    opt = torch.optim.Adam(model.e_eye.parameters(), lr=cfg.lr_head)
    for step in range(cfg.steps):
        _set_lr(opt, cfg.lr_head, step, cfg)
        idx = torch.from_numpy(step_rng(cfg.seed, step, 31).integers(0, len(fm1), cfg.batch_size))
        f1 = model.e_eye(fm1[idx])
        f2 = model.e_eye(fm2[idx])
        fa = model.e_eye(fma[idx])
        loss = ls.eye_contrastive_loss(f1, f2, fa)
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert_frozen_clean(model, "2-eye")
        if log:
            log.write(step, {"eye": float(loss.detach())})


def run_stage2_pose(cfg: StageConfig, data: ClipData, model: PipelineModel,
                    log: Optional[TrainingLog] = None,
                    cache: Optional[FeatureCache] = None) -> None:
    apply_freeze(model, "2-pose")
    if cache is None:
        cache = build_motion_cache(model, data)
    if not cache.probe_pose:
        cache_probe_pose(model, data, cache)
    fmot = torch.cat(cache.fmot)
    labels = torch.cat(cache.probe_pose)
    opt = torch.optim.Adam(model.e_pose.parameters(), lr=cfg.lr_head)
    for step in range(cfg.steps):
        _set_lr(opt, cfg.lr_head, step, cfg)
        idx = torch.from_numpy(step_rng(cfg.seed, step, 41).integers(0, len(fmot), cfg.batch_size))
        loss = ls.pose_loss(model.e_pose(fmot[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert_frozen_clean(model, "2-pose")
        if log:
            log.write(step, {"pose": float(loss.detach())})


# ---------------------------------------------------------------------------
# stage 3: expression + final generator


_CANON_SLOTS = ("aud", "eye", "pose", "exp")


def _dropout_target(factors: sw.FactorVector, dropped: Sequence[str]) -> sw.FactorVector:
    kwargs = {}
    if "aud" in dropped:
        kwargs["lip_aperture"] = 0.0
    if "eye" in dropped:
        kwargs["gaze"] = np.zeros(sw.GAZE_DIM)
        kwargs["blink"] = 0.0
    if "pose" in dropped:
        kwargs["pose"] = np.zeros(sw.POSE_DIM)
    if "exp" in dropped:
        kwargs["expression"] = np.zeros(sw.EXPRESSION_DIM)
    return factors.replaced(**kwargs)


def run_stage3(cfg: StageConfig, data: ClipData, model: PipelineModel,
               log: Optional[TrainingLog] = None,
               cache: Optional[FeatureCache] = None) -> Dict[str, ls.MemoryBank]:
    apply_freeze(model, "3")
    if cache is None:
        cache = build_motion_cache(model, data, n_aug_variants=cfg.aug_variants,
                                   seed=cfg.seed)
    if not cache.faud:
        extend_cache_stage3(model, data, cache)
    pyr = ls.PerceptualPyramid()
    dims = model.cfg.dims
    bank_e = ls.MemoryBank(cfg.bank_capacity, dims["exp"])
    bank_a = ls.MemoryBank(cfg.bank_capacity, dims["aud"])
    canon_aud = torch.from_numpy(canonical_audio_window()[None].astype(np.float32))
    opt_g = torch.optim.Adam(
        list(model.e_exp.parameters()) + list(model.g.parameters()), lr=cfg.lr_gen)
    opt_d = torch.optim.Adam(model.disc.parameters(), lr=cfg.lr_disc)
    freeze_step = int(round(cfg.exp_freeze_frac * cfg.steps))
    exp_frozen = False
    half = cfg.k_win // 2

    for step in range(cfg.steps):
        if not exp_frozen and step >= freeze_step:
            for p in model.e_exp.parameters():
                p.requires_grad_(False)
            exp_frozen = True
        _set_lr(opt_g, cfg.lr_gen, step, cfg)
        _set_lr(opt_d, cfg.lr_disc, step, cfg)
        rng = step_rng(cfg.seed, step, 50)

        items = data.sample_items(rng, cfg.batch_size)
        app_np, tgt_list, aud_list = [], [], []
        fexp_wins, feye_rows, fpose_rows, faud_rows = [], [], [], []
        drop_masks = []
        for c, t in items:
            clip = data.clips[c]
            app_np.append(data.frame(c, int(rng.integers(0, len(clip)))))
            if rng.uniform() < cfg.all_canonical_prob:
                dropped = list(_CANON_SLOTS)
            else:
                dropped = [s for s in _CANON_SLOTS if rng.uniform() < cfg.canonical_dropout]
            drop_masks.append(dropped)
            if dropped:
                tgt_list.append(sw.render_frame(_dropout_target(clip.factors[t], dropped)))
            else:
                tgt_list.append(data.frame(c, t))
            # expression window over pre-augmented motion features
            idxs = [ag.reflect_index(t + d, len(clip)) for d in range(-half, half + 1)]
            variants = rng.integers(0, max(1, cfg.aug_variants), len(idxs))
            if cache.fmot_aug:
                rows = torch.stack([cache.fmot_aug[c][int(v)][i]
                                    for v, i in zip(variants, idxs)])
            else:
                rows = torch.stack([cache.fmot[c][i] for i in idxs])
            fexp_wins.append(rows)
            feye_rows.append(cache.feye[c][t])
            fpose_rows.append(cache.fpose[c][t])
            faud_rows.append(cache.faud[c][t])
            aud_list.append(canon_aud[0].numpy() if "aud" in dropped
                            else data.audio_windows[c][t])

        app = frames_to_tensor(np.stack(app_np))
        tgt = frames_to_tensor(np.stack(tgt_list))
        aud_wins = torch.from_numpy(np.stack(aud_list))
        f_app = model.e_app(app).detach()
        f_exp_bar = ls.window_average(model.e_exp(torch.stack(fexp_wins)))
        f_eye = torch.stack(feye_rows)
        f_pose = torch.stack(fpose_rows)
        f_aud = torch.stack(faud_rows)

        keep = {s: torch.tensor([[0.0] if s in d else [1.0] for d in drop_masks])
                for s in _CANON_SLOTS}
        i_f = model.generate(f_app,
                             f_aud * keep["aud"],
                             f_eye * keep["eye"],
                             f_pose * keep["pose"],
                             f_exp_bar * keep["exp"])

        gen_adv, _, fm = ls.adversarial_losses(model.disc, i_f, tgt)

        bank_e.push(f_exp_bar)
        bank_a.push(f_aud)

        report = ls.LossReport()
        report.add("vgg", ls.perceptual_loss(pyr, i_f, tgt), cfg.w_recon)
        report.add("adv", gen_adv, cfg.w_adv)
        report.add("fm", fm, cfg.w_fm)
        con_total, con_parts = ls.consistency_loss(model, i_f, tgt, aud_wins)
        report.add("con", con_total, cfg.w_con)
        if cfg.w_decor > 0.0 and len(bank_e) >= ls.MIN_CORR_ROWS:
            report.add("decor", ls.decorrelation_loss(bank_e, bank_a), cfg.w_decor)
        else:
            report.add("decor", torch.zeros(()), 0.0)
        report.check_finite()
        opt_g.zero_grad()
        report.total().backward()
        opt_g.step()

        _, disc_loss, _ = ls.adversarial_losses(model.disc, i_f.detach(), tgt)
        opt_d.zero_grad()
        disc_loss.backward()
        opt_d.step()
        assert_frozen_clean(model, "3")
        report.add("disc", disc_loss.detach())
        for k, v in con_parts.items():
            report.add(k, v.detach(), 0.0)
        if log:
            log.write(step, report.scalars())
    return {"exp": bank_e, "aud": bank_a}


# ---------------------------------------------------------------------------
# full pipeline driver


def run_stage(run_cfg: RunConfig, data: ClipData,
              model: Optional[PipelineModel] = None,
              ckpt_in: Optional[str] = None,
              out_dir: Optional[str] = None) -> PipelineModel:
    """Train one stage and optionally write a checkpoint + log."""
    cfg = run_cfg.stage
    cfg.validate()
    if cfg.deterministic:
        set_global_determinism(cfg.seed)
    if model is None:
        if ckpt_in is not None:
            model, header, _ = load_pipeline(ckpt_in, run_cfg.net)
            if cfg.stage in ("2-lip", "2-eye", "2-pose", "3") and header["stage"] == "probe":
                raise ConfigError(f"stage {cfg.stage} requires a stage-1 (or later) checkpoint")
        elif cfg.stage in ("2-lip", "2-eye", "2-pose", "3"):
            raise ConfigError(f"stage {cfg.stage} requires an earlier-stage checkpoint")
        else:
            model = PipelineModel(run_cfg.net)
    log = TrainingLog(Path(out_dir) / f"train_stage{cfg.stage}.csv") if out_dir else None
    if cfg.stage == "probe":
        train_probe(model, cfg, log)
    elif cfg.stage == "1":
        if not model.probe.frozen:
            train_probe(model, StageConfig(stage="probe", steps=max(800, cfg.steps),
                                           batch_size=32, seed=cfg.seed), None)
        run_stage1(cfg, data, model, log)
    elif cfg.stage == "2-lip":
        run_stage2_lip(cfg, data, model, log)
    elif cfg.stage == "2-eye":
        run_stage2_eye(cfg, data, model, log)
    elif cfg.stage == "2-pose":
        run_stage2_pose(cfg, data, model, log)
    elif cfg.stage == "3":
        run_stage3(cfg, data, model, log)
    if out_dir:
        save_pipeline(Path(out_dir) / f"ckpt_stage{cfg.stage}.ff", model, cfg.stage, cfg.steps)
    return model
