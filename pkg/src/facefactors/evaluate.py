"""Evaluation metrics and driving protocols.

Covers landmark distances, audio-visual sync confidence, normalized
expression-scale error, factor-control errors, the factor-by-factor
disentanglement matrix, expression interpolation, and the self-driving /
cross-video generation protocols.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import synthworld as sw
from .errors import ConfigError, DataError, UndefinedMetricError
from .losses import window_average
from .nets import (P_BLINK, P_EXP, P_GAZE, P_LIP, P_POSE, PipelineModel,
                   frames_to_tensor, tensor_to_frames)
from .train import ClipData, canonical_audio_window, step_rng

ROWS = ("lip", "pose", "blink", "gaze", "exp")
READOUT_SLICES = {"lip": P_LIP, "pose": P_POSE, "blink": P_BLINK,
                  "gaze": P_GAZE, "exp": P_EXP}


# ---------------------------------------------------------------------------
# scalar metrics


def nlsec(gen_scale: float, gt_scale: float) -> float:
    """Normalized scale error of a generated clip against its reference."""
    if gt_scale <= 0:
        raise UndefinedMetricError(f"reference scale must be positive, got {gt_scale}")
    return abs(gen_scale - gt_scale) / gt_scale


def landmark_distance(probe, imgs_gen: torch.Tensor, imgs_gt: torch.Tensor,
                      mouth_only: bool = False) -> float:
    """Mean Euclidean keypoint distance in pixels between two image sets."""
    probe.require_frozen()
    with torch.no_grad():
        kp_gen, _ = probe(imgs_gen)
        kp_gt, _ = probe(imgs_gt)
    if mouth_only:
        idx = list(sw.MOUTH_KEYPOINTS)
        kp_gen, kp_gt = kp_gen[:, idx], kp_gt[:, idx]
    return float((kp_gen - kp_gt).norm(dim=-1).mean())


def sync_confidence(f_lip: torch.Tensor, f_aud: torch.Tensor) -> float:
    """Offset-contrast score of lip/audio agreement over a clip.

    For each frame, the cosine similarity at the true offset minus the
    median similarity against all other frames' audio. Positive values mean
    the lip feature tracks its own audio better than chance.
    """
    if f_lip.shape[0] != f_aud.shape[0]:
        raise ConfigError("lip and audio tracks must have equal length")
    a = f_lip / f_lip.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    b = f_aud / f_aud.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    sim = a @ b.T                                   # (T, T)
    diag = sim.diagonal()
    med = sim.median(dim=1).values
    return float((diag - med).mean())


def lip_retrieval_accuracy(f_lip: torch.Tensor, f_aud: torch.Tensor,
                           n_candidates: int = 9, min_offset: int = 5,
                           seed: int = 0) -> float:
    """Top-1 audio-to-video retrieval among the true frame plus distractors
    drawn from the same clip at least ``min_offset`` frames away."""
    T = f_lip.shape[0]
    if T < n_candidates - 1 + min_offset:
        raise DataError("clip too short for the requested candidate count")
    a = f_lip / f_lip.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    b = f_aud / f_aud.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    rng = step_rng(seed, 0, 77)
    hits = 0
    for t in range(T):
        cand = np.array([i for i in range(T) if abs(i - t) >= min_offset])
        neg = rng.choice(cand, size=n_candidates - 1, replace=False)
        pool = torch.cat([a[t:t + 1], a[neg]])
        sims = pool @ b[t]
        hits += int(torch.argmax(sims).item() == 0)
    return hits / T


def control_mse(readout_gen: np.ndarray, readout_target: np.ndarray) -> float:
    """Mean squared error between probe readouts of generated frames and
    the intended factor targets (normalized units)."""
    g = np.asarray(readout_gen, dtype=np.float64)
    t = np.asarray(readout_target, dtype=np.float64)
    if g.shape != t.shape:
        raise ConfigError(f"shape mismatch {g.shape} vs {t.shape}")
    return float(np.mean((g - t) ** 2))


# ---------------------------------------------------------------------------
# driving


@dataclass
class SlotFeatures:
    """Per-frame latent slots for the final generator. ``None`` means the
    canonical (zero) vector for that slot."""

    aud: Optional[torch.Tensor] = None
    eye: Optional[torch.Tensor] = None
    pose: Optional[torch.Tensor] = None
    exp: Optional[torch.Tensor] = None


class DrivenGenerator:
    """Inference-time driving wrapper around a trained pipeline.

    Expression features are extracted per frame; window averaging is a
    training-time regularizer only and is never applied here.
    """

    def __init__(self, model: PipelineModel):
        self.model = model
        self.dims = model.cfg.dims

    @torch.no_grad()
    def appearance(self, frame: np.ndarray) -> torch.Tensor:
        return self.model.e_app(frames_to_tensor(frame))

    @torch.no_grad()
    def slots_from_frames(self, frames: np.ndarray,
                          audio: Optional[np.ndarray] = None) -> SlotFeatures:
        """Extract all motion slots from driving frames (and audio if given)."""
        m = self.model
        f_mot = m.e_mot(frames_to_tensor(frames))
        slots = SlotFeatures(
            eye=m.e_eye(f_mot), pose=m.e_pose(f_mot), exp=m.e_exp(f_mot))
        if audio is not None:
            wins = np.stack([sw.audio_window(audio, t) for t in range(len(audio))])
            slots.aud = m.e_aud(torch.from_numpy(wins.astype(np.float32)))
        return slots

    @torch.no_grad()
    def generate(self, f_app: torch.Tensor, slots: SlotFeatures,
                 n_frames: Optional[int] = None) -> np.ndarray:
        present = [s for s in (slots.aud, slots.eye, slots.pose, slots.exp)
                   if s is not None]
        if n_frames is None:
            if not present:
                raise ConfigError("cannot infer frame count: all slots canonical")
            n_frames = present[0].shape[0]

        def slot(x, dim):
            return torch.zeros(n_frames, dim) if x is None else x[:n_frames]

        app = f_app.expand(n_frames, -1)
        out = self.model.generate(app,
                                  slot(slots.aud, self.dims["aud"]),
                                  slot(slots.eye, self.dims["eye"]),
                                  slot(slots.pose, self.dims["pose"]),
                                  slot(slots.exp, self.dims["exp"]))
        return tensor_to_frames(out)


# ---------------------------------------------------------------------------
# disentanglement matrix


def single_factor_tracks(row: str, motion_seed: int, spec: sw.DynamicsSpec) -> dict:
    """Factor tracks where only ``row`` moves; everything else canonical."""
    if row not in ROWS:
        raise ConfigError(f"unknown factor row {row!r}")
    full = sw.sample_factor_tracks(motion_seed, spec)
    L = spec.length
    tracks = {
        "lip": np.zeros(L),
        "pose": np.zeros((L, sw.POSE_DIM)),
        "gaze": np.zeros((L, sw.GAZE_DIM)),
        "blink": np.zeros(L),
        "expression": np.zeros((L, sw.EXPRESSION_DIM)),
    }
    key = "expression" if row == "exp" else row
    tracks[key] = full[key]
    return tracks


def tracks_to_factors(tracks: dict, identity_seed: int) -> List[sw.FactorVector]:
    app = sw.sample_appearance(identity_seed)
    L = len(tracks["lip"])
    return [sw.FactorVector(identity_seed=identity_seed, appearance_params=app,
                            lip_aperture=float(tracks["lip"][t]),
                            pose=tracks["pose"][t], gaze=tracks["gaze"][t],
                            blink=float(tracks["blink"][t]),
                            expression=tracks["expression"][t])
            for t in range(L)]


def oracle_generate(factors: List[sw.FactorVector]) -> np.ndarray:
    """Reference driver: renders the ground-truth factors directly."""
    return np.stack([sw.render_frame(f) for f in factors])


def model_single_factor_generate(driver: DrivenGenerator, row: str,
                                 factors: List[sw.FactorVector],
                                 f_app: torch.Tensor) -> np.ndarray:
    """Drive the generator with only the slot corresponding to ``row``
    active; all other slots are the canonical zero vector."""
    frames = np.stack([sw.render_frame(f) for f in factors])
    slots = SlotFeatures()
    if row == "lip":
        lip = np.array([f.lip_aperture for f in factors])
        audio = sw.synth_audio(lip, noise_seed=0)
        wins = np.stack([sw.audio_window(audio, t) for t in range(len(audio))])
        with torch.no_grad():
            slots.aud = driver.model.e_aud(torch.from_numpy(wins.astype(np.float32)))
    else:
        full = driver.slots_from_frames(frames)
        if row in ("blink", "gaze"):
            slots.eye = full.eye
        elif row == "pose":
            slots.pose = full.pose
        elif row == "exp":
            slots.exp = full.exp
    return driver.generate(f_app, slots, n_frames=len(factors))


def probe_readout(probe, frames: np.ndarray) -> np.ndarray:
    probe.require_frozen()
    with torch.no_grad():
        _, fac = probe(frames_to_tensor(frames))
    return fac.numpy()


def disentanglement_matrix(generate_fn: Callable[[str, List[sw.FactorVector]], np.ndarray],
                           probe, n_clips: int = 4, clip_length: int = 24,
                           seed: int = 0,
                           spec: Optional[sw.DynamicsSpec] = None) -> np.ndarray:
    """Activation-variance matrix over single-factor driving clips.

    Entry (i, j): average over clips driven only by factor i of the mean
    per-frame deviation of probe readout slot j from its clip mean. A
    well-disentangled generator concentrates variance on the diagonal.
    """
    # short expression segments so every clip crosses segment boundaries,
    # and a raised blink rate so blink clips contain actual blinks
    spec = spec or sw.DynamicsSpec(length=clip_length, blink_rate=0.12,
                                   exp_segment_min=4, exp_segment_max=7)
    mat = np.zeros((len(ROWS), len(ROWS)))
    for i, row in enumerate(ROWS):
        for n in range(n_clips):
            rng = step_rng(seed, i, 600 + n)
            motion_seed = int(rng.integers(0, 2 ** 31))
            identity = int(rng.integers(0, 2 ** 31))
            tracks = single_factor_tracks(row, motion_seed, spec)
            factors = tracks_to_factors(tracks, identity)
            frames = generate_fn(row, factors)
            fac = probe_readout(probe, frames)
            for j, col in enumerate(ROWS):
                sl = fac[:, READOUT_SLICES[col]]
                dev = np.linalg.norm(sl - sl.mean(axis=0, keepdims=True), axis=1)
                mat[i, j] += dev.mean()
    return mat / n_clips


def diag_dominance(mat: np.ndarray) -> float:
    """Smallest row-wise ratio of the diagonal to the largest off-diagonal."""
    ratios = []
    for i in range(mat.shape[0]):
        off = np.delete(mat[i], i)
        ratios.append(mat[i, i] / max(off.max(), 1e-12))
    return float(min(ratios))


# ---------------------------------------------------------------------------
# expression interpolation


@torch.no_grad()
def interpolate_expression(model: PipelineModel, app_frame: np.ndarray,
                           frame_a: np.ndarray, frame_b: np.ndarray,
                           n_steps: int = 7) -> np.ndarray:
    """Linear interpolation in expression latent space between two frames,
    with all other motion slots held canonical."""
    driver = DrivenGenerator(model)
    f_app = driver.appearance(app_frame)
    fm = model.e_mot(frames_to_tensor(np.stack([frame_a, frame_b])))
    fe = model.e_exp(fm)
    ws = torch.linspace(0, 1, n_steps).unsqueeze(1)
    exp = fe[0].unsqueeze(0) * (1 - ws) + fe[1].unsqueeze(0) * ws
    return driver.generate(f_app, SlotFeatures(exp=exp), n_frames=n_steps)


# ---------------------------------------------------------------------------
# protocols


@dataclass
class ProtocolSpec:
    name: str = "self_driving"       # or "cross_video"
    n_pairs: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.name not in ("self_driving", "cross_video"):
            raise ConfigError(f"unknown protocol {self.name!r}")
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be positive")


@dataclass
class MetricsReport:
    protocol: str
    metrics: Dict[str, float] = field(default_factory=dict)
    per_clip: List[Dict[str, float]] = field(default_factory=list)

    def to_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"protocol": self.protocol, "metrics": self.metrics,
                   "per_clip": self.per_clip}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        import csv
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = sorted({k for row in self.per_clip for k in row})
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["clip"] + keys)
            w.writeheader()
            for i, row in enumerate(self.per_clip):
                w.writerow({"clip": i, **row})


def run_protocol(model: PipelineModel, data: ClipData,
                 spec: ProtocolSpec) -> MetricsReport:
    """Drive the generator and score it against ground-truth frames.

    self_driving: appearance from frame 0 of a clip, motion and audio from
    the same clip. cross_video: appearance from one clip, motion and audio
    from a different clip (the driver clip is also the reference).
    """
    spec.validate()
    if spec.name == "cross_video" and len(data) < 2:
        raise DataError("cross_video needs at least two clips")
    driver = DrivenGenerator(model)
    report = MetricsReport(protocol=spec.name)
    rng = step_rng(spec.seed, 0, 90)
    for _ in range(spec.n_pairs):
        ci = int(rng.integers(0, len(data)))
        if spec.name == "self_driving":
            ca = ci
        else:
            ca = int(rng.integers(0, len(data)))
            while ca == ci:
                ca = int(rng.integers(0, len(data)))
        src, drv = data.clips[ca], data.clips[ci]
        f_app = driver.appearance(src.frames[0])
        slots = driver.slots_from_frames(drv.frames, drv.audio)
        gen = driver.generate(f_app, slots)
        gen_t = frames_to_tensor(gen)
        gt_t = frames_to_tensor(drv.frames)
        with torch.no_grad():
            f_lip = model.e_lip(model.e_mot(gen_t))
        entry = {
            "lmd": landmark_distance(model.probe, gen_t, gt_t),
            "lmd_m": landmark_distance(model.probe, gen_t, gt_t, mouth_only=True),
            "sync_conf": sync_confidence(f_lip, slots.aud),
        }
        report.per_clip.append(entry)
    for key in report.per_clip[0]:
        report.metrics[key] = float(np.mean([r[key] for r in report.per_clip]))
    return report


def fixed_expression_sync(model: PipelineModel, data: ClipData,
                          n_clips: int = 6, seed: int = 0) -> float:
    """Sync confidence when driving lips from audio while pinning the
    expression slot to a fixed value. A generator with lip/expression
    leakage degrades here, because the pinned expression fights the mouth."""
    driver = DrivenGenerator(model)
    rng = step_rng(seed, 0, 91)
    scores = []
    for _ in range(n_clips):
        ci = int(rng.integers(0, len(data)))
        clip = data.clips[ci]
        f_app = driver.appearance(clip.frames[0])
        slots = driver.slots_from_frames(clip.frames, clip.audio)
        t_fix = int(rng.integers(0, len(clip)))
        slots.exp = slots.exp[t_fix].unsqueeze(0).expand(len(clip), -1).contiguous()
        slots.eye = None
        slots.pose = None
        gen = driver.generate(f_app, slots)
        with torch.no_grad():
            f_lip = model.e_lip(model.e_mot(frames_to_tensor(gen)))
        scores.append(sync_confidence(f_lip, slots.aud))
    return float(np.mean(scores))
