"""Training-view construction: appearance-perturbing augmentation for the
motion branch, eye-region compositing triplets, audio-visual positive and
negative pairs, and augmented expression windows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DegeneratePairError
from . import synthworld as sw

DEFAULT_MIN_OFFSET = 5  # frames; negatives must be at least this far from t


@dataclass
class AugmentConfig:
    """Color-space augmentation strengths. All zeros means identity."""

    color_gain: float = 0.15     # per-channel multiplicative jitter
    brightness: float = 0.10
    contrast: float = 0.20
    noise_std: float = 0.02
    blur_prob: float = 0.3
    # geometric part, used only for expression-window augmentation
    rotation_deg: float = 10.0
    scale: float = 0.10

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(color_gain=0.0, brightness=0.0, contrast=0.0,
                   noise_std=0.0, blur_prob=0.0, rotation_deg=0.0, scale=0.0)


def motion_branch_augment(image: np.ndarray, rng: np.random.Generator,
                          cfg: Optional[AugmentConfig] = None) -> np.ndarray:
    """Appearance-perturbing, motion-preserving augmentation: color jitter,
    noise, optional box blur. Purely photometric, so ground-truth keypoints
    are untouched."""
    cfg = cfg or AugmentConfig()
    if (cfg.color_gain == cfg.brightness == cfg.contrast == cfg.noise_std == 0.0
            and cfg.blur_prob == 0.0):
        return image.copy()
    out = image.astype(np.float32, copy=True)
    gain = 1.0 + rng.uniform(-cfg.color_gain, cfg.color_gain, 3).astype(np.float32)
    out = out * gain
    out += np.float32(rng.uniform(-cfg.brightness, cfg.brightness))
    c = np.float32(1.0 + rng.uniform(-cfg.contrast, cfg.contrast))
    out = (out - 0.5) * c + 0.5
    if cfg.blur_prob > 0.0 and rng.uniform() < cfg.blur_prob:
        out = ndimage.uniform_filter(out, size=(2, 2, 1))
    if cfg.noise_std > 0.0:
        out += rng.normal(0.0, cfg.noise_std, out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def geometric_augment(image: np.ndarray, rng: np.random.Generator,
                      cfg: Optional[AugmentConfig] = None
                      ) -> Tuple[np.ndarray, Tuple[float, float]]:
    """Random in-plane rotation and scaling about the image center, followed
    by the photometric augmentation. Returns the image and the applied
    (rotation_rad, scale) so tests can undo it."""
    cfg = cfg or AugmentConfig()
    rot = float(np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)))
    scale = float(1.0 + rng.uniform(-cfg.scale, cfg.scale))
    out = image
    if rot != 0.0 or scale != 1.0:
        h, w = image.shape[:2]
        ctr = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        ca, sa = np.cos(rot), np.sin(rot)
        # output pixel -> input pixel: inverse of scale*R(rot), (row, col) order
        m = np.array([[ca, -sa], [sa, ca]]) / scale
        off = ctr - m @ ctr
        out = np.stack([
            ndimage.affine_transform(image[..., k], m, offset=off, order=1, mode="nearest")
            for k in range(image.shape[2])
        ], axis=2).astype(np.float32)
    out = motion_branch_augment(out, rng, cfg)
    return out, (rot, scale)


def transform_keypoints(kp: np.ndarray, rot: float, scale: float,
                        size: int = sw.IMAGE_SIZE) -> np.ndarray:
    """Apply the declared geometric augmentation to (col, row) keypoints."""
    ctr = (size - 1) / 2.0
    ca, sa = np.cos(rot), np.sin(rot)
    x = kp[..., 0] - ctr
    y = kp[..., 1] - ctr
    xr = scale * (ca * x - sa * y) + ctr
    yr = scale * (sa * x + ca * y) + ctr
    return np.stack([xr, yr], axis=-1)


# ---------------------------------------------------------------------------
# eye compositing


@dataclass
class EyeTriplet:
    v1: np.ndarray                 # eye donor frame
    v2: np.ndarray                 # base frame
    anchor: np.ndarray             # v2 with v1's warped eye region
    f1: sw.FactorVector
    f2: sw.FactorVector

    def anchor_factors(self) -> sw.FactorVector:
        """Ground-truth factors of the anchor: v2 everywhere except gaze and
        blink, which come from v1."""
        return self.f2.replaced(gaze=self.f1.gaze.copy(), blink=self.f1.blink)


def _fit_affine(dst_pts: np.ndarray, src_pts: np.ndarray) -> np.ndarray:
    """Least-squares 2x3 affine mapping dst (x, y) points onto src points."""
    n = dst_pts.shape[0]
    a = np.concatenate([dst_pts, np.ones((n, 1))], axis=1)
    sol, *_ = np.linalg.lstsq(a, src_pts, rcond=None)
    return sol.T  # (2, 3), rows are x and y equations


def composite_eyes(v1: np.ndarray, f1: sw.FactorVector,
                   v2: np.ndarray, f2: sw.FactorVector) -> EyeTriplet:
    """Build the anchor frame: v2 everywhere, v1's eye region warped into
    v2's pose inside v2's analytic eye mask."""
    size = v2.shape[0]
    anchor = v2.astype(np.float32, copy=True)
    xg, yg = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="xy")
    any_pixels = False
    for side in (-1, 1):
        poly2 = sw.eye_polygon(f2, side, size)
        poly1 = sw.eye_polygon(f1, side, size)
        span = poly2.max(axis=0) - poly2.min(axis=0)
        if min(span) < 1.0:
            raise DegeneratePairError("eye polygon collapsed under extreme pose")
        m = _fit_affine(poly2, poly1)
        mask = _one_eye_mask(f2, side, size)
        if not mask.any():
            continue
        any_pixels = True
        xs = m[0, 0] * xg + m[0, 1] * yg + m[0, 2]
        ys = m[1, 0] * xg + m[1, 1] * yg + m[1, 2]
        coords = np.stack([ys[mask], xs[mask]])
        for k in range(3):
            anchor[..., k][mask] = ndimage.map_coordinates(
                v1[..., k].astype(np.float64), coords, order=1, mode="nearest")
    if not any_pixels:
        raise DegeneratePairError("zero-area eye mask; skip this pair")
    return EyeTriplet(v1=v1, v2=v2, anchor=anchor, f1=f1, f2=f2)


def _one_eye_mask(f: sw.FactorVector, side: int, size: int) -> np.ndarray:
    g = sw._GEO
    xc, yc = sw._canonical_coords(f, size)
    q = ((xc - side * g["eye_cx"]) / g["eye_rx"]) ** 2 + \
        ((yc - g["eye_cy"]) / g["eye_ry"]) ** 2
    return q < 1.0


# ---------------------------------------------------------------------------
# audio-visual pairs


@dataclass
class AVPairBatch:
    """One positive pair plus K unsynchronized same-clip negatives, in both
    the audio-anchored and the video-anchored layout."""

    clip_id: str
    t: int
    anchor_audio: np.ndarray       # flattened audio window at t
    positive_frame: np.ndarray
    negative_frames: np.ndarray    # (K, H, W, 3)
    anchor_frame: np.ndarray
    positive_audio: np.ndarray
    negative_audio: np.ndarray     # (K, window)
    negative_indices: np.ndarray


def build_av_pairs(clip: sw.Clip, t: int, k: int,
                   rng: Optional[np.random.Generator] = None,
                   min_offset: int = DEFAULT_MIN_OFFSET) -> AVPairBatch:
    n = len(clip)
    if n < k + min_offset:
        raise DataError(
            f"clip '{clip.clip_id}' too short ({n}) for K={k} with min_offset={min_offset}")
    if not 0 <= t < n:
        raise DataError(f"frame index {t} out of range")
    candidates = np.array([i for i in range(n) if abs(i - t) >= min_offset])
    if len(candidates) < k:
        raise DataError(f"not enough unsynchronized frames around t={t}")
    if rng is None:
        neg_idx = candidates[:k]
    else:
        neg_idx = rng.choice(candidates, size=k, replace=False)
    neg_idx = np.sort(neg_idx)
    aud_t = sw.audio_window(clip.audio, t)
    return AVPairBatch(
        clip_id=clip.clip_id,
        t=t,
        anchor_audio=aud_t,
        positive_frame=clip.frames[t],
        negative_frames=clip.frames[neg_idx],
        anchor_frame=clip.frames[t],
        positive_audio=aud_t,
        negative_audio=np.stack([sw.audio_window(clip.audio, int(i)) for i in neg_idx]),
        negative_indices=neg_idx,
    )


# ---------------------------------------------------------------------------
# expression windows


def reflect_index(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * n - 2
    i = abs(i) % period
    return period - i if i >= n else i


def window_indices(center_t: int, k_win: int, n: int) -> List[int]:
    if k_win < 1 or k_win % 2 == 0:
        raise ConfigError("window size must be a positive odd integer")
    half = k_win // 2
    return [reflect_index(center_t + d, n) for d in range(-half, half + 1)]


def window_sample(clip: sw.Clip, center_t: int, k_win: int,
                  rng: Optional[np.random.Generator] = None,
                  cfg: Optional[AugmentConfig] = None) -> Tuple[np.ndarray, List[int]]:
    """K_win frames centered at center_t (edges reflected), each
    independently augmented with rotation/scale/color jitter."""
    idx = window_indices(center_t, k_win, len(clip))
    if rng is None or k_win == 0:
        frames = np.stack([clip.frames[i] for i in idx])
        return frames, idx
    frames = np.stack([geometric_augment(clip.frames[i], rng, cfg)[0] for i in idx])
    return frames, idx
