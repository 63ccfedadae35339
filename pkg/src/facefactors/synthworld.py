"""Procedural parametric face world.

Renders a 2D vector face at 64x64 with analytically known geometry: every
factor (lip aperture, head pose, gaze, blink, expression) maps to an exact
shape change, eye masks and keypoints are available in closed form, and
synthetic "audio" features are a fixed function of the lip trajectory only.
All outputs are pure functions of (seed, config).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    AudioRangeError,
    ConfigError,
    DatasetIntegrityError,
    DatasetVersionError,
    DataError,
    FactorRangeError,
)

WORLD_VERSION = "ffw-1"
IMAGE_SIZE = 64
AUDIO_DIM = 20
AUDIO_WINDOW = 5  # causal-ish window [t-2, t+2] feeding one audio frame
N_KEYPOINTS = 8
# keypoint order: L eye outer, L eye inner, R eye inner, R eye outer,
# mouth left corner, mouth right corner, mouth top, mouth bottom
MOUTH_KEYPOINTS = (4, 5, 6, 7)

APPEARANCE_DIM = 16
POSE_DIM = 4
GAZE_DIM = 2
EXPRESSION_DIM = 4
FACTOR_DIM = APPEARANCE_DIM + 1 + POSE_DIM + GAZE_DIM + 1 + EXPRESSION_DIM  # 28

# symmetric half-ranges of the pose vector (rotation rad, tx, ty, log-scale)
POSE_RANGE = np.array([0.35, 0.12, 0.12, 0.12], dtype=np.float64)

# canonical face geometry (coordinates in [-1, 1], y pointing down)
_GEO = {
    "head_rx": 0.74,
    "head_ry": 0.92,
    "eye_cx": 0.30,
    "eye_cy": -0.22,
    "eye_rx": 0.155,
    "eye_ry": 0.105,
    "iris_r": 0.068,
    "gaze_dx": 0.090,
    "gaze_dy": 0.042,
    "brow_cy": -0.46,
    "brow_len": 0.17,
    "brow_ry": 0.026,
    "brow_raise": 0.11,
    "brow_furrow": 0.18,
    "mouth_cy": 0.45,
    "mouth_rx": 0.27,
    "mouth_ry0": 0.05,
    "mouth_ry1": 0.13,
    "mouth_in0": 0.0,
    "mouth_in1": 0.115,
    "curl": 0.11,
    "cheek_cx": 0.40,
    "cheek_cy": 0.16,
    "cheek_r": 0.13,
    "edge": 0.030,
}


def render_config_hash() -> str:
    blob = json.dumps({"version": WORLD_VERSION, "size": IMAGE_SIZE, "geo": _GEO},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# factor vectors


@dataclass
class FactorVector:
    """Ground-truth latent factors of a single frame."""

    identity_seed: int
    appearance_params: np.ndarray  # (16,) in [-1, 1]
    lip_aperture: float            # [0, 1]
    pose: np.ndarray               # (4,) rotation rad, tx, ty, log-scale
    gaze: np.ndarray               # (2,) yaw, pitch offsets in [-1, 1]
    blink: float                   # [0, 1], 1 = closed
    expression: np.ndarray         # (4,) brow raise, furrow, corner curl, cheek

    def __post_init__(self):
        self.appearance_params = np.asarray(self.appearance_params, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.gaze = np.asarray(self.gaze, dtype=np.float64)
        self.expression = np.asarray(self.expression, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.appearance_params.shape != (APPEARANCE_DIM,):
            raise FactorRangeError("appearance_params must have dim 16")
        checks = [
            (np.all(np.abs(self.appearance_params) <= 1.0), "appearance_params"),
            (0.0 <= self.lip_aperture <= 1.0, "lip_aperture"),
            (self.pose.shape == (POSE_DIM,) and np.all(np.abs(self.pose) <= POSE_RANGE + 1e-12), "pose"),
            (self.gaze.shape == (GAZE_DIM,) and np.all(np.abs(self.gaze) <= 1.0), "gaze"),
            (0.0 <= self.blink <= 1.0, "blink"),
            (self.expression.shape == (EXPRESSION_DIM,) and np.all(np.abs(self.expression) <= 1.0), "expression"),
        ]
        for ok, name in checks:
            if not ok:
                raise FactorRangeError(f"factor '{name}' outside declared range")

    def to_array(self) -> np.ndarray:
        return np.concatenate([
            self.appearance_params,
            [self.lip_aperture],
            self.pose,
            self.gaze,
            [self.blink],
            self.expression,
        ]).astype(np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray, identity_seed: int) -> "FactorVector":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (FACTOR_DIM,):
            raise FactorRangeError(f"factor array must have dim {FACTOR_DIM}")
        i = APPEARANCE_DIM
        return cls(
            identity_seed=identity_seed,
            appearance_params=arr[:i],
            lip_aperture=float(arr[i]),
            pose=arr[i + 1:i + 5],
            gaze=arr[i + 5:i + 7],
            blink=float(arr[i + 7]),
            expression=arr[i + 8:i + 12],
        )

    def replaced(self, **kwargs) -> "FactorVector":
        d = dict(
            identity_seed=self.identity_seed,
            appearance_params=self.appearance_params.copy(),
            lip_aperture=self.lip_aperture,
            pose=self.pose.copy(),
            gaze=self.gaze.copy(),
            blink=self.blink,
            expression=self.expression.copy(),
        )
        d.update(kwargs)
        return FactorVector(**d)


def canonical_factors(identity_seed: int = 0,
                      appearance_params: Optional[np.ndarray] = None) -> FactorVector:
    """All motion factors at their canonical (zero) position."""
    if appearance_params is None:
        appearance_params = np.zeros(APPEARANCE_DIM)
    return FactorVector(
        identity_seed=identity_seed,
        appearance_params=appearance_params,
        lip_aperture=0.0,
        pose=np.zeros(POSE_DIM),
        gaze=np.zeros(GAZE_DIM),
        blink=0.0,
        expression=np.zeros(EXPRESSION_DIM),
    )


# ---------------------------------------------------------------------------
# rendering


def _smoothstep(alpha: np.ndarray) -> np.ndarray:
    a = np.clip(alpha, 0.0, 1.0)
    return a * a * (3.0 - 2.0 * a)


def _ellipse_alpha(x, y, cx, cy, rx, ry, edge):
    # compact support: alpha > 0 strictly inside the ellipse q < 1
    q = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
    return _smoothstep((1.0 - q) / edge)


def _rot_ellipse_alpha(x, y, cx, cy, rx, ry, ang, edge):
    ca, sa = np.cos(ang), np.sin(ang)
    xl = (x - cx) * ca + (y - cy) * sa
    yl = -(x - cx) * sa + (y - cy) * ca
    q = (xl / rx) ** 2 + (yl / ry) ** 2
    return _smoothstep((1.0 - q) / edge)


def _appearance_colors(a: np.ndarray) -> dict:
    def clip01(c):
        return np.clip(c, 0.03, 0.97)
    return {
        "skin": clip01(np.array([0.78, 0.62, 0.50]) + 0.16 * a[2:5]),
        "bg": clip01(np.array([0.13, 0.15, 0.19]) + 0.10 * a[5:8]),
        "lips": clip01(np.array([0.62, 0.26, 0.26]) + 0.14 * a[8:11]),
        "brow": clip01(np.array([0.16, 0.11, 0.08]) + 0.07 * a[11:14]),
        "sclera": np.array([0.94, 0.94, 0.92]),
        "iris": np.array([0.10, 0.08, 0.06]),
        "mouth_in": np.array([0.12, 0.05, 0.06]),
        "blush": np.array([0.88, 0.30, 0.30]),
        "shade": 0.06 * (1.0 + 0.5 * a[14]),
        "bg_tilt": 0.04 * a[15],
    }


def _pixel_grid(size: int):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c)  # x (cols), y (rows)


def _canonical_coords(f: FactorVector, size: int):
    """Map pixel coordinates back into the canonical face frame."""
    x, y = _pixel_grid(size)
    rot, tx, ty, logs = f.pose
    s = np.exp(logs)
    ca, sa = np.cos(rot), np.sin(rot)
    xs = (x - tx) / s
    ys = (y - ty) / s
    xc = ca * xs + sa * ys
    yc = -sa * xs + ca * ys
    return xc, yc


def render_frame(f: FactorVector, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render one frame as float32 (size, size, 3) in [0, 1]."""
    f.validate()
    g = _GEO
    col = _appearance_colors(f.appearance_params)
    xc, yc = _canonical_coords(f, size)
    edge = g["edge"]

    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = col["bg"]
    img += col["bg_tilt"] * yc[..., None]

    def paint(alpha, color):
        nonlocal img
        img = img * (1.0 - alpha[..., None]) + np.asarray(color) * alpha[..., None]

    a = f.appearance_params
    head_rx = g["head_rx"] + 0.04 * a[0]
    head_ry = g["head_ry"] + 0.04 * a[1]
    head = _ellipse_alpha(xc, yc, 0.0, 0.0, head_rx, head_ry, edge)
    skin_img = col["skin"][None, None, :] * (1.0 - col["shade"] * yc[..., None])
    img = img * (1.0 - head[..., None]) + skin_img * head[..., None]

    # cheeks (expression[3])
    cheek_int = 0.5 * (f.expression[3] + 1.0) * 0.85
    for sx in (-1.0, 1.0):
        ch = _ellipse_alpha(xc, yc, sx * g["cheek_cx"], g["cheek_cy"],
                            g["cheek_r"], g["cheek_r"], 1.0)
        paint(ch * cheek_int, col["blush"])

    # mouth: vertical bend by corner curl before evaluating the ellipses
    curl = f.expression[2]
    yb = yc + curl * g["curl"] * (xc / g["mouth_rx"]) ** 2
    ry_out = g["mouth_ry0"] + g["mouth_ry1"] * f.lip_aperture
    ry_in = g["mouth_in0"] + g["mouth_in1"] * f.lip_aperture
    paint(_ellipse_alpha(xc, yb, 0.0, g["mouth_cy"], g["mouth_rx"], ry_out, edge), col["lips"])
    if ry_in > 1e-6:
        paint(_ellipse_alpha(xc, yb, 0.0, g["mouth_cy"], 0.8 * g["mouth_rx"], ry_in, edge),
              col["mouth_in"])

    # brows (expression[0] raise, expression[1] furrow)
    brow_cy = g["brow_cy"] - g["brow_raise"] * f.expression[0]
    for sx in (-1.0, 1.0):
        ang = sx * g["brow_furrow"] * f.expression[1]
        paint(_rot_ellipse_alpha(xc, yc, sx * g["eye_cx"], brow_cy,
                                 g["brow_len"], g["brow_ry"], ang, edge), col["brow"])

    # eyes: sclera + iris + eyelid, all confined to the socket ellipses
    iris_dx = g["gaze_dx"] * f.gaze[0]
    iris_dy = g["gaze_dy"] * f.gaze[1]
    lid_y = -g["eye_ry"] + 2.0 * g["eye_ry"] * f.blink
    for sx in (-1.0, 1.0):
        ex = sx * g["eye_cx"]
        socket = _ellipse_alpha(xc, yc, ex, g["eye_cy"], g["eye_rx"], g["eye_ry"], edge)
        paint(socket, col["sclera"])
        iris = _ellipse_alpha(xc, yc, ex + iris_dx, g["eye_cy"] + iris_dy,
                              g["iris_r"], g["iris_r"], edge)
        paint(iris * socket, col["iris"])
        if f.blink > 1e-6:
            lid = _smoothstep((lid_y - (yc - g["eye_cy"])) / edge + 1.0)
            paint(lid * socket, col["skin"] * (1.0 - col["shade"] * g["eye_cy"]))

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _canonical_keypoints(f: FactorVector) -> np.ndarray:
    g = _GEO
    curl_dy = -f.expression[2] * g["curl"]
    ry_in = g["mouth_in0"] + g["mouth_in1"] * f.lip_aperture
    pts = np.array([
        [-(g["eye_cx"] + g["eye_rx"]), g["eye_cy"]],
        [-(g["eye_cx"] - g["eye_rx"]), g["eye_cy"]],
        [g["eye_cx"] - g["eye_rx"], g["eye_cy"]],
        [g["eye_cx"] + g["eye_rx"], g["eye_cy"]],
        [-g["mouth_rx"], g["mouth_cy"] + curl_dy],
        [g["mouth_rx"], g["mouth_cy"] + curl_dy],
        [0.0, g["mouth_cy"] - ry_in],
        [0.0, g["mouth_cy"] + ry_in],
    ])
    return pts


def keypoints(f: FactorVector, size: int = IMAGE_SIZE) -> np.ndarray:
    """Ground-truth keypoints in pixel coordinates, shape (8, 2) as (col, row)."""
    pts = _canonical_keypoints(f)
    rot, tx, ty, logs = f.pose
    s = np.exp(logs)
    ca, sa = np.cos(rot), np.sin(rot)
    x = s * (ca * pts[:, 0] - sa * pts[:, 1]) + tx
    y = s * (sa * pts[:, 0] + ca * pts[:, 1]) + ty
    px = (x + 1.0) * size / 2.0 - 0.5
    py = (y + 1.0) * size / 2.0 - 0.5
    return np.stack([px, py], axis=1)


def eye_region_mask(f: FactorVector, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean mask of the two eye-socket ellipses under f's pose.

    Covers the full support of anything gaze/blink can touch: all eye-layer
    alphas vanish outside q_socket < 1.
    """
    g = _GEO
    xc, yc = _canonical_coords(f, size)
    mask = np.zeros((size, size), dtype=bool)
    for sx in (-1.0, 1.0):
        q = ((xc - sx * g["eye_cx"]) / g["eye_rx"]) ** 2 + ((yc - g["eye_cy"]) / g["eye_ry"]) ** 2
        mask |= q < 1.0
    return mask


def eye_polygon(f: FactorVector, side: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Pixel-space anchor points of one eye socket (side -1 left, +1 right).

    Returns 5 points: left/right/top/bottom extremes plus the center, enough
    to fit an affine warp between two poses.
    """
    g = _GEO
    ex, ey = side * g["eye_cx"], g["eye_cy"]
    pts = np.array([
        [ex - g["eye_rx"], ey],
        [ex + g["eye_rx"], ey],
        [ex, ey - g["eye_ry"]],
        [ex, ey + g["eye_ry"]],
        [ex, ey],
    ])
    rot, tx, ty, logs = f.pose
    s = np.exp(logs)
    ca, sa = np.cos(rot), np.sin(rot)
    x = s * (ca * pts[:, 0] - sa * pts[:, 1]) + tx
    y = s * (sa * pts[:, 0] + ca * pts[:, 1]) + ty
    px = (x + 1.0) * size / 2.0 - 0.5
    py = (y + 1.0) * size / 2.0 - 0.5
    return np.stack([px, py], axis=1)


# ---------------------------------------------------------------------------
# factor dynamics


@dataclass
class DynamicsSpec:
    """Temporal statistics of the sampled factor streams.

    Expression is piecewise-constant over segments of >= exp_segment_min
    frames so it varies much slower than lip/pose; lip is the fastest stream.
    """

    length: int = 32
    lip_rate: float = 0.11        # cycles per frame; speech-like
    lip_components: int = 3
    pose_rate: float = 0.02
    pose_amp: float = 0.9         # fraction of POSE_RANGE actually used
    gaze_rate: float = 0.035
    blink_rate: float = 0.05      # blink events per frame
    blink_len: int = 4
    exp_segment_min: int = 16
    exp_segment_max: int = 32
    # declared per-step delta bounds (contract checked by tests)
    lip_max_step: float = 0.45
    pose_max_step: float = 0.18   # in normalized pose units
    gaze_max_step: float = 0.20

    def validate(self) -> None:
        if self.length < 1:
            raise ConfigError("length must be >= 1")
        if self.exp_segment_min < 1 or self.exp_segment_max < self.exp_segment_min:
            raise ConfigError("bad expression segment bounds")
        for name in ("lip_rate", "pose_rate", "gaze_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.pose_amp <= 1.0:
            raise ConfigError("pose_amp must be in (0, 1]")
        if self.blink_rate < 0 or self.blink_len < 1:
            raise ConfigError("bad blink settings")


def _sine_mix(rng: np.random.Generator, length: int, rate: float, ncomp: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    amps = rng.uniform(0.4, 1.0, ncomp)
    freqs = rate * rng.uniform(0.5, 1.5, ncomp)
    phases = rng.uniform(0, 2 * np.pi, ncomp)
    x = sum(a * np.sin(2 * np.pi * fq * t + ph) for a, fq, ph in zip(amps, freqs, phases))
    return x / amps.sum()


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def sample_factor_tracks(rng_seed: int, spec: DynamicsSpec) -> dict:
    """Sample independent per-factor trajectories; returns a dict of arrays."""
    spec.validate()
    L = spec.length
    lip = 0.5 + 0.5 * _sine_mix(_stream_rng(rng_seed, 1), L, spec.lip_rate, spec.lip_components)
    pose = np.stack([
        _sine_mix(_stream_rng(rng_seed, 2 + d), L, spec.pose_rate, 2) * POSE_RANGE[d] * spec.pose_amp
        for d in range(POSE_DIM)
    ], axis=1)
    gaze = np.stack([
        _sine_mix(_stream_rng(rng_seed, 6 + d), L, spec.gaze_rate, 2)
        for d in range(GAZE_DIM)
    ], axis=1)

    blink = np.zeros(L)
    brng = _stream_rng(rng_seed, 8)
    t = 0
    while t < L:
        if brng.uniform() < spec.blink_rate:
            amp = brng.uniform(0.6, 1.0)
            half = max(1, spec.blink_len // 2)
            for k in range(2 * half + 1):
                idx = t + k
                if idx < L:
                    blink[idx] = max(blink[idx], amp * (1.0 - abs(k - half) / half))
            t += 2 * half + 1
        else:
            t += 1
    blink = np.clip(blink, 0.0, 1.0)

    erng = _stream_rng(rng_seed, 9)
    exp = np.zeros((L, EXPRESSION_DIM))
    t = 0
    while t < L:
        seg = int(erng.integers(spec.exp_segment_min, spec.exp_segment_max + 1))
        exp[t:t + seg] = erng.uniform(-1.0, 1.0, EXPRESSION_DIM)
        t += seg
    return {"lip": lip, "pose": pose, "gaze": gaze, "blink": blink, "expression": exp}


def sample_factors(rng_seed: int, spec: DynamicsSpec,
                   identity_seed: int = 0,
                   appearance_params: Optional[np.ndarray] = None) -> List[FactorVector]:
    tracks = sample_factor_tracks(rng_seed, spec)
    if appearance_params is None:
        appearance_params = sample_appearance(identity_seed)
    out = []
    for t in range(spec.length):
        fv = FactorVector(
            identity_seed=identity_seed,
            appearance_params=appearance_params,
            lip_aperture=float(tracks["lip"][t]),
            pose=tracks["pose"][t],
            gaze=tracks["gaze"][t],
            blink=float(tracks["blink"][t]),
            expression=tracks["expression"][t],
        )
        fv.validate()
        out.append(fv)
    return out


def sample_appearance(identity_seed: int) -> np.ndarray:
    rng = _stream_rng(identity_seed, 101)
    return rng.uniform(-1.0, 1.0, APPEARANCE_DIM)


# ---------------------------------------------------------------------------
# audio

_AUD_RNG = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0xA5D10)))
_AUD_W = _AUD_RNG.normal(0.0, 0.7, (AUDIO_DIM, AUDIO_WINDOW))
_AUD_B = _AUD_RNG.uniform(-0.3, 0.3, AUDIO_DIM)
AUDIO_NOISE = 0.01


def synth_audio(lip_trajectory: Sequence[float], noise_seed: int = 0) -> np.ndarray:
    """Fixed nonlinear embedding of the lip window [t-2, t+2] plus seeded noise.

    Carries no information about any factor other than lip aperture.
    """
    lip = np.asarray(lip_trajectory, dtype=np.float64)
    if lip.ndim != 1:
        raise AudioRangeError("lip trajectory must be 1-D")
    if np.any(lip < 0.0) or np.any(lip > 1.0):
        raise AudioRangeError("lip values must lie in [0, 1]")
    padded = np.pad(lip, (AUDIO_WINDOW // 2, AUDIO_WINDOW // 2), mode="edge")
    windows = np.stack([padded[t:t + AUDIO_WINDOW] for t in range(len(lip))])
    feats = np.tanh(windows @ _AUD_W.T + _AUD_B)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([noise_seed, 0xAA])))
    feats = feats + AUDIO_NOISE * rng.standard_normal(feats.shape)
    return feats.astype(np.float32)


def audio_window(audio: np.ndarray, t: int) -> np.ndarray:
    """5-frame causal window of audio features ending at t, edge padded."""
    idx = np.clip(np.arange(t - AUDIO_WINDOW + 1, t + 1), 0, len(audio) - 1)
    return audio[idx].reshape(-1)


# ---------------------------------------------------------------------------
# clips and datasets


@dataclass
class Clip:
    frames: np.ndarray            # (T, H, W, 3) float32 in [0, 1]
    audio: np.ndarray             # (T, 20) float32
    factors: List[FactorVector]
    fps: int
    clip_id: str

    def __post_init__(self):
        if not (len(self.frames) == len(self.audio) == len(self.factors)):
            raise DataError(f"clip '{self.clip_id}': frame/audio/factor lengths differ")
        if self.fps <= 0:
            raise DataError("fps must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def identity_seed(self) -> int:
        return self.factors[0].identity_seed

    def factor_array(self) -> np.ndarray:
        return np.stack([f.to_array() for f in self.factors]).astype(np.float32)

    def keypoint_array(self) -> np.ndarray:
        return np.stack([keypoints(f) for f in self.factors]).astype(np.float32)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round-trips are bit exact."""
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_clip(identity_seed: int, length: int, spec: DynamicsSpec,
                  motion_seed: Optional[int] = None,
                  clip_id: Optional[str] = None) -> Clip:
    if motion_seed is None:
        motion_seed = identity_seed * 1000003 + length
    spec = DynamicsSpec(**{**asdict(spec), "length": length})
    factors = sample_factors(motion_seed, spec, identity_seed=identity_seed)
    frames = np.stack([quantize(render_frame(f)) for f in factors])
    lip = np.array([f.lip_aperture for f in factors])
    audio = synth_audio(lip, noise_seed=motion_seed + 1)
    if clip_id is None:
        clip_id = f"id{identity_seed:05d}_m{motion_seed}"
    return Clip(frames=frames, audio=audio, factors=factors, fps=25, clip_id=clip_id)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(clips: Sequence[Clip], path: os.PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for clip in clips:
        cdir = root / clip.clip_id
        fdir = cdir / "frames"
        fdir.mkdir(parents=True, exist_ok=True)
        files = {}
        for t, frame in enumerate(clip.frames):
            p = fdir / f"{t:04d}.png"
            Image.fromarray(np.round(frame * 255.0).astype(np.uint8)).save(p, optimize=False)
            files[f"frames/{t:04d}.png"] = _sha256(p)
        np.save(cdir / "audio.npy", clip.audio.astype(np.float32))
        np.save(cdir / "factors.npy", clip.factor_array())
        np.save(cdir / "keypoints.npy", clip.keypoint_array())
        for name in ("audio.npy", "factors.npy", "keypoints.npy"):
            files[name] = _sha256(cdir / name)
        index.append({
            "clip_id": clip.clip_id,
            "identity_seed": clip.identity_seed,
            "length": len(clip),
            "fps": clip.fps,
            "files": files,
        })
    manifest = {
        "world_version": WORLD_VERSION,
        "render_config_hash": render_config_hash(),
        "clips": index,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_dataset(path: os.PathLike) -> List[Clip]:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest at {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("world_version") != WORLD_VERSION:
        raise DatasetVersionError(
            f"dataset version {manifest.get('world_version')!r} != {WORLD_VERSION!r}")
    if manifest.get("render_config_hash") != render_config_hash():
        raise DatasetVersionError("render config hash mismatch")

    # verify integrity of everything before loading anything
    for entry in manifest["clips"]:
        cdir = root / entry["clip_id"]
        for rel, digest in entry["files"].items():
            p = cdir / rel
            if not p.exists():
                raise DatasetIntegrityError(f"clip '{entry['clip_id']}': missing file {rel}")
            if _sha256(p) != digest:
                raise DatasetIntegrityError(f"clip '{entry['clip_id']}': hash mismatch on {rel}")

    clips = []
    for entry in manifest["clips"]:
        cdir = root / entry["clip_id"]
        frames = np.stack([
            np.asarray(Image.open(cdir / f"frames/{t:04d}.png"), dtype=np.float32) / 255.0
            for t in range(entry["length"])
        ])
        audio = np.load(cdir / "audio.npy")
        farr = np.load(cdir / "factors.npy")
        factors = [FactorVector.from_array(farr[t].astype(np.float64), entry["identity_seed"])
                   for t in range(entry["length"])]
        clips.append(Clip(frames=frames, audio=audio, factors=factors,
                          fps=entry["fps"], clip_id=entry["clip_id"]))
    return clips


@dataclass
class WorldConfig:
    """Dataset generation settings for one split."""

    n_identities: int = 40
    clips_per_identity: int = 1
    clip_length: int = 48
    seed: int = 0
    dynamics: DynamicsSpec = field(default_factory=DynamicsSpec)

    def validate(self):
        if self.n_identities < 1 or self.clips_per_identity < 1 or self.clip_length < 1:
            raise ConfigError("dataset sizes must be positive")
        self.dynamics.validate()


def make_dataset(cfg: WorldConfig) -> List[Clip]:
    cfg.validate()
    clips = []
    for i in range(cfg.n_identities):
        identity = cfg.seed * 100000 + i
        for c in range(cfg.clips_per_identity):
            motion_seed = identity * 7919 + c * 13 + 1
            clips.append(generate_clip(identity, cfg.clip_length, cfg.dynamics,
                                       motion_seed=motion_seed))
    return clips
