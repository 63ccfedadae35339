"""All learned functions: encoders, fine-grained heads, generators,
discriminator, and the frozen factor probe that supplies keypoint/factor
readouts everywhere a pretrained prior would otherwise be used.

Image tensors are (B, 3, H, W) float32 in [0, 1].
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from . import synthworld as sw

# latent dimensions of the feature bundle
DIMS = {"app": 128, "mot": 64, "lip": 32, "aud": 32, "eye": 8, "pose": 4, "exp": 16}
AUDIO_IN = sw.AUDIO_DIM * sw.AUDIO_WINDOW  # flattened 5-frame audio window

# probe factor-readout layout (normalized units: pose scaled by POSE_RANGE)
PROBE_FACTOR_DIM = 12
P_POSE = slice(0, 4)
P_GAZE = slice(4, 6)
P_BLINK = slice(6, 7)
P_EXP = slice(7, 11)
P_LIP = slice(11, 12)


@dataclass
class NetConfig:
    image_size: int = sw.IMAGE_SIZE
    enc_base: int = 24
    dec_base: int = 24
    disc_base: int = 32
    head_hidden: int = 96
    probe_base: int = 32
    init_seed: int = 0
    dims: dict = field(default_factory=lambda: dict(DIMS))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class FeatureBundle:
    """Learned latent codes of one frame. Zero is the canonical value of
    every motion slot."""

    f_app: torch.Tensor
    f_mot: torch.Tensor
    f_lip: torch.Tensor
    f_aud: torch.Tensor
    f_eye: torch.Tensor
    pose: torch.Tensor
    f_exp: torch.Tensor


def slot_dims() -> dict:
    return dict(DIMS)


class ConvEncoder(nn.Module):
    """Small strided conv stack with adaptive pooling, so it accepts any
    input size >= 8 (gradient checks run at 8x8 and 16x16)."""

    def __init__(self, out_dim: int, base: int = 24, n_down: int = 4):
        super().__init__()
        chans = [3] + [min(base * (2 ** i), 4 * base) for i in range(n_down)]
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.GroupNorm(4, cout),
                nn.LeakyReLU(0.2),
            ]
        self.body = nn.Sequential(*blocks)
        # keep a 4x4 spatial grid before the trunk: a 1x1 global pool loses
        # the spatial detail the fine-grained heads need downstream
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.fc = nn.Sequential(
            nn.Linear(chans[-1] * 16, 256), nn.LeakyReLU(0.2),
            nn.Linear(256, out_dim),
        )

    def forward(self, x):
        h = self.pool(self.body(x)).flatten(1)
        return self.fc(h)


class MLPHead(nn.Module):
    """Fine-grained motion head over the unified motion feature."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 96):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class AudioEncoder(nn.Module):
    """Consumes a flattened 5-frame causal audio window."""

    def __init__(self, out_dim: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(AUDIO_IN, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class _FiLM(nn.Module):
    def __init__(self, latent_dim: int, ch: int):
        super().__init__()
        self.fc = nn.Linear(latent_dim, 2 * ch)

    def forward(self, h, z):
        gb = self.fc(z)[..., None, None]
        gamma, beta = gb.chunk(2, dim=1)
        return h * (1.0 + gamma) + beta


class Decoder(nn.Module):
    """Convolutional generator modulated per layer by the latent code."""

    def __init__(self, latent_dim: int, base: int = 24, out_size: int = 64):
        super().__init__()
        self.out_size = out_size
        n_up = int(np.log2(out_size // 4))
        chans = [min(base * (2 ** (n_up - i)), 8 * base) for i in range(n_up + 1)]
        self.fc = nn.Linear(latent_dim, chans[0] * 4 * 4)
        self.c0 = chans[0]
        self.blocks = nn.ModuleList()
        self.films = nn.ModuleList()
        self.norms = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.blocks.append(nn.Conv2d(cin, cout, 3, padding=1))
            self.norms.append(nn.GroupNorm(4, cout))
            self.films.append(_FiLM(latent_dim, cout))
        self.to_rgb = nn.Conv2d(chans[-1], 3, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, z):
        h = self.fc(z).view(-1, self.c0, 4, 4)
        for conv, norm, film in zip(self.blocks, self.norms, self.films):
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.act(film(norm(conv(h)), z))
        return torch.sigmoid(self.to_rgb(h))


class Discriminator(nn.Module):
    """4-layer patch scorer; returns the score map plus per-layer features
    for feature matching."""

    def __init__(self, base: int = 32):
        super().__init__()
        chans = [3, base, base * 2, base * 4]
        self.layers = nn.ModuleList([
            nn.Conv2d(cin, cout, 4, stride=2, padding=1)
            for cin, cout in zip(chans[:-1], chans[1:])
        ])
        self.score = nn.Conv2d(chans[-1], 1, 4, stride=1, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        feats = []
        h = x
        for layer in self.layers:
            h = self.act(layer(h))
            feats.append(h)
        return self.score(h), feats


class FactorProbe(nn.Module):
    """Supervised keypoint/factor regressor on synthetic frames.

    Trained once on ground truth before stage 1, then frozen forever. Its
    keypoint block plays the geometry-feature role and its factor block the
    semantic-readout role inside the motion reconstruction loss, and it
    replaces external gaze/pose/expression estimators in every metric.
    """

    def __init__(self, base: int = 32, image_size: int = sw.IMAGE_SIZE):
        super().__init__()
        self.image_size = image_size
        chans = [3, base, base * 2, base * 4]
        blocks = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                       nn.GroupNorm(4, cout), nn.LeakyReLU(0.2)]
        blocks += [nn.Conv2d(chans[-1], chans[-1], 3, padding=1),
                   nn.GroupNorm(4, chans[-1]), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*blocks)
        # keep a coarse spatial grid: gaze and blink live in small regions
        # that global pooling would wash out
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.trunk = nn.Sequential(nn.Linear(chans[-1] * 16, 256), nn.ReLU(),
                                   nn.Linear(256, 256), nn.ReLU())
        self.kp_head = nn.Linear(256, sw.N_KEYPOINTS * 2)
        self.factor_head = nn.Linear(256, PROBE_FACTOR_DIM)
        self.frozen = False

    def forward(self, x):
        h = self.trunk(self.pool(self.body(x)).flatten(1))
        kp = self.kp_head(h).view(-1, sw.N_KEYPOINTS, 2) * self.image_size
        return kp, self.factor_head(h)

    def freeze(self):
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def require_frozen(self):
        if not self.frozen:
            raise ConfigError("factor probe must be frozen before use in training or metrics")


def probe_targets(factors) -> np.ndarray:
    """Normalized factor-readout target for one FactorVector."""
    f = factors
    return np.concatenate([
        f.pose / sw.POSE_RANGE,
        f.gaze,
        [f.blink],
        f.expression,
        [f.lip_aperture],
    ]).astype(np.float32)


class PipelineModel(nn.Module):
    """Container for every network in the pipeline plus the frozen probe."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dims
        torch.manual_seed(cfg.init_seed)
        self.e_app = ConvEncoder(d["app"], base=cfg.enc_base)
        self.e_mot = ConvEncoder(d["mot"], base=cfg.enc_base)
        self.e_lip = MLPHead(d["mot"], d["lip"], hidden=cfg.head_hidden)
        self.e_eye = MLPHead(d["mot"], d["eye"], hidden=cfg.head_hidden)
        self.e_pose = MLPHead(d["mot"], d["pose"], hidden=cfg.head_hidden)
        self.e_exp = MLPHead(d["mot"], d["exp"], hidden=cfg.head_hidden)
        self.e_aud = AudioEncoder(d["aud"], hidden=128)
        self.g0 = Decoder(d["app"] + d["mot"], base=cfg.dec_base, out_size=cfg.image_size)
        gen_in = d["app"] + d["aud"] + d["eye"] + d["pose"] + d["exp"]
        self.g = Decoder(gen_in, base=cfg.dec_base, out_size=cfg.image_size)
        self.disc = Discriminator(base=cfg.disc_base)
        self.probe = FactorProbe(base=cfg.probe_base, image_size=cfg.image_size)

    def generate0(self, f_app, f_mot):
        return self.g0(torch.cat([f_app, f_mot], dim=1))

    def generate(self, f_app, f_aud, f_eye, pose, f_exp):
        """Final generator; the lip slot is driven by the audio feature."""
        return self.g(torch.cat([f_app, f_aud, f_eye, pose, f_exp], dim=1))

    def extract_bundle(self, frames, audio_windows) -> FeatureBundle:
        f_mot = self.e_mot(frames)
        return FeatureBundle(
            f_app=self.e_app(frames),
            f_mot=f_mot,
            f_lip=self.e_lip(f_mot),
            f_aud=self.e_aud(audio_windows),
            f_eye=self.e_eye(f_mot),
            pose=self.e_pose(f_mot),
            f_exp=self.e_exp(f_mot),
        )


def frames_to_tensor(frames: np.ndarray, device="cpu") -> torch.Tensor:
    """(T, H, W, 3) or (H, W, 3) float array -> (T, 3, H, W) tensor."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    arr = np.ascontiguousarray(np.moveaxis(frames, -1, 1))
    return torch.from_numpy(arr).to(device)


def tensor_to_frames(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach().cpu().numpy(), 1, -1)
