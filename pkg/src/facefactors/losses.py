"""Training objectives: motion reconstruction, audio-visual and eye
contrastive losses, pose regression, memory-bank feature decorrelation,
perceptual and motion-consistency losses, and the hinge adversarial pair.
"""
from __future__ import annotations

from typing import Iterable, List, Optional, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InsufficientSamplesError, NumericGuardError

_EPS = 1e-12
MIN_CORR_ROWS = 8


class _WarnCounter:
    def __init__(self):
        self.count = 0

    def bump(self, n: int = 1):
        self.count += n

    def reset(self):
        self.count = 0


#: incremented whenever a zero-variance column is mapped to 0 correlation
zero_variance_warnings = _WarnCounter()


def _guarded_norm(x: torch.Tensor, name: str) -> torch.Tensor:
    n = torch.linalg.vector_norm(x, dim=-1)
    if torch.any(n < 1e-8):
        raise NumericGuardError(f"zero-norm vector passed to {name}")
    return n


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = _guarded_norm(a, "cosine")
    nb = _guarded_norm(b, "cosine")
    return (a * b).sum(dim=-1) / (na * nb)


def infonce(anchor: torch.Tensor, positive: torch.Tensor,
            negatives: torch.Tensor) -> torch.Tensor:
    """Contrastive loss over raw cosine similarities (no temperature).

    anchor/positive: (D,) or (B, D); negatives: (K, D) or (B, K, D).
    """
    if anchor.dim() == 1:
        anchor, positive, negatives = anchor[None], positive[None], negatives[None]
    s_pos = cosine(anchor, positive)                        # (B,)
    s_neg = cosine(anchor[:, None, :], negatives)           # (B, K)
    logits = torch.cat([s_pos[:, None], s_neg], dim=1)
    return -torch.log_softmax(logits, dim=1)[:, 0].mean()


def eye_contrastive_loss(f1: torch.Tensor, f2: torch.Tensor,
                         f_a: torch.Tensor) -> torch.Tensor:
    """One positive (f1, f_a), one negative (f2, f_a)."""
    if f1.dim() == 1:
        f1, f2, f_a = f1[None], f2[None], f_a[None]
    return infonce(f_a, f1, f2[:, None, :])


def pose_loss(pose_pred: torch.Tensor, pose_gt: torch.Tensor) -> torch.Tensor:
    """Sum-of-absolute-differences over pose coordinates, mean over batch."""
    if pose_pred.dim() == 1:
        pose_pred, pose_gt = pose_pred[None], pose_gt[None]
    return (pose_pred - pose_gt).abs().sum(dim=-1).mean()


def motion_recon_loss(probe, i_out: torch.Tensor, i_gt: torch.Tensor) -> torch.Tensor:
    """L2 distance between probe keypoint features and probe factor readouts
    of the two images. Keypoints are normalized by image size so both terms
    live on comparable scales."""
    probe.require_frozen()
    kp_o, fac_o = probe(i_out)
    kp_g, fac_g = probe(i_gt)
    size = float(probe.image_size)
    kp_term = torch.linalg.vector_norm(
        (kp_o - kp_g).flatten(1) / size, dim=1).mean()
    fac_term = torch.linalg.vector_norm(fac_o - fac_g, dim=1).mean()
    return kp_term + fac_term


def window_average(exp_features: torch.Tensor) -> torch.Tensor:
    """Mean over the window axis: (K, D) -> (D,), (B, K, D) -> (B, D)."""
    return exp_features.mean(dim=-2)


class MemoryBank:
    """Fixed-capacity FIFO store of feature rows.

    Stored rows are detached constants; the most recently pushed batch is
    additionally kept with its autograd graph so correlation losses only
    back-propagate through it.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigError("memory bank capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._batches: List[torch.Tensor] = []   # detached, oldest first
        self._current: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return sum(b.shape[0] for b in self._batches)

    def push(self, rows: torch.Tensor) -> "MemoryBank":
        if rows.dim() != 2 or rows.shape[1] != self.dim:
            raise ConfigError(f"expected rows of shape (B, {self.dim})")
        rows = rows[-self.capacity:]
        self._batches.append(rows.detach().clone())
        self._current = rows
        overflow = len(self) - self.capacity
        while overflow > 0:
            head = self._batches[0]
            if head.shape[0] <= overflow:
                overflow -= head.shape[0]
                self._batches.pop(0)
            else:
                self._batches[0] = head[overflow:]
                overflow = 0
        return self

    def rows(self) -> torch.Tensor:
        """All stored rows, detached, oldest first."""
        if not self._batches:
            raise InsufficientSamplesError("memory bank is empty")
        return torch.cat(self._batches, dim=0)

    def rows_with_grad(self) -> torch.Tensor:
        """Stored rows with the latest batch swapped for its grad-carrying
        version."""
        if self._current is None:
            return self.rows()
        older = self._batches[:-1]
        tail = self._current[-self._batches[-1].shape[0]:]
        if older:
            return torch.cat([torch.cat(older, dim=0), tail], dim=0)
        return tail


def bank_push(bank: MemoryBank, rows: torch.Tensor) -> MemoryBank:
    return bank.push(rows)


def _standardize_columns(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    xc = x - x.mean(dim=0, keepdim=True)
    norm = torch.linalg.vector_norm(xc, dim=0)
    dead = norm < 1e-9
    n_dead = int(dead.sum())
    if n_dead:
        zero_variance_warnings.bump(n_dead)
        xc = torch.where(dead[None, :], torch.zeros_like(xc), xc)
        norm = torch.where(dead, torch.ones_like(norm), norm)
    return xc, norm


def _corr_from_rows(xe: torch.Tensor, xa: torch.Tensor) -> torch.Tensor:
    n = xe.shape[0]
    if xa.shape[0] != n:
        raise ConfigError("banks must hold the same number of rows")
    if n < MIN_CORR_ROWS:
        raise InsufficientSamplesError(
            f"need at least {MIN_CORR_ROWS} rows for correlation, got {n}")
    ec, en = _standardize_columns(xe)
    ac, an = _standardize_columns(xa)
    return (ec.T @ ac) / (en[:, None] * an[None, :])


def bank_correlation(bank_e: MemoryBank, bank_a: MemoryBank) -> torch.Tensor:
    """Pearson cross-correlation matrix (D_e, D_a) over the row axis.

    Gradient reaches only the current-batch rows of each bank.
    """
    return _corr_from_rows(bank_e.rows_with_grad(), bank_a.rows_with_grad())


def decorrelation_loss(bank_e: MemoryBank, bank_a: MemoryBank) -> torch.Tensor:
    """Mean squared entry of the full cross-correlation matrix; in [0, 1]."""
    return bank_correlation(bank_e, bank_a).pow(2).mean()


def correlation_matrix(rows_e: torch.Tensor, rows_a: torch.Tensor) -> torch.Tensor:
    """Direct Pearson cross-correlation of two row matrices (same rules as
    bank_correlation)."""
    return _corr_from_rows(rows_e, rows_a)


class PerceptualPyramid(nn.Module):
    """Fixed random-weight conv pyramid standing in for pretrained VGG
    features: L1 over four downsampled feature scales plus raw-pixel L1."""

    N_SCALES = 4

    def __init__(self, channels: int = 16, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        for i in range(self.N_SCALES):
            cin = 3 if i == 0 else channels
            w = torch.randn(channels, cin, 3, 3, generator=gen) * (1.0 / (3.0 * cin ** 0.5))
            self.register_buffer(f"w{i}", w)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        h = x
        for i in range(self.N_SCALES):
            w = getattr(self, f"w{i}")
            h = F.leaky_relu(F.conv2d(h, w, padding=1), 0.2)
            feats.append(h)
            h = F.avg_pool2d(h, 2)
        return feats

    def forward(self, i_out: torch.Tensor, i_gt: torch.Tensor) -> torch.Tensor:
        loss = (i_out - i_gt).abs().mean()
        for fo, fg in zip(self.features(i_out), self.features(i_gt)):
            loss = loss + (fo - fg).abs().mean()
        return loss


def perceptual_loss(pyramid: PerceptualPyramid, i_out, i_gt) -> torch.Tensor:
    return pyramid(i_out, i_gt)


def _check_frozen(module: nn.Module, name: str) -> None:
    if any(p.requires_grad for p in module.parameters()):
        raise ConfigError(f"{name} must be frozen inside the consistency loss")


def consistency_loss(model, i_out: torch.Tensor, i_gt: torch.Tensor,
                     audio_win: torch.Tensor) -> Tuple[torch.Tensor, dict]:
    """Motion-level consistency: audio-lip agreement of the synthesized
    frame, gaze/blink readout distance, and the motion reconstruction loss.
    Returns (total, per-term dict)."""
    model.probe.require_frozen()
    _check_frozen(model.e_mot, "motion encoder")
    _check_frozen(model.e_lip, "lip head")
    _check_frozen(model.e_aud, "audio encoder")
    f_lip = model.e_lip(model.e_mot(i_out))
    f_aud = model.e_aud(audio_win)
    lip_term = torch.exp(-cosine(f_lip, f_aud)).mean()
    _, fac_o = model.probe(i_out)
    _, fac_g = model.probe(i_gt)
    from .nets import P_GAZE, P_BLINK
    gaze_o = torch.cat([fac_o[:, P_GAZE], fac_o[:, P_BLINK]], dim=1)
    gaze_g = torch.cat([fac_g[:, P_GAZE], fac_g[:, P_BLINK]], dim=1)
    gaze_term = (gaze_o - gaze_g).abs().sum(dim=1).mean()
    mot_term = motion_recon_loss(model.probe, i_out, i_gt)
    parts = {"con_lip": lip_term, "con_gaze": gaze_term, "con_mot": mot_term}
    return lip_term + gaze_term + mot_term, parts


def adversarial_losses(disc, i_out: torch.Tensor, i_gt: torch.Tensor):
    """Hinge GAN losses plus discriminator feature matching.

    Returns (gen_loss, disc_loss, feature_match_loss). gen_loss may be
    negative; the other two are >= 0.
    """
    score_fake, feats_fake = disc(i_out)
    score_real, feats_real = disc(i_gt)
    disc_loss = (F.relu(1.0 - disc(i_gt.detach())[0]).mean()
                 + F.relu(1.0 + disc(i_out.detach())[0]).mean())
    gen_loss = -score_fake.mean()
    if feats_fake:
        fm = sum((ff - fr.detach()).abs().mean() for ff, fr in zip(feats_fake, feats_real))
        fm = fm / len(feats_fake)
    else:
        fm = torch.zeros((), dtype=i_out.dtype)
    return gen_loss, disc_loss, fm


class LossReport:
    """Named scalar losses with weights; total is exactly the weighted sum
    in insertion order."""

    def __init__(self):
        self._items = []  # (name, value tensor/float, weight)

    def add(self, name: str, value, weight: float = 1.0) -> None:
        self._items.append((name, value, float(weight)))

    def total(self):
        total = None
        for _, value, weight in self._items:
            term = weight * value
            total = term if total is None else total + term
        if total is None:
            raise ConfigError("empty loss report")
        return total

    def scalars(self) -> dict:
        out = {}
        for name, value, _ in self._items:
            out[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        out["total"] = float(self.total().detach()) if torch.is_tensor(self.total()) else float(self.total())
        return out

    def weights(self) -> dict:
        return {name: w for name, _, w in self._items}

    def check_finite(self) -> None:
        for name, value, _ in self._items:
            v = value.detach() if torch.is_tensor(value) else torch.tensor(value)
            if not torch.isfinite(v).all():
                raise NumericGuardError(f"loss term '{name}' is not finite")
