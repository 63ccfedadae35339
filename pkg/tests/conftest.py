import numpy as np
import pytest
import torch

from facefactors import synthworld as sw
from facefactors import train as tr
from facefactors.config import StageConfig
from facefactors.nets import NetConfig, PipelineModel


@pytest.fixture(scope="session")
def small_clips():
    spec = sw.DynamicsSpec(length=24)
    return [sw.generate_clip(i, 24, spec) for i in range(4)]


@pytest.fixture(scope="session")
def small_data(small_clips):
    return tr.ClipData(small_clips)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained pipeline with a quickly trained (coarse) frozen probe."""
    tr.set_global_determinism(0)
    model = PipelineModel(NetConfig(init_seed=0))
    tr.train_probe(model, StageConfig(stage="probe", steps=60, batch_size=16,
                                      seed=1, probe_pool=300))
    return model


def finite_diff_grad(fn, x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Central-difference gradient of scalar fn w.r.t. x (float64)."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    gf = g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom
