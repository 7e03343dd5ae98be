import numpy as np
import pytest
import torch

from sdrformer.attention3d import AttentionConfig
from sdrformer.drformer import DRFormerConfig
from sdrformer.siamese import SDRFormerConfig


def tiny_backbone(channels=(8, 16, 32), variant="gsa", grid=(2, 4, 4), **kw) -> DRFormerConfig:
    att = AttentionConfig(variant=variant, heads=1, grid=grid)
    return DRFormerConfig(list(channels), [1] * len(channels), [att] * len(channels), **kw)


def tiny_model_config(n_phases=3, num_classes=2, **kw) -> SDRFormerConfig:
    return SDRFormerConfig(tiny_backbone(), n_phases=n_phases, num_classes=num_classes, **kw)


def dual_inputs(batch=2, n_phases=3, dims=(2, 16, 16), seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    high = torch.randn(batch, n_phases, 1, *dims, generator=g, dtype=dtype)
    low = torch.nn.functional.avg_pool3d(high.flatten(0, 1), (1, 2, 2)).unflatten(0, (batch, n_phases))
    return high, low


def central_difference_error(fn, inputs, eps=1e-6, seed=0):
    """Relative error between autograd and central differences for sum(fn(*inputs) * R)."""
    inputs = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    g = torch.Generator().manual_seed(seed)
    weights = [torch.randn(o.shape, generator=g, dtype=torch.float64) for o in outs]

    def scalar(*xs):
        res = fn(*xs)
        res = res if isinstance(res, (tuple, list)) else (res,)
        return sum((r * w).sum() for r, w in zip(res, weights))

    analytic = torch.autograd.grad(scalar(*inputs), inputs)
    worst = 0.0
    with torch.no_grad():
        for i, x in enumerate(inputs):
            numeric = torch.zeros_like(x)
            flat, nflat = x.view(-1), numeric.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                plus = scalar(*inputs).item()
                flat[j] = orig - eps
                minus = scalar(*inputs).item()
                flat[j] = orig
                nflat[j] = (plus - minus) / (2 * eps)
            err = (analytic[i] - numeric).norm() / numeric.norm().clamp_min(1e-12)
            worst = max(worst, err.item())
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
