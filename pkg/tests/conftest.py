import numpy as np
import pytest
import torch

from blindvr.cfc import CFCConfig, FeatureCompletion
from blindvr.dac import CorruptionDetector, DACConfig
from blindvr.encoders import EncoderConfig
from blindvr.pipeline.config import OptimConfig, RunConfig, SimulationConfig
from blindvr.videodata import InMemoryDataset, make_synthetic_records


def tiny_encoder_config(**kw):
    base = dict(channels=(4, 8), token_dim=8, patch=4, max_grid=8, global_dim=8, global_size=8)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_dac_config(**kw):
    base = dict(encoder=tiny_encoder_config(), num_prompts=2, heads=2, decoder_depth=2)
    base.update(kw)
    return DACConfig(**base)


def tiny_cfc_config(**kw):
    base = dict(channels=(4, 8), foundation_channels=(4, 8), num_prompts=2, prompt_dim=4, adapt_dim=4,
                heads=2, global_encoder=tiny_encoder_config())
    base.update(kw)
    return CFCConfig(**base)


def tiny_run_config(seed=0, **kw):
    """32x32 clips and 4/8-channel models: a full stage runs in seconds."""
    base = dict(
        seed=seed, height=32, width=32,
        simulation=SimulationConfig(n_clips=2, length=8),
        dac=tiny_dac_config(), cfc=tiny_cfc_config(),
        dac_optim=OptimConfig(name="adamw", lr=1e-3, batch_clips=2, steps=4),
        cfc_optim=OptimConfig(name="adam", lr=1e-3, weight_decay=0.0, batch_clips=2, steps=4),
        recovery_warmup_steps=2, log_every=0,
    )
    base.update(kw)
    return RunConfig(**base)


def tiny_dataset(seed=0, n_clips=2):
    return InMemoryDataset(make_synthetic_records(seed, n_clips=n_clips, length=8, height=32, width=32))


@pytest.fixture
def tiny_detector():
    torch.manual_seed(0)
    return CorruptionDetector(tiny_dac_config()).double()


@pytest.fixture
def tiny_completion():
    torch.manual_seed(0)
    return FeatureCompletion(tiny_cfc_config()).double()


def finite_difference_check(loss_fn, params, steps=(1e-2, 1e-3, 1e-4, 1e-5), seed=0, directions=8):
    """Central differences against autograd, per parameter tensor.

    Each tensor's gradient is probed along ``directions`` random unit vectors
    (or along every coordinate for tensors that small). The error is
    ``|a - n| / max(|a|, |n|)`` over the vectors of analytic and numeric
    directional derivatives, so one direction nearly orthogonal to the
    gradient cannot dominate.

    Deep tensors of the tiny test models see gradients near 1e-10, where the
    best central-difference step is much larger than for the output layers.
    The error is therefore taken at the best step of ``steps``; a wrong
    gradient disagrees at every step. Derivatives that are zero by
    construction (e.g. key biases under softmax shift invariance) count as
    matching when both sides stay below the roundoff bound of the step.
    """
    gen = torch.Generator().manual_seed(seed)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    level = abs(loss.item())
    errors = {}
    for name, p in params:
        if p.numel() <= directions:
            probes = torch.eye(p.numel(), dtype=p.dtype).reshape(p.numel(), *p.shape)
        else:
            probes = torch.randn((directions, *p.shape), generator=gen, dtype=p.dtype)
            probes = probes / probes.flatten(1).norm(dim=1).reshape(-1, *[1] * p.dim())
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        analytic = torch.stack([(grad * v).sum() for v in probes])
        best = float("inf")
        for eps in steps:
            numeric = []
            for v in probes:
                with torch.no_grad():
                    p.add_(eps * v)
                    up = float(loss_fn())
                    p.sub_(2 * eps * v)
                    down = float(loss_fn())
                    p.add_(eps * v)
                numeric.append((up - down) / (2 * eps))
            numeric = torch.tensor(numeric, dtype=p.dtype)
            scale = max(float(analytic.norm()), float(numeric.norm()))
            if scale <= 1e3 * torch.finfo(p.dtype).eps * level / eps:
                best = 0.0
                break
            best = min(best, float((analytic - numeric).norm()) / scale)
            if best < 1e-7:
                break
        errors[name] = best
    return errors


def redraw_parameters(module, seed=0):
    """Move a freshly initialised module to a generic point: N(0, 1/fan_in).

    Default initialisation leaves residual experts near identity and makes
    some paths almost degenerate, which is a poor place for gradient checks.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            fan_in = p[0].numel() if p.dim() > 1 else 1
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / fan_in ** 0.5)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
