"""File to configure pytest, e.g. to implement hooks and shared fixtures.

See also: https://stackoverflow.com/q/34466027/11477374
List of hooks: https://pytest.org/en/latest/reference.html#hook-reference
"""

from collections.abc import Callable
from contextlib import nullcontext
from typing import Any

import pytest
import torch
from torch import nn
from torch.autograd import gradcheck
from torch.func import functional_call

from fuseg3d.core import ModelConfig, MsifConfig
from fuseg3d.data import Case, cases_from_phantoms
from fuseg3d.phantoms import PhantomSpec, generate_cohort
from fuseg3d.preprocess import PreprocessConfig
from fuseg3d.training import TrainConfig


def pytest_make_parametrize_id(config, val, argname):
    """Provide IDs aka names for test cases.

    pytest generates automatic IDs. Using this function, they can be altered to
    whatever more legible representation, see
    https://doc.pytest.org/en/latest/example/parametrize.html#different-options-for-test-ids.

    Implementing this function in a specific file using a specific name will hook it
    into pytest and use it for *all* ID generation automatically, so no need to specify
    `ids=<func>` all the time.
    Demo: https://raphael.codes/blog/ids-for-pytest-fixtures-and-parametrize/
    """
    if isinstance(val, nullcontext):
        return "NoError"
    elif hasattr(val, "expected_exception"):
        # Get which exception was passed in pytest.raises(<Exception>):
        return str(val.expected_exception)
    else:
        # See if object has __str__ implemented
        try:
            return str(val)
        except Exception:  # https://stackoverflow.com/q/38974889/11477374
            pass


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield


@pytest.fixture
def toy_config() -> ModelConfig:
    """Smallest model that still exercises every window, shift and fusion path."""
    return ModelConfig(
        patch_size=2,
        embed_dim=8,
        num_heads=2,
        depths=(1, 1, 1, 1),
        window_size=2,
        fusion_kernels=(1, 3),
        conv_stem_channels=4,
        mlp_ratio=2.0,
        msif=MsifConfig(cross_attention_depth=2, reduction_ratio=2, spatial_kernel=3),
    )


@pytest.fixture
def phantom_spec() -> PhantomSpec:
    return PhantomSpec(
        shape=(16, 16, 16),
        spacing_mm=(4.0, 4.0, 3.0),
        num_lesions=1,
        semi_axes_range=(2.0, 4.0),
        noise_sigma=0.05,
        seed=0,
    )


@pytest.fixture
def toy_geometry() -> PreprocessConfig:
    return PreprocessConfig(target_inplane=16, crop_inplane=16)


@pytest.fixture
def toy_cases(phantom_spec: PhantomSpec, toy_geometry: PreprocessConfig) -> list[Case]:
    return cases_from_phantoms(generate_cohort(phantom_spec, 3), toy_geometry)


@pytest.fixture
def toy_train_config() -> TrainConfig:
    return TrainConfig(window_depth=16, max_steps=4, eval_every=2, lr=1e-2)


def _check_parameter_gradients(
    module: nn.Module,
    *inputs: Any,
    output: Callable[[Any], torch.Tensor] = lambda out: out,
    jitter: float = 0.01,
) -> bool:
    """Finite-difference check of the gradients w.r.t. all parameters of a double module.

    Parameters are flattened into one vector and jittered off their initialization, whose
    zero biases put single-voxel activations on a ReLU kink.
    """
    names = [name for name, _ in module.named_parameters()]
    shapes = [p.shape for _, p in module.named_parameters()]
    with torch.no_grad():
        flat = torch.cat([p.reshape(-1) for p in module.parameters()])
        flat = flat + jitter * torch.randn_like(flat)
    flat.requires_grad_(True)

    def forward(vector: torch.Tensor) -> torch.Tensor:
        chunks = torch.split(vector, [s.numel() for s in shapes])
        weights = {name: chunk.view(shape) for name, chunk, shape in zip(names, chunks, shapes)}
        return output(functional_call(module, weights, inputs))

    return gradcheck(forward, (flat,), eps=1e-6, atol=1e-5, rtol=1e-3, fast_mode=True)


@pytest.fixture
def parameter_gradcheck() -> Callable[..., bool]:
    return _check_parameter_gradients
