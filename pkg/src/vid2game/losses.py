"""Shared adversarial and feature-matching loss primitives.

Least-squares targets: real patches score 1, fake patches 0.  Expectations
are per-minibatch means; patch score maps are mean-reduced.  Feature
matching is an L1 distance per layer, normalized by that layer's element
count, summed over layers.
"""

from __future__ import annotations

import contextlib

import torch
from torch import nn


def lsgan_generator_term(fake_score: torch.Tensor) -> torch.Tensor:
    """Squared distance of fake patch scores to the real label 1."""
    return ((fake_score - 1.0) ** 2).mean()


def lsgan_discriminator_term(fake_score: torch.Tensor, real_score: torch.Tensor) -> torch.Tensor:
    """Half fake-to-0 plus half real-to-1 squared distances."""
    return 0.5 * (fake_score ** 2).mean() + 0.5 * ((real_score - 1.0) ** 2).mean()


def feature_matching_l1(real_features, fake_features) -> torch.Tensor:
    """Sum over layers of element-normalized L1 between activation stacks."""
    if len(real_features) != len(fake_features):
        raise ValueError("feature stacks differ in depth")
    total = fake_features[0].new_zeros(())
    for real, fake in zip(real_features, fake_features):
        total = total + (real - fake).abs().mean()
    return total


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradient flow into a module's parameters."""
    states = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, state in zip(module.parameters(), states):
            p.requires_grad_(state)


def check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"{name} diverged to a non-finite value")
