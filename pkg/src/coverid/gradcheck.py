"""Finite-difference suite over every differentiable op and the full mini-model loss.

All checks run in float64 with central differences (h = 1e-5) against a
random projection of the op output. Non-smooth ops draw inputs at least 0.1
away from their kinks. The full-model check cannot place thousands of hidden
units that far from zero, so it replays the base point's branch decisions
while perturbing (``freeze_kinks``) and thus stays on one smooth piece.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, RunningStats, Tensor, gradient_check, off_kink_sampler, uniform_sampler
from .model import ModelConfig, build_model, gem_pool_split
from .training import TrainConfig, total_loss, triplet_loss_batch_hard

TOLERANCE = 1e-6


def _separated_sampler(gap: float = 0.1):
    """Distinct values spaced by ``gap`` in random order, so max-pool never meets a tie."""

    def sample(rng, shape):
        n = int(np.prod(shape))
        return (rng.permutation(n) * gap).reshape(shape) - gap * n / 2

    return sample


def _leaky_relu_as_relu(x: Tensor) -> Tensor:
    """ReLU forward with a wrong backward (passes 10% of the gradient through negatives)."""
    mask = x.data > 0
    return ad._emit(np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.1 * g),))


def _model_check(seed: int, max_coords: int) -> GradCheckReport:
    cfg = ModelConfig.mini(num_classes=3)
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, p.data.shape)
        elif name.endswith(".beta"):
            p.data[...] = rng.uniform(-0.2, 0.2, p.data.shape)
        elif name == "classifier.weight":
            p.data[...] = rng.normal(0.0, 0.3, p.data.shape)
    labels = np.array([0, 0, 1, 1, 2, 2])
    tcfg = TrainConfig(loss_mode="joint_bnneck")
    names = list(model.params)
    x = rng.uniform(0.0, 1.0, (len(labels), 1, 84, 16))

    def loss(xt, *params):
        saved = dict(model.params)
        model.params.update(zip(names, params))
        try:
            return total_loss(model.forward(xt, training=True), labels, tcfg)[0]
        finally:
            model.params.update(saved)

    return gradient_check(
        loss,
        [],
        seed=seed,
        tolerance=TOLERANCE,
        inputs=[x] + [model.params[n].data for n in names],
        max_coords=max_coords,
        name="mini model loss",
        freeze_kinks=True,
    )


def run_suite(seed: int = 0, inject_broken: bool = False, model_coords: int = 3) -> list[GradCheckReport]:
    """Run every check; returns one report per op."""
    u = uniform_sampler
    fresh = lambda c: RunningStats.fresh(c, np.float64)  # noqa: E731
    labels = np.array([0, 3, 1, 1, 4])
    tri_labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    checks = [
        ("conv2d", lambda x, w: ad.conv2d(x, w, stride=(2, 1), padding=1), [(2, 3, 7, 6), (4, 3, 3, 3)], None),
        ("conv2d 1x1", lambda x, w: ad.conv2d(x, w, stride=2), [(2, 3, 5, 5), (4, 3, 1, 1)], None),
        (
            "batch_norm2d",
            lambda x, g, b: ad.batch_norm2d(x, g, b, fresh(3), training=True),
            [(4, 3, 3, 3), (3,), (3,)],
            [u(), u(0.5, 1.5), u()],
        ),
        (
            "batch_norm1d",
            lambda x, g, b: ad.batch_norm1d(x, g, b, fresh(5), training=True),
            [(6, 5), (5,), (5,)],
            [u(), u(0.5, 1.5), u()],
        ),
        (
            "instance_norm2d",
            ad.instance_norm2d,
            [(2, 3, 4, 5), (3,), (3,)],
            [u(), u(0.5, 1.5), u()],
        ),
        ("relu", ad.relu, [(3, 4, 5)], off_kink_sampler(0.1)),
        ("max_pool2d", lambda x: ad.max_pool2d(x, 3, 2, 1), [(2, 2, 7, 6)], _separated_sampler(0.1)),
        ("linear", ad.linear, [(5, 4), (3, 4), (3,)], None),
        ("softmax_cross_entropy", lambda z: ad.softmax_cross_entropy(z, labels), [(5, 6)], u(-3, 3)),
        ("gem (x, p)", lambda x, p: ad.gem(x, p), [(2, 3, 4, 5), (1,)], [u(0.1, 2.0), u(1.5, 3.0)]),
        (
            "gem split (x, p_t, p_f)",
            gem_pool_split,
            [(2, 3, 4, 5), (1,), (1,)],
            [u(0.1, 2.0), u(1.5, 3.0), u(1.5, 3.0)],
        ),
        ("triplet batch-hard", lambda f: triplet_loss_batch_hard(f, tri_labels, 0.3), [(8, 5)], None),
    ]
    if inject_broken:
        checks.append(("relu (deliberately broken)", _leaky_relu_as_relu, [(3, 4, 5)], off_kink_sampler(0.1)))

    reports = [
        gradient_check(fn, shapes, seed=seed, tolerance=TOLERANCE, sampler=sampler, name=name)
        for name, fn, shapes, sampler in checks
    ]
    reports.append(_model_check(seed, model_coords))
    return reports
