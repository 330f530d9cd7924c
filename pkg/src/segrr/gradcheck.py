"""Finite-difference gradient-check suites for layers, blocks, and the
tiny end-to-end network. Shared by the CLI and the test suite.

Every unit is checked at a random (seeded) point in float64 with central
differences, step 1e-3, against the tolerance 1e-4.
"""

import numpy as np

from . import layers
from .blocks import BLOCK_KINDS, BlockConfig, RecalibrationBlock
from .network import NetworkConfig, build_network
from .tensor import Tensor, finite_diff_check
from .train import cross_entropy_loss, soft_dice_loss

TOLERANCE = 1e-4
STEP = 1e-3


def _rand(rng, shape):
    return Tensor(rng.standard_normal(shape).astype(np.float64))


def _mean(t):
    return t.mean()


def layer_suite(seed=0):
    """(name, max_relative_error) for every layer operation."""
    rng = np.random.default_rng(seed)
    results = []

    for k, d in [(1, 1), (3, 1), (3, 2), (3, 3)]:
        x = _rand(rng, (2, 3, 8, 8))
        w = Tensor(rng.standard_normal((4, 3, k, k)) * 0.5)
        b = Tensor(rng.standard_normal(4) * 0.1)
        results.append((f"conv2d_k{k}_d{d}_input",
                        finite_diff_check(lambda t: _mean(layers.conv2d(t, w, b, dilation=d)), x, STEP)))
        results.append((f"conv2d_k{k}_d{d}_weight",
                        finite_diff_check(lambda t: _mean(layers.conv2d(x, t, b, dilation=d)), w, STEP)))

    x = _rand(rng, (2, 3, 8, 8))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    results.append(("conv2d_stride2_input",
                    finite_diff_check(lambda t: _mean(layers.conv2d(t, w, None, stride=2, padding="same")), x, STEP)))

    x = _rand(rng, (2, 3, 4, 4))
    wt = Tensor(rng.standard_normal((3, 5, 3, 3)) * 0.5)
    bt = Tensor(rng.standard_normal(5) * 0.1)
    results.append(("conv_transpose_input",
                    finite_diff_check(lambda t: _mean(layers.conv_transpose2d(t, wt, bt)), x, STEP)))
    results.append(("conv_transpose_weight",
                    finite_diff_check(lambda t: _mean(layers.conv_transpose2d(x, t, bt)), wt, STEP)))

    x = _rand(rng, (2, 3, 8, 8))
    results.append(("max_pool2", finite_diff_check(lambda t: _mean(layers.max_pool2(t)), x, STEP)))
    results.append(("avg_pool_p2", finite_diff_check(lambda t: _mean(layers.avg_pool(t, 2).square()), x, STEP)))
    results.append(("avg_pool_p4", finite_diff_check(lambda t: _mean(layers.avg_pool(t, 4).square()), x, STEP)))
    results.append(("global_avg_pool",
                    finite_diff_check(lambda t: _mean(layers.global_avg_pool(t).square()), x, STEP)))
    results.append(("upsample_nn",
                    finite_diff_check(lambda t: _mean(layers.upsample_nn(t).square()), x, STEP)))
    results.append(("broadcast",
                    finite_diff_check(lambda t: _mean(t.broadcast_to((2, 3, 8, 8)).square()),
                                      _rand(rng, (2, 3, 1, 1)), STEP)))

    # keep activations away from the ReLU kink
    xa = Tensor(rng.uniform(0.2, 2.0, (2, 3, 6, 6)) * rng.choice([-1.0, 1.0], (2, 3, 6, 6)))
    results.append(("relu", finite_diff_check(lambda t: _mean(t.relu().square()), xa, STEP)))
    results.append(("sigmoid", finite_diff_check(lambda t: _mean(t.sigmoid().square()), xa, STEP)))
    results.append(("softmax_channel",
                    finite_diff_check(lambda t: _mean(layers.softmax_channel(t).square()), xa, STEP)))

    def bn_train(t):
        bn = layers.BatchNorm2d(3)
        bn.to_dtype(np.float64)
        bn.scale.data = scale64.copy()
        bn.shift.data = shift64.copy()
        return _mean(bn(t).square())

    scale64 = rng.uniform(0.5, 1.5, 3)
    shift64 = rng.standard_normal(3) * 0.3
    results.append(("batch_norm_train", finite_diff_check(bn_train, _rand(rng, (4, 3, 6, 6)), STEP)))

    bn_eval = layers.BatchNorm2d(3)
    bn_eval.to_dtype(np.float64)
    bn_eval._set_buffer("running_mean", rng.standard_normal(3))
    bn_eval._set_buffer("running_var", rng.uniform(0.5, 2.0, 3))
    bn_eval.eval()
    results.append(("batch_norm_eval",
                    finite_diff_check(lambda t: _mean(bn_eval(t).square()), _rand(rng, (2, 3, 6, 6)), STEP)))

    def dropout_train(t):
        drop = layers.SpatialDropout(0.3)
        return _mean(drop(t, rng=np.random.default_rng(7)).square())

    results.append(("spatial_dropout_train", finite_diff_check(dropout_train, _rand(rng, (2, 4, 6, 6)), STEP)))

    labels = rng.integers(0, 3, size=(2, 6, 6))
    def ce(t):
        return cross_entropy_loss(layers.softmax_channel(t), labels)
    def dl(t):
        return soft_dice_loss(layers.softmax_channel(t), labels)
    xl = _rand(rng, (2, 3, 6, 6))
    results.append(("cross_entropy_loss", finite_diff_check(ce, xl, STEP)))
    results.append(("soft_dice_loss", finite_diff_check(dl, xl, STEP)))
    return results


def block_suite(seed=0):
    """Every recalibration block kind, end to end, training mode (N=2)."""
    results = []
    for kind in BLOCK_KINDS:
        if kind == "none":
            continue
        rng = np.random.default_rng(seed + 1)
        cfg = BlockConfig(kind=kind, m=2, r=4, d=2, p=2)
        block = RecalibrationBlock(4, cfg, rng)
        block.to_dtype(np.float64)
        block.train()
        x = Tensor(np.random.default_rng(seed).standard_normal((2, 4, 6, 6)))
        results.append((f"block_{kind}",
                        finite_diff_check(lambda t: block(t).square().mean(), x, STEP)))
    return results


def network_suite(seed=0):
    """Tiny end-to-end network on a (1, 2, 16, 16) input, inference mode."""
    cfg = NetworkConfig(in_channels=2, num_classes=3, base_width=4, scales=3,
                        block=BlockConfig(kind="rr_segse", m=2, r=4))
    net = build_network(cfg, seed=seed)
    net.to_dtype(np.float64)
    net.eval()
    x = Tensor(np.random.default_rng(seed).standard_normal((1, 2, 16, 16)))
    # deep ReLU stacks always place a few preactivations within the
    # finite-difference step of a kink; those coordinates are excluded
    err = finite_diff_check(lambda t: net(t).square().mean(), x, STEP, skip_kinks=True)
    return [("network_tiny_rr_segse", err)]


SUITES = {"layer": layer_suite, "block": block_suite, "network": network_suite}


def run_suite(scope, seed=0):
    """Returns (results, all_passed)."""
    results = SUITES[scope](seed)
    return results, all(err < TOLERANCE for _, err in results)
