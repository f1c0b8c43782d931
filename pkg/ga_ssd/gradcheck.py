"""Central finite-difference gradient checks for every differentiable operation.

Each case builds a scalar loss from freshly drawn float64 inputs. The analytic
gradient from `backward()` is compared with (f(x + h) - f(x - h)) / 2h on a
sample of coordinates of every input; the reported error is the relative
norm of the difference.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .attention import GAConfig, build_ga_params, ga_forward, nonlocal_attention
from .backbone import build_block_params, resnext_block
from .boxes import MatchResult
from .loss import multibox_loss
from .params import BatchNormState, ParameterSet
from .tensor import Tensor, backward, no_grad


logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
MAX_COORDS = 24

Case = Tuple[Callable[[], Tensor], List[Tensor]]
CaseBuilder = Callable[[np.random.Generator], Case]


@dataclass
class GradCheckResult:
    name: str
    instance: int
    max_rel_error: float
    passed: bool


def _leaf(rng: np.random.Generator, *shape, away_from_zero: bool = False) -> Tensor:
    data = rng.normal(size=shape)
    if away_from_zero:
        data = np.where(np.abs(data) < 0.1, data + np.sign(data + 1e-12) * 0.2, data)
    return Tensor(data, requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(weights)))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: Optional[np.random.Generator] = None,
    h: float = STEP,
    max_coords: int = MAX_COORDS,
) -> float:
    """Largest relative error over `inputs` between backward() and central differences."""
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        # perturbations go through a flat view
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        with no_grad():
            for j, c in enumerate(coords):
                saved = flat[c]
                flat[c] = saved + h
                up = loss_fn().item()
                flat[c] = saved - h
                down = loss_fn().item()
                flat[c] = saved
                numeric[j] = (up - down) / (2 * h)
        a = analytic.reshape(-1)[coords]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst


# Cases

def _case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    w = rng.normal(size=(3, 4))
    return (lambda: _weighted_sum(ops.add(a, b), w)), [a, b]


def _case_mul(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return (lambda: ops.sum(ops.mul(a, b))), [a, b]


def _case_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return (lambda: _weighted_sum(ops.matmul(a, b), w)), [a, b]


def _case_reshape_permute(rng):
    x = _leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 2, 3))
    return (lambda: _weighted_sum(ops.permute(ops.reshape(x, (2, 3, 4)), (2, 0, 1)), w)), [x]


def _case_relu(rng):
    x = _leaf(rng, 4, 5, away_from_zero=True)
    w = rng.normal(size=(4, 5))
    return (lambda: _weighted_sum(ops.relu(x), w)), [x]


def _case_softmax(rng):
    x = _leaf(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    return (lambda: _weighted_sum(ops.softmax(x, axis=1), w)), [x]


def _case_batch_norm(rng):
    x = _leaf(rng, 2, 3, 2, 2, 2)
    gamma, beta = _leaf(rng, 3), _leaf(rng, 3)
    running = BatchNormState(mean=np.zeros(3), var=np.ones(3))
    w = rng.normal(size=x.shape)
    return (lambda: _weighted_sum(ops.batch_norm(x, gamma, beta, running, "train"), w)), [x, gamma, beta]


def _case_dropout(rng):
    x = _leaf(rng, 4, 6)
    seed = int(rng.integers(1 << 30))
    w = rng.normal(size=x.shape)
    return (lambda: _weighted_sum(ops.dropout(x, 0.3, "train", rng_seed=seed), w)), [x]


def _case_upsample(rng):
    x = _leaf(rng, 1, 2, 1, 2, 2)
    w = rng.normal(size=(1, 2, 2, 4, 4))
    return (lambda: _weighted_sum(ops.upsample_nearest(x, (2, 2, 2)), w)), [x]


def _case_conv3d(rng):
    x = _leaf(rng, 1, 2, 3, 4, 4)
    weight, bias = _leaf(rng, 3, 2, 3, 3, 3), _leaf(rng, 3)
    w = rng.normal(size=(1, 3, 3, 4, 4))
    return (lambda: _weighted_sum(ops.conv3d_raw(x, weight, bias), w)), [x, weight, bias]


def _case_conv3d_strided_grouped(rng):
    x = _leaf(rng, 1, 4, 3, 4, 4)
    weight, bias = _leaf(rng, 4, 2, 3, 3, 3), _leaf(rng, 4)
    w = rng.normal(size=(1, 4, 2, 2, 2))
    return (lambda: _weighted_sum(ops.conv3d_raw(x, weight, bias, stride=2, groups=2), w)), [x, weight, bias]


def _case_conv1x1(rng):
    x = _leaf(rng, 2, 3, 2, 2, 2)
    weight, bias = _leaf(rng, 2, 3, 1, 1, 1), _leaf(rng, 2)
    w = rng.normal(size=(2, 2, 2, 2, 2))
    return (lambda: _weighted_sum(ops.conv1x1(x, weight, bias), w)), [x, weight, bias]


def _case_subsample_concat_select(rng):
    a, b = _leaf(rng, 1, 1, 2, 4, 4), _leaf(rng, 1, 2, 2, 4, 4)
    rows = np.array([0, 2, 2, 1])

    def loss():
        joined = ops.concat([a, b], axis=1)
        picked = ops.index_select(ops.reshape(ops.subsample(joined, 2), (3, 4)), rows, axis=0)
        return ops.sum(ops.mul(picked, picked))

    return loss, [a, b]


def _case_losses(rng):
    logits, pred = _leaf(rng, 6, 4), _leaf(rng, 5, 4)
    targets = rng.integers(0, 4, size=6)
    # keep residuals clear of the smooth-L1 transition
    target = pred.data + np.where(rng.random((5, 4)) < 0.5, 0.4, 1.8) * rng.choice([-1, 1], size=(5, 4))
    return (lambda: ops.add(ops.cross_entropy(logits, targets), ops.smooth_l1(pred, target))), [logits, pred]


def _case_attention(rng):
    theta, phi, g = _leaf(rng, 1, 2, 1, 3, 3), _leaf(rng, 1, 2, 1, 3, 3), _leaf(rng, 1, 2, 1, 3, 3)
    w = rng.normal(size=(1, 2, 1, 3, 3))
    return (lambda: _weighted_sum(nonlocal_attention(theta, phi, g, chunk_size=4)[0], w)), [theta, phi, g]


def _case_ga_forward(rng):
    ps = ParameterSet(seed=int(rng.integers(1 << 30)))
    cfg = GAConfig(groups=2, spatial_subsample=1)
    params = build_ga_params(ps, "ga", 4, cfg)
    params.out_w.data[...] = rng.normal(scale=0.5, size=params.out_w.shape)
    x = _leaf(rng, 1, 4, 2, 3, 3)
    w = rng.normal(size=x.shape)
    return (lambda: _weighted_sum(ga_forward(x, cfg, params), w)), [x, params.group.weight, params.theta_w, params.out_w]


def _case_resnext_block(rng):
    ps = ParameterSet(seed=int(rng.integers(1 << 30)))
    block = build_block_params(ps, "block", 4, 8, cardinality=2, downsample=True)
    x = _leaf(rng, 2, 4, 2, 4, 4)
    w = rng.normal(size=(2, 8, 1, 2, 2))
    return (lambda: _weighted_sum(resnext_block(x, block, 2, "train"), w)), [x, block.grouped.weight, block.expand.weight]


def _case_multibox(rng):
    k, classes = 20, 4
    cls_logits, reg = _leaf(rng, k, classes), _leaf(rng, k, 4)
    labels = np.full(k, MatchResult.NEGATIVE)
    labels[[2, 7, 11]] = [0, 1, 0]
    labels[[4, 15]] = MatchResult.IGNORED
    targets = np.zeros((k, 4))
    targets[[2, 7, 11]] = reg.data[[2, 7, 11]] + np.where(rng.random((3, 4)) < 0.5, 0.4, 1.8)
    match = MatchResult(labels=labels, targets=targets)
    gt_classes = np.array([1, 3])
    return (lambda: multibox_loss(cls_logits, reg, match, gt_classes, mining_ratio=3.0).graph), [cls_logits, reg]


def _case_micro_network(rng):
    """Stem conv, one ResNeXt stage, a GA module and one detection head."""
    ps = ParameterSet(seed=int(rng.integers(1 << 30)))
    stem = ps.conv("stem", 1, 4, kernel=3)
    block = build_block_params(ps, "stage", 4, 4, cardinality=2, downsample=True)
    ga_cfg = GAConfig(groups=2)
    ga = build_ga_params(ps, "ga", 4, ga_cfg)
    ga.out_w.data[...] = rng.normal(scale=0.5, size=ga.out_w.shape)
    head = ps.conv("head", 4, 6, kernel=3)
    x = _leaf(rng, 1, 1, 2, 4, 4)
    w = rng.normal(size=(1, 6, 1, 2, 2))

    def loss():
        h = ops.conv3d(x, stem)
        h = resnext_block(h, block, 2, "train")
        h = ga_forward(h, ga_cfg, ga)
        return _weighted_sum(ops.conv3d(h, head), w)

    return loss, [x, stem.weight, block.reduce.weight, ga.theta_w, ga.phi_w, ga.g_w, head.weight]


CASES: Dict[str, CaseBuilder] = {
    "add": _case_add,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "reshape/permute": _case_reshape_permute,
    "relu": _case_relu,
    "softmax": _case_softmax,
    "batch_norm": _case_batch_norm,
    "dropout": _case_dropout,
    "upsample_nearest": _case_upsample,
    "conv3d": _case_conv3d,
    "conv3d strided+grouped": _case_conv3d_strided_grouped,
    "conv1x1": _case_conv1x1,
    "subsample/concat/index_select": _case_subsample_concat_select,
    "cross_entropy+smooth_l1": _case_losses,
    "nonlocal_attention": _case_attention,
    "ga_forward": _case_ga_forward,
    "resnext_block": _case_resnext_block,
    "multibox_loss": _case_multibox,
    "micro network": _case_micro_network,
}


def run_suite(
    instances: int = 5,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    tolerance: float = TOLERANCE,
) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results: List[GradCheckResult] = []
    started = time.perf_counter()
    for name in names or list(CASES):
        builder = CASES[name]
        for i in range(instances):
            loss_fn, inputs = builder(rng)
            err = check_gradients(loss_fn, inputs, rng)
            results.append(GradCheckResult(name, i, err, err <= tolerance))
            if err > tolerance:
                logger.warning("gradient check %s #%d: relative error %.3g", name, i, err)
    logger.info("gradient suite: %d checks in %.1fs", len(results), time.perf_counter() - started)
    return results
