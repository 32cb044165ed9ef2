"""Finite-difference audits of every differentiable op and of the whole network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import DooDLeNet, ModelConfig, segmentation_loss

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _op_cases(rng: np.random.Generator) -> dict:
    x = rng.standard_normal((2, 3, 6, 6))
    targets = rng.integers(0, 3, (2, 6, 6))
    return {
        "conv2d": (lambda a, w, b: T.conv2d(a, w, b, 1, 1, 1),
                   [x, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        "conv2d_stride2": (lambda a, w: T.conv2d(a, w, None, 2, 1, 1),
                           [x, rng.standard_normal((2, 3, 3, 3))]),
        "conv2d_dilation2": (lambda a, w: T.conv2d(a, w, None, 1, 2, 2),
                             [x, rng.standard_normal((2, 3, 3, 3))]),
        "group_norm": (lambda a, g, b: T.group_norm(a, 2, g, b),
                       [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4) + 1.5,
                        rng.standard_normal(4)]),
        "relu": (T.relu, [x]),
        "sigmoid": (T.sigmoid, [x]),
        "bilinear_resize": (lambda a: T.bilinear_resize(a, 11, 4), [x]),
        "softmax": (lambda a: T.softmax(a, 1), [x]),
        "max_along": (lambda a: T.max_along(a, 1), [x]),
        "l2_normalize": (lambda a: T.l2_normalize(a, 1), [rng.standard_normal((2, 6, 3, 3)) + 0.5]),
        "matmul": (T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))]),
        "hadamard": (T.hadamard, [x, rng.standard_normal((2, 1, 6, 6))]),
        "concat": (lambda a, b: T.concat([a, b], 1), [x, rng.standard_normal((2, 2, 6, 6))]),
        "cross_entropy": (lambda a: T.cross_entropy(a, targets), [x]),
    }


def op_gradchecks(seed: int = 0) -> dict[str, float]:
    """Max relative error per op (64-bit, central differences)."""
    rng = np.random.default_rng(seed)
    return {name: T.grad_check(fn, inputs)["max_rel_error"]
            for name, (fn, inputs) in _op_cases(rng).items()}


def tiny_config(**changes) -> ModelConfig:
    base = dict(num_classes=2, height=16, width=16, widths=(4, 8, 12, 16), decoder_width=8,
                skip_width=4, compression_width=4, norm_groups=1, variant="full", dtype="float64", seed=0)
    base.update(changes)
    return ModelConfig(**base)


def model_gradcheck(n_params: int = 10, seed: int = 0, config: ModelConfig | None = None,
                    step: float = 1e-5, floor: float = 1e-5) -> dict:
    """Total training loss gradient vs central differences at sampled parameter entries.

    Entries are drawn by picking a parameter tensor uniformly, then an element
    uniformly inside it.
    """
    cfg = config or tiny_config()
    model = DooDLeNet(cfg)
    rng = np.random.default_rng(seed)
    B = 2
    color = rng.random((B, 3, cfg.height, cfg.width))
    thermal = rng.random((B, 1, cfg.height, cfg.width))
    labels = rng.integers(0, cfg.num_classes, (B, cfg.height, cfg.width))

    def loss_value() -> float:
        with T.no_grad():
            out = model(color, thermal)
            return segmentation_loss(out, labels, cfg.aux_weight, cfg.variant)[0].item()

    out = model(color, thermal)
    loss, _ = segmentation_loss(out, labels, cfg.aux_weight, cfg.variant)
    model.zero_grad()
    loss.backward()
    named = list(model.named_parameters())
    checks = []
    for _ in range(n_params):
        name, p = named[int(rng.integers(len(named)))]
        flat = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat, p.shape)
        orig = p.data[idx]
        h = step * max(1.0, abs(orig))
        p.data[idx] = orig + h
        fp = loss_value()
        p.data[idx] = orig - h
        fm = loss_value()
        p.data[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = float(p.grad[idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        checks.append({"param": name, "index": tuple(int(i) for i in idx),
                       "analytic": ana, "numeric": num, "rel_error": rel})
    return {"max_rel_error": max(c["rel_error"] for c in checks), "checks": checks}
