"""Finite-difference checks for every differentiable op and for the full model."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import EmotionTagger, ModelConfig

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, dtype=np.float64)


def _readout(out: Tensor, rng) -> Tensor:
    # random projection so that invariant sums (e.g. softmax rows) still carry gradient
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return (out * w).sum()


def rng_fixed(rng):
    # the readout weights must be identical on every call of f
    seed = int(rng.integers(2**31))
    return _Fixed(seed)


class _Fixed:
    def __init__(self, seed):
        self.seed = seed

    def normal(self, size):
        return np.random.default_rng(self.seed).normal(size=size)


def _cases() -> dict[str, Callable]:
    def shapes(rng):
        return int(rng.integers(1, 5)), int(rng.integers(1, 5))

    def add(rng):
        n, m = shapes(rng)
        a, b, r = _t(rng, n, m), _t(rng, m), rng_fixed(rng)
        return (lambda: _readout(a + b, r)), [a, b]

    def sub(rng):
        n, m = shapes(rng)
        a, b, r = _t(rng, n, m), _t(rng, n, 1), rng_fixed(rng)
        return (lambda: _readout(a - b, r)), [a, b]

    def mul(rng):
        n, m = shapes(rng)
        a, b, r = _t(rng, n, m), _t(rng, n, m), rng_fixed(rng)
        return (lambda: _readout(a * b, r)), [a, b]

    def div(rng):
        n, m = shapes(rng)
        a, r = _t(rng, n, m), rng_fixed(rng)
        b = Tensor(rng.uniform(0.5, 2.0, (n, m)) * rng.choice([-1, 1], (n, m)), dtype=np.float64)
        return (lambda: _readout(a / b, r)), [a, b]

    def matmul(rng):
        n, m = shapes(rng)
        k = int(rng.integers(1, 5))
        a, b, r = _t(rng, 2, n, k), _t(rng, k, m), rng_fixed(rng)
        return (lambda: _readout(a @ b, r)), [a, b]

    def reshape_transpose(rng):
        a, r = _t(rng, 2, 3, 4), rng_fixed(rng)
        return (lambda: _readout(a.transpose(2, 0, 1).reshape(4, 6), r)), [a]

    def sum_mean(rng):
        a, r = _t(rng, 3, 4), rng_fixed(rng)
        return (lambda: _readout(a.sum(axis=0), r) + _readout(a.mean(axis=1, keepdims=True), r)), [a]

    def exp_log(rng):
        a = Tensor(rng.uniform(0.5, 2.0, (3, 3)), dtype=np.float64)
        r = rng_fixed(rng)
        return (lambda: _readout(ag.log(a) + ag.exp(a), r)), [a]

    def tanh(rng):
        a, r = _t(rng, 3, 4), rng_fixed(rng)
        return (lambda: _readout(ag.tanh(a), r)), [a]

    def relu(rng):
        # keep inputs away from the kink
        a = Tensor(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4)), dtype=np.float64)
        r = rng_fixed(rng)
        return (lambda: _readout(ag.relu(a), r)), [a]

    def gelu(rng):
        # the left tail has derivatives below the relative-error floor
        a = Tensor(rng.uniform(-3.0, 3.0, (3, 4)), dtype=np.float64)
        r = rng_fixed(rng)
        return (lambda: _readout(ag.gelu(a), r)), [a]

    def softmax_rows(rng):
        n, m = shapes(rng)
        a, r = _t(rng, n, m + 1, scale=2.0), rng_fixed(rng)
        return (lambda: _readout(ag.softmax_rows(a), r)), [a]

    def masked_softmax(rng):
        a, r = _t(rng, 2, 3, 5), rng_fixed(rng)
        mask = rng.random((2, 1, 5)) > 0.3
        mask[..., 0] = True
        return (lambda: _readout(ag.softmax(a, mask=mask), r)), [a]

    def log_softmax(rng):
        a, r = _t(rng, 3, 5), rng_fixed(rng)
        return (lambda: _readout(ag.log_softmax(a), r)), [a]

    def attention_unprojected(rng):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        x = _t(rng, n, d)
        return (lambda: ag.attention_unprojected(x).output.sum()), [x]

    def layer_norm(rng):
        x, g, b, r = _t(rng, 2, 3, 6), _t(rng, 6), _t(rng, 6), rng_fixed(rng)
        return (lambda: _readout(ag.layer_norm(x, g, b), r)), [x, g, b]

    def embedding(rng):
        table, r = _t(rng, 4, 3), rng_fixed(rng)
        idx = rng.integers(-1, 4, size=(2, 5))
        return (lambda: _readout(ag.embedding(table, idx), r)), [table]

    def conv1d(rng):
        k = int(rng.choice([1, 3, 5]))
        x, w, b, r = _t(rng, 2, 6, 3), _t(rng, k, 3, 4), _t(rng, 4), rng_fixed(rng)
        return (lambda: _readout(ag.conv1d(x, w, b), r)), [x, w, b]

    def cross_entropy_masked(rng):
        logits = _t(rng, 2, 6, 5, scale=2.0)
        labels = rng.integers(-1, 5, size=(2, 6))
        labels[0, 0] = 1
        return (lambda: ag.cross_entropy_masked(logits, labels)), [logits]

    return {f.__name__: f for f in (add, sub, mul, div, matmul, reshape_transpose, sum_mean, exp_log, tanh,
                                    relu, gelu, softmax_rows, masked_softmax, log_softmax, attention_unprojected,
                                    layer_norm, embedding, conv1d, cross_entropy_masked)}


ELEMENTARY_CASES = _cases()


def tiny_model_case(seed: int = 0, length: int = 8, conv: bool = True, interlocutor: bool = True):
    """Loss closure and float64 parameters of a 1-layer, d=8 tagger on a fixed random input."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_dim=5, num_layers=1, num_heads=2, hidden_dim=8, ffn_dim=16, max_positions=length,
                      use_conv_front_end=conv, conv_kernels=[3, 3], conv_channels=8,
                      use_interlocutor=interlocutor, max_speakers=3, dropout=0.0, seed=seed)
    model = EmotionTagger(cfg, dtype=np.float64)
    # non-trivial norm parameters so their gradients are exercised
    for name, p in model.params.items():
        if "ln" in name or name.endswith("bias") or name.endswith(("bq", "bv", "bo", "b1", "b2")):
            p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(2, length, cfg.input_dim))
    spk = rng.integers(-1, 3, size=(2, length))
    real = np.ones((2, length), bool)
    real[1, -2:] = False
    labels = rng.integers(0, 5, size=(2, length))
    labels[~real] = -1

    def f():
        return ag.cross_entropy_masked(model.forward(x, spk, real), labels)

    return f, model.parameters()


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@contextlib.contextmanager
def _perturbed(op_name: str | None):
    """Test hook: corrupt one op's backward rule so the oracle must flag it."""
    if op_name is None:
        yield
        return
    original = getattr(ag, op_name)

    def corrupt(*args, **kwargs):
        out = original(*args, **kwargs)
        tape = ag.get_tape()
        if tape.nodes and tape.nodes[-1].out is out:
            node = tape.nodes[-1]
            inner = node.backward
            node.backward = lambda g: [None if gi is None else gi * 1.5 for gi in inner(g)]
        return out

    setattr(ag, op_name, corrupt)
    try:
        yield
    finally:
        setattr(ag, op_name, original)


def run_gradchecks(cases_per_op: int = 20, model_seeds: int = 1, perturb: str | None = None,
                   seed: int = 0) -> list[CheckResult]:
    results = []
    with _perturbed(perturb):
        for name, build in ELEMENTARY_CASES.items():
            worst = 0.0
            for i in range(cases_per_op):
                f, params = build(np.random.default_rng([seed, i, len(name)]))
                worst = max(worst, ag.grad_check(f, params, 1e-5))
            results.append(CheckResult(name, worst, OP_TOLERANCE))
        worst = 0.0
        for s in range(model_seeds):
            f, params = tiny_model_case(seed + s)
            worst = max(worst, ag.grad_check(f, params, 1e-5))
        results.append(CheckResult("model", worst, MODEL_TOLERANCE))
    return results
