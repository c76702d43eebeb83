"""Central finite-difference verification of every backward rule.

Each check projects the output onto a fixed random direction ``R`` so the
scalar ``sum(f(x) * R)`` exercises every output element, then compares the
analytic gradient of each input against central differences. The error metric
is ``|analytic - numeric| / max(1, |numeric|)`` per element.

Primitives are looked up in ``tensor.PRIMITIVES`` at call time, so replacing a
catalogue entry (as the tests do with a deliberately broken rule) is caught
and reported under that primitive's name.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    kind: str  # "primitive" or "chain"
    max_error: float
    cases: int
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        extra = f" detail={self.detail}" if self.detail else ""
        return f"{self.kind}={self.name} status={status} cases={self.cases} max_err={self.max_error:.3e}{extra}"


@dataclass
class GradCheckReport:
    results: list[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def to_text(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"overall={'pass' if self.passed else 'FAIL'} checks={len(self.results)} seconds={self.seconds:.1f}")
        return "\n".join(lines) + "\n"


def compare(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
            h: float = STEP, max_coords: int | None = None) -> float:
    """Largest error over all (or ``max_coords`` sampled) input coordinates."""
    probe = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*probe)
    R = rng.normal(size=out.shape)
    T.backward(T.sum_(T.mul(out, Tensor(R))))

    def objective(arrays):
        with T.no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * R))

    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = probe[k].grad if probe[k].grad is not None else np.zeros_like(x)
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        work = [a.copy() for a in inputs]
        flat = work[k].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = objective(work)
            flat[c] = orig - h
            down = objective(work)
            flat[c] = orig
            fd = (up - down) / (2 * h)
            err = abs(analytic.reshape(-1)[c] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# primitive cases: name -> builder(rng, shape) -> (inputs, fn)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * (gap + np.abs(x)), x)


def _distinct(rng, shape):
    """Values with pairwise gaps far larger than the FD step (for max/relu kinks)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 - 0.05 * n).reshape(shape) + rng.uniform(-0.01, 0.01, size=shape)


def _p(name):
    return T.PRIMITIVES[name]


def _binary(name, broadcast=False, positive_b=False):
    def build(rng, shape):
        a = rng.normal(size=shape)
        bshape = shape[-1:] if broadcast else shape
        b = rng.uniform(0.5, 2.0, size=bshape) if positive_b else rng.normal(size=bshape)
        return [a, b], lambda x, y: _p(name)(x, y)
    return build


def _unary(name, sampler="normal", **kw):
    def build(rng, shape):
        if sampler == "positive":
            x = rng.uniform(0.3, 3.0, size=shape)
        elif sampler == "kink":
            x = _away_from_zero(rng, shape)
        elif sampler == "distinct":
            x = _distinct(rng, shape)
        else:
            x = rng.normal(size=shape)
        return [x], lambda a: _p(name)(a, **kw)
    return build


def _clamp(rng, shape):
    x = _away_from_zero(rng, shape) + 0.0
    return [x], lambda a: _p("clamp_min")(a, 0.0)


def _matmul(rng, shape):
    m, k = shape[-2], shape[-1]
    a = rng.normal(size=shape)
    b = rng.normal(size=shape[:-2] + (k, m + 1))
    return [a, b], lambda x, y: _p("matmul")(x, y)


def _reduce(name, distinct=False):
    def build(rng, shape):
        x = _distinct(rng, shape) if distinct else rng.normal(size=shape)
        axis = len(shape) - 1
        if name == "max":
            return [x], lambda a: _p(name)(a, axis)
        return [x], lambda a: _p(name)(a, axis=axis, keepdims=True)
    return build


def _reduce_all(name):
    def build(rng, shape):
        return [rng.normal(size=shape)], lambda a: _p(name)(a)
    return build


def _layer_norm(rng, shape):
    d = shape[-1]
    x = rng.normal(size=shape)
    return [x, rng.normal(size=d), rng.normal(size=d)], lambda a, g, b: _p("layer_norm")(a, g, b, 1e-5)


def _reshape(rng, shape):
    return [rng.normal(size=shape)], lambda a: _p("reshape")(a, (-1,))


def _transpose(rng, shape):
    axes = tuple(reversed(range(len(shape))))
    return [rng.normal(size=shape)], lambda a: _p("transpose")(a, axes)


def _broadcast(rng, shape):
    x = rng.normal(size=(1,) + shape[1:])
    return [x], lambda a: _p("broadcast")(a, shape)


def _getitem(rng, shape):
    idx = rng.integers(0, shape[0], size=shape[0] + 2)  # repeats exercise accumulation
    return [rng.normal(size=shape)], lambda a: _p("getitem")(a, idx)


def _embedding(rng, shape):
    ids = rng.integers(0, shape[0], size=(2, shape[0]))
    return [rng.normal(size=shape)], lambda t: _p("embedding")(t, ids)


def _concat(rng, shape):
    other = shape[:-1] + (shape[-1] + 1,)
    return [rng.normal(size=shape), rng.normal(size=other)], lambda a, b: _p("concat")([a, b], axis=-1)


CASES: dict[str, Callable] = {
    "add": _binary("add", broadcast=True),
    "sub": _binary("sub", broadcast=True),
    "mul": _binary("mul", broadcast=True),
    "div": _binary("div", positive_b=True),
    "neg": _unary("neg"),
    "scale": _unary("scale", c=-1.7),
    "add_scalar": _unary("add_scalar", c=0.4),
    "pow_scalar": _unary("pow_scalar", "positive", p=1.5),
    "exp": _unary("exp"),
    "log": _unary("log", "positive"),
    "sqrt": _unary("sqrt", "positive"),
    "tanh": _unary("tanh"),
    "relu": _unary("relu", "kink"),
    "clamp_min": _clamp,
    "gelu": _unary("gelu"),
    "matmul": _matmul,
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "max": _reduce("max", distinct=True),
    "softmax": _unary("softmax"),
    "log_softmax": _unary("log_softmax"),
    "layer_norm": _layer_norm,
    "reshape": _reshape,
    "transpose": _transpose,
    "broadcast": _broadcast,
    "getitem": _getitem,
    "embedding": _embedding,
    "concat": _concat,
}

# whole-tensor reductions get an extra case each
EXTRA_CASES = {"sum": _reduce_all("sum"), "mean": _reduce_all("mean")}

SHAPES = {
    "small": [(3, 4), (2, 3, 5), (4, 2)],
    "full": [(3, 4), (2, 3, 5), (4, 2), (2, 2, 3, 4)],
}


def check_primitives(scale: str = "full", seed: int = 0) -> list[CheckResult]:
    results = []
    missing = sorted(set(T.PRIMITIVES) - set(CASES))
    for name in missing:
        results.append(CheckResult(name, "primitive", float("inf"), 0, False, "no finite-difference case"))
    for name in sorted(CASES):
        rng = np.random.default_rng([seed, sum(name.encode())])
        builders = [CASES[name]] * len(SHAPES[scale])
        shapes = list(SHAPES[scale])
        if name in EXTRA_CASES:
            builders.append(EXTRA_CASES[name])
            shapes.append(SHAPES[scale][1])
        worst, detail = 0.0, ""
        for build, shape in zip(builders, shapes):
            inputs, fn = build(rng, shape)
            try:
                err = compare(fn, inputs, rng)
            except Exception as exc:  # a broken rule may also raise
                err, detail = float("inf"), f"{type(exc).__name__}"
            worst = max(worst, err)
        results.append(CheckResult(name, "primitive", worst, len(builders), worst < TOLERANCE, detail))
    return results


# ---------------------------------------------------------------------------
# module chains


def _tiny_config():
    from .config import TrainConfig

    return TrainConfig(dim=16, heads=2, patch=4, vision_layers=1, decoder_layers=1, vocab_size=512)


def chain_cases(scale: str, seed: int) -> dict[str, Callable]:
    from .decoder import FrozenDecoder, Vocabulary
    from .losses import batch_hard_triplet, id_loss, smoothed_targets, total_loss
    from .model import ReIDModel
    from .nn import Attention, Block, FeedForward, LayerNorm, Linear, Rotary
    from .sgi import SGI
    from .vision import VisionEncoder, grid_positions

    d, heads = 8, 2
    cases = {}

    def mlp(rng):
        lin, ffn = Linear(5, d, rng), FeedForward(d, rng)
        return [rng.normal(size=(3, 5))], lambda x: ffn(lin(x))

    def norm_attention(rng):
        ln = LayerNorm(d)
        attn = Attention(d, heads, rng)
        rot = Rotary(grid_positions(2, 3), d // heads)
        return [rng.normal(size=(2, 6, d))], lambda x: attn(ln(x), rotary=rot)

    def block(rng):
        blk = Block(d, heads, rng)
        return [rng.normal(size=(2, 5, d))], lambda x: blk(x)

    def vision(rng):
        enc = VisionEncoder(d, 1, heads, 2, 8, 4, rng)
        return [rng.uniform(size=(1, 8, 4, 3))], lambda img: enc(img)

    def frozen_decoder(rng):
        dec = FrozenDecoder(d, 1, heads, Vocabulary(512), rng, "describe the person")
        return [rng.normal(size=(2, 4, d))], lambda V: dec.generate_semantic_token(V).v_reid

    def sgi(rng):
        mod = SGI(d, heads, rng)
        return [rng.normal(size=(2, d)), rng.normal(size=(2, 4, d))], lambda t, V: mod(t, V)

    def losses(rng):
        labels = np.array([0, 0, 1, 1, 2, 2])
        q = smoothed_targets(labels, 3, 0.1)

        def fn(feats, W):
            l_id = id_loss(T.matmul(feats, W), q)
            l_tri = batch_hard_triplet(feats, labels, 0.3).loss
            return total_loss(l_id, l_tri, 0.25, 1.0)
        return [rng.normal(size=(6, d)), rng.normal(size=(d, 3))], fn

    def pixel_to_loss(rng):
        cfg = _tiny_config().replace(seed=seed)
        model = ReIDModel(cfg, 16, 8, num_cameras=2, num_ids=2)
        ids = np.array([0, 0, 1, 1])
        cams = np.array([0, 1, 0, 1])
        q = smoothed_targets(ids, 2, cfg.epsilon)

        def fn(pixels):
            feats = model(pixels, cams)
            l_id = id_loss(model.logits(feats), q)
            l_tri = batch_hard_triplet(feats, ids, cfg.margin).loss
            return total_loss(l_id, l_tri, cfg.alpha1, cfg.alpha2)
        return [rng.uniform(size=(4, 16, 8, 3))], fn

    cases.update(mlp=mlp, attention=norm_attention, block=block, vision_encoder=vision,
                 frozen_decoder=frozen_decoder, sgi=sgi, losses=losses, pixel_to_loss=pixel_to_loss)
    return cases


def check_chains(scale: str = "full", seed: int = 0) -> list[CheckResult]:
    budget = 64 if scale == "small" else None
    results = []
    for name, build in chain_cases(scale, seed).items():
        rng = np.random.default_rng([seed, 99, sum(name.encode())])
        inputs, fn = build(rng)
        try:
            err, detail = compare(fn, inputs, rng, max_coords=budget), ""
        except Exception as exc:
            err, detail = float("inf"), type(exc).__name__
        results.append(CheckResult(name, "chain", err, 1, err < TOLERANCE, detail))
    return results


def run_gradcheck(scale: str = "full", seed: int = 0) -> GradCheckReport:
    if scale not in SHAPES:
        from .errors import ConfigError

        raise ConfigError(f"unknown grad-check scale {scale!r}; expected small or full")
    start = time.perf_counter()
    results = check_primitives(scale, seed) + check_chains(scale, seed)
    return GradCheckReport(results, time.perf_counter() - start)
