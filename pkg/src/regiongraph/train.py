"""Initialization, losses, gradients, SGD training and gradient checking."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from regiongraph import autodiff as ad
from regiongraph.graphs import AffinityTransforms
from regiongraph.model import GcnModel, LayerNormParams, VideoGraphInput, dropout_mask, forward_var

log = logging.getLogger(__name__)

LOSS_MODES = ("softmax_ce", "per_class_sigmoid_bce")
INIT_STD = 0.01


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


def init_model(d: int, num_layers: int, num_classes: int, seed: int, *,
               dropout_rate: float = 0.3, mode: str = "single", final_norm: bool = True,
               std: float = INIT_STD) -> GcnModel:
    """Gaussian(0, std) for the affinity maps, g and the classifier; zeros for graph-conv weights."""
    if d < 1 or num_layers < 1 or num_classes < 1:
        raise ValueError("d, num_layers and num_classes must be positive")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, std, (d, d))
    w_prime = rng.normal(0.0, std, (d, d))
    g_weight = rng.normal(0.0, std, (d, d))
    classifier = rng.normal(0.0, std, (2 * d, num_classes))
    return GcnModel(
        d=d,
        num_classes=num_classes,
        transforms=AffinityTransforms(w, w_prime),
        g_weight=g_weight,
        sim_weights=[np.zeros((d, d)) for _ in range(num_layers)],
        st_weights=[(np.zeros((d, d)), np.zeros((d, d))) for _ in range(num_layers)],
        norm_params={b: [LayerNormParams.identity(d) for _ in range(num_layers)] for b in ("sim", "st")},
        classifier=classifier,
        classifier_bias=np.zeros(num_classes),
        dropout_rate=dropout_rate,
        final_norm=final_norm,
        mode=mode,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def loss(logits: np.ndarray, target, mode: str) -> tuple[float, np.ndarray]:
    """Return (loss value, d loss / d logits).

    ``softmax_ce`` takes a class index; ``per_class_sigmoid_bce`` takes a
    0/1 vector of length C and averages the per-class losses.
    """
    z = np.asarray(logits, dtype=np.float64)
    c = z.shape[0]
    if mode == "softmax_ce":
        k = int(target)
        if not 0 <= k < c:
            raise ValueError(f"target class {k} outside [0, {c})")
        m = z.max()
        lse = m + np.log(np.exp(z - m).sum())
        grad = np.exp(z - lse)
        grad[k] -= 1.0
        return float(lse - z[k]), grad
    if mode == "per_class_sigmoid_bce":
        y = np.asarray(target, dtype=np.float64)
        if y.shape != (c,) or np.any((y != 0) & (y != 1)):
            raise ValueError(f"bce target must be a 0/1 vector of length {c}")
        # log(1 + e^z) - y z, stable form
        per_class = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return float(per_class.mean()), (_sigmoid(z) - y) / c
    raise ValueError(f"unknown loss mode {mode!r}")


def loss_mode_for(model_mode: str) -> str:
    return "softmax_ce" if model_mode == "single" else "per_class_sigmoid_bce"


def backward(model: GcnModel, inp: VideoGraphInput, target, mode: str,
             mask: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for every model parameter.

    The similarity graph is rebuilt on the tape from the node features, so
    its dependence on the affinity transforms is differentiated; the
    spatio-temporal graphs are constants.  ``mask`` is a fixed dropout mask
    (None disables dropout).
    """
    params = {name: ad.param(p, name) for name, p in model.named_parameters()}
    logits, _ = forward_var(params, model, ad.const(inp.node_features), ad.const(inp.g_front.m),
                            ad.const(inp.g_back.m), ad.const(inp.global_feature[None, :]),
                            None, mask)
    value, dlogits = loss(logits.value[0], target, mode)
    ad.backward(logits, dlogits[None, :])
    grads = {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
             for name, v in params.items()}
    return value, grads


def loss_only(model: GcnModel, inp: VideoGraphInput, target, mode: str) -> float:
    params = {name: ad.const(p) for name, p in model.named_parameters()}
    logits, _ = forward_var(params, model, ad.const(inp.node_features), ad.const(inp.g_front.m),
                            ad.const(inp.g_back.m), ad.const(inp.global_feature[None, :]))
    return loss(logits.value[0], target, mode)[0]


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference(f: Callable[[], float], p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``p`` (perturbed in place, restored)."""
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def gradient_check(model: GcnModel, inp: VideoGraphInput, target, mode: str,
                   h: float = 1e-5, tol: float = 1e-4,
                   names: Iterable[str] | None = None) -> list[GradCheckResult]:
    _, grads = backward(model, inp, target, mode)
    params = model.parameter_dict()
    results = []
    for name in (names if names is not None else params):
        numeric = finite_difference(lambda: loss_only(model, inp, target, mode), params[name], h)
        rel = relative_error(grads[name], numeric)
        results.append(GradCheckResult(name, float(rel.max()),
                                       float(np.abs(grads[name] - numeric).max()),
                                       bool(rel.max() < tol)))
    return results


def randomize_parameters(model: GcnModel, seed: int, scale: float = 0.5) -> GcnModel:
    """Copy of ``model`` with every parameter drawn at random (exercises all gradient paths)."""
    out = model.copy()
    rng = np.random.default_rng(seed)
    for name, p in out.named_parameters():
        if name.endswith(".gain"):
            p[...] = 1.0 + rng.normal(0.0, 0.2, p.shape)
        else:
            p[...] = rng.normal(0.0, scale, p.shape)
    return out


# --------------------------------------------------------------------------
# SGD


@dataclass
class TrainConfig:
    learning_rate: float = 0.00125
    # (iteration, multiplier of the base rate from that iteration on)
    schedule: list[tuple[int, float]] = field(default_factory=lambda: [(1800, 0.1)])
    total_iters: int = 2000
    batch_size: int = 2
    seed: int = 0
    loss_mode: str = "softmax_ce"
    weight_decay: float = 0.0
    momentum: float = 0.0
    # parameter-name prefixes held fixed (ablations)
    frozen: tuple[str, ...] = ()
    log_every: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        its = [int(it) for it, _ in self.schedule]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("schedule iterations must be strictly increasing")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("batch_size must be >= 1 and total_iters >= 0")
        self.schedule = [(int(it), float(m)) for it, m in self.schedule]
        self.frozen = tuple(self.frozen)

    def lr_at(self, iteration: int) -> float:
        mult = 1.0
        for it, m in self.schedule:
            if iteration >= it:
                mult = m
        return self.learning_rate * mult

    def is_frozen(self, name: str) -> bool:
        return any(name.startswith(prefix) for prefix in self.frozen)


ABLATIONS: dict[str, tuple[str, ...]] = {
    "joint": (),
    "similarity": ("st.",),
    "spatiotemporal": ("sim.",),
    "baseline": ("sim.", "st."),
}


@dataclass
class TrainState:
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)
    cursor: int = 0

    @classmethod
    def from_seed(cls, seed: int) -> "TrainState":
        return cls(rng=np.random.default_rng(seed))


Sample = tuple[VideoGraphInput, object]


def train_step(model: GcnModel, state: TrainState, batch: Sequence[Sample],
               config: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    """One SGD update from the mean gradient over ``batch`` (in place). Returns (mean loss, grads)."""
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    acc: dict[str, np.ndarray] = {}
    for inp, target in batch:
        mask = None
        if model.dropout_rate > 0:
            mask = dropout_mask(model.dropout_rate, 2 * model.d, state.rng)
        value, grads = backward(model, inp, target, config.loss_mode, mask)
        total += value
        for name, g in grads.items():
            acc[name] = g if name not in acc else acc[name] + g
    mean_loss = total / len(batch)
    lr = config.lr_at(state.iteration)
    bad = [name for name, g in acc.items() if not np.all(np.isfinite(g))]
    if not np.isfinite(mean_loss) or bad:
        raise NumericError(
            f"non-finite loss/gradient at iteration {state.iteration}",
            {"iteration": state.iteration, "loss": float(mean_loss) if np.isfinite(mean_loss) else str(mean_loss),
             "lr": lr, "bad_gradients": bad},
        )
    for name, p in model.named_parameters():
        if config.is_frozen(name):
            continue
        g = acc[name] / len(batch)
        if config.weight_decay:
            g = g + config.weight_decay * p
        if config.momentum:
            v = state.velocity.get(name)
            v = g if v is None else config.momentum * v + g
            state.velocity[name] = v
            g = v
        p -= lr * g
    state.iteration += 1
    return mean_loss, acc


def _next_batch(state: TrainState, n: int, batch_size: int) -> list[int]:
    idx = []
    while len(idx) < batch_size:
        if state.cursor >= len(state.order):
            state.order = state.rng.permutation(n).tolist()
            state.cursor = 0
        idx.append(state.order[state.cursor])
        state.cursor += 1
    return idx


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def timings_ndjson(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.timings)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])


def fit(model: GcnModel, dataset: Sequence[Sample], config: TrainConfig,
        callback: Callable[[int, float], None] | None = None) -> tuple[GcnModel, MetricsLog]:
    """Train ``model`` in place with mini-batch SGD; return it with the metrics log.

    The deterministic log (iter, loss, lr, seed) is kept apart from the
    wall-clock timings so that fixed-seed runs produce identical logs.
    """
    if not dataset:
        raise ValueError("empty training set")
    state = TrainState.from_seed(config.seed)
    metrics = MetricsLog()
    start = time.perf_counter()
    for it in range(config.total_iters):
        lr = config.lr_at(it)
        batch = [dataset[i] for i in _next_batch(state, len(dataset), config.batch_size)]
        value, _ = train_step(model, state, batch, config)
        if it % config.log_every == 0 or it == config.total_iters - 1:
            metrics.records.append({"iter": it, "loss": value, "lr": lr, "seed": config.seed})
            metrics.timings.append({"iter": it, "wall_ms": round((time.perf_counter() - start) * 1e3, 3)})
        if callback is not None:
            callback(it, value)
    return model, metrics
