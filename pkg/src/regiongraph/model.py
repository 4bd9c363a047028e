"""Two-branch residual graph convolutional network over region graphs.

Branch A propagates over the learned similarity graph, branch B over the
forward and backward spatio-temporal graphs.  Each layer computes
``Z = sum_i G_i X W_i + X`` followed by LayerNorm and ReLU; the first
similarity layer first maps its input through ``g``.  The branch outputs are
summed per node, mean-pooled, concatenated with the video's global feature
and fed to a linear classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from regiongraph import autodiff as ad
from regiongraph import linalg
from regiongraph.graphs import AdjacencyMatrix, AffinityTransforms
from regiongraph.linalg import ShapeError

BRANCHES = ("sim", "st")


@dataclass
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "LayerNormParams":
        return cls(np.ones(d), np.zeros(d))


@dataclass
class GcnModel:
    d: int
    num_classes: int
    transforms: AffinityTransforms
    g_weight: np.ndarray
    sim_weights: list[np.ndarray]
    st_weights: list[tuple[np.ndarray, np.ndarray]]
    # norm_params[branch][layer]
    norm_params: dict[str, list[LayerNormParams]]
    classifier: np.ndarray
    classifier_bias: np.ndarray
    dropout_rate: float = 0.3
    ln_eps: float = linalg.LAYER_NORM_EPS
    # LayerNorm+ReLU after the last layer of each branch too
    final_norm: bool = True
    mode: str = "single"

    @property
    def num_layers(self) -> int:
        return len(self.sim_weights)

    def __post_init__(self):
        d, L = self.d, len(self.sim_weights)
        if L < 1 or len(self.st_weights) != L:
            raise ValueError("model needs L >= 1 layers in both branches")
        if self.classifier.shape != (2 * d, self.num_classes):
            raise ShapeError("classifier", self.classifier.shape, (2 * d, self.num_classes))
        if self.classifier_bias.shape != (self.num_classes,):
            raise ShapeError("classifier_bias", self.classifier_bias.shape, (self.num_classes,))
        for name, p in self.named_parameters():
            if name.endswith((".gain", ".bias")) and name.startswith("norm"):
                expect = (d,)
            elif name.startswith("classifier"):
                continue
            else:
                expect = (d, d)
            if p.shape != expect:
                raise ShapeError(name, p.shape, expect)
        if self.mode not in ("single", "multi"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield (name, array) in the fixed order used by checkpoints.

        The arrays are the model's own storage, so in-place updates stick.
        """
        yield "affinity.w", self.transforms.w
        yield "affinity.w_prime", self.transforms.w_prime
        yield "g_weight", self.g_weight
        for layer, w in enumerate(self.sim_weights):
            yield f"sim.{layer}.w", w
        for layer, (wf, wb) in enumerate(self.st_weights):
            yield f"st.{layer}.front", wf
            yield f"st.{layer}.back", wb
        for branch in BRANCHES:
            for layer, norm in enumerate(self.norm_params[branch]):
                yield f"norm.{branch}.{layer}.gain", norm.gain
                yield f"norm.{branch}.{layer}.bias", norm.bias
        yield "classifier.w", self.classifier
        yield "classifier.b", self.classifier_bias

    def parameter_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def copy(self) -> "GcnModel":
        return GcnModel(
            d=self.d,
            num_classes=self.num_classes,
            transforms=AffinityTransforms(self.transforms.w.copy(), self.transforms.w_prime.copy()),
            g_weight=self.g_weight.copy(),
            sim_weights=[w.copy() for w in self.sim_weights],
            st_weights=[(wf.copy(), wb.copy()) for wf, wb in self.st_weights],
            norm_params={b: [LayerNormParams(n.gain.copy(), n.bias.copy()) for n in norms]
                         for b, norms in self.norm_params.items()},
            classifier=self.classifier.copy(),
            classifier_bias=self.classifier_bias.copy(),
            dropout_rate=self.dropout_rate,
            ln_eps=self.ln_eps,
            final_norm=self.final_norm,
            mode=self.mode,
        )


@dataclass
class VideoGraphInput:
    node_features: np.ndarray
    g_sim: AdjacencyMatrix | None
    g_front: AdjacencyMatrix
    g_back: AdjacencyMatrix
    global_feature: np.ndarray
    frames: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        n = self.node_features.shape[0]
        graphs = [self.g_front, self.g_back] + ([self.g_sim] if self.g_sim is not None else [])
        for g in graphs:
            if g.m.shape != (n, n):
                raise ShapeError(f"{g.kind} graph", g.m.shape, (n, n))
        if self.global_feature.shape != (self.node_features.shape[1],):
            raise ShapeError("global_feature", self.global_feature.shape, (self.node_features.shape[1],))

    @property
    def n(self) -> int:
        return self.node_features.shape[0]


# --------------------------------------------------------------------------
# differentiable building blocks (operate on ad.Var)


def _norm_relu(z: ad.Var, norm: tuple[ad.Var, ad.Var] | None, eps: float) -> ad.Var:
    if norm is None:
        return z
    return ad.relu(ad.layer_norm(z, norm[0], norm[1], eps))


def gcn_layer_var(graphs: Sequence[ad.Var], x: ad.Var, weights: Sequence[ad.Var],
                  norm: tuple[ad.Var, ad.Var] | None, eps: float,
                  residual: ad.Var | None = None) -> ad.Var:
    """``sum_i G_i X W_i + residual``, then LayerNorm and ReLU when ``norm`` is given."""
    if len(graphs) != len(weights):
        raise ValueError(f"{len(graphs)} graphs but {len(weights)} weight matrices")
    terms = [ad.matmul(ad.matmul(g, x), w) for g, w in zip(graphs, weights)]
    z = ad.add(*terms, x if residual is None else residual)
    return _norm_relu(z, norm, eps)


def similarity_graph_var(x: ad.Var, w: ad.Var, w_prime: ad.Var) -> ad.Var:
    left = ad.matmul(x, ad.transpose(w))
    right = ad.matmul(x, ad.transpose(w_prime))
    return ad.softmax_rows(ad.matmul(left, ad.transpose(right)))


def forward_var(params: dict[str, ad.Var], model: GcnModel, x: ad.Var, g_front: ad.Var,
                g_back: ad.Var, global_feature: ad.Var, g_sim: ad.Var | None = None,
                dropout_mask: np.ndarray | None = None) -> tuple[ad.Var, ad.Var]:
    """Full forward pass on the tape.

    When ``g_sim`` is None the similarity graph is computed from ``x`` and
    the affinity transforms, so gradients reach ``w`` and ``w'``.
    ``dropout_mask`` (already scaled by 1/(1-p)) multiplies the pooled vector.
    Returns (logits as a 1 x C matrix, node features N x d).
    """
    L, eps = model.num_layers, model.ln_eps

    def norm(branch: str, layer: int):
        if layer == L - 1 and not model.final_norm:
            return None
        return params[f"norm.{branch}.{layer}.gain"], params[f"norm.{branch}.{layer}.bias"]

    if g_sim is None:
        g_sim = similarity_graph_var(x, params["affinity.w"], params["affinity.w_prime"])

    # similarity branch: g() transforms the first layer's propagated input only
    gx = ad.matmul(x, ad.transpose(params["g_weight"]))
    h = gcn_layer_var([g_sim], gx, [params["sim.0.w"]], norm("sim", 0), eps, residual=x)
    for layer in range(1, L):
        h = gcn_layer_var([g_sim], h, [params[f"sim.{layer}.w"]], norm("sim", layer), eps)
    branch_a = h

    h = x
    for layer in range(L):
        h = gcn_layer_var([g_front, g_back], h,
                          [params[f"st.{layer}.front"], params[f"st.{layer}.back"]],
                          norm("st", layer), eps)
    branch_b = h

    node_out = ad.add(branch_a, branch_b)
    pooled = ad.concat_cols(ad.mean_rows(node_out), global_feature)
    if dropout_mask is not None:
        pooled = ad.mul_const(pooled, dropout_mask[None, :])
    logits = ad.add_bias(ad.matmul(pooled, params["classifier.w"]), params["classifier.b"])
    return logits, node_out


# --------------------------------------------------------------------------
# plain array API


def gcn_layer(g: AdjacencyMatrix | np.ndarray, x: np.ndarray, w: np.ndarray,
              norm: LayerNormParams | None = None, eps: float = linalg.LAYER_NORM_EPS,
              apply_norm: bool = True) -> np.ndarray:
    """One residual graph convolution: relu(layer_norm(G X W + X)).

    ``norm`` defaults to unit gain and zero bias; ``apply_norm=False`` returns
    the pre-activation ``G X W + X``.
    """
    return gcn_layer_multi([g], x, [w], norm, eps, apply_norm)


def gcn_layer_multi(gs: Sequence[AdjacencyMatrix | np.ndarray], x: np.ndarray,
                    ws: Sequence[np.ndarray], norm: LayerNormParams | None = None,
                    eps: float = linalg.LAYER_NORM_EPS, apply_norm: bool = True) -> np.ndarray:
    if len(gs) != len(ws):
        raise ValueError(f"{len(gs)} graphs but {len(ws)} weight matrices")
    n, d = x.shape
    mats = [g.m if isinstance(g, AdjacencyMatrix) else np.asarray(g) for g in gs]
    for m in mats:
        if m.shape != (n, n):
            raise ShapeError("gcn_layer graph", m.shape, (n, n))
    for w in ws:
        if w.shape != (d, d):
            raise ShapeError("gcn_layer weight", w.shape, (d, d))
    if norm is None:
        norm = LayerNormParams.identity(d)
    norm_vars = (ad.const(norm.gain), ad.const(norm.bias)) if apply_norm else None
    out = gcn_layer_var([ad.const(m) for m in mats], ad.const(x), [ad.const(w) for w in ws],
                        norm_vars, eps)
    return out.value


def nonlocal_block(x: np.ndarray, t: AffinityTransforms, g_weight: np.ndarray,
                   w: np.ndarray) -> np.ndarray:
    """Raw non-local block over proposals: Z = G_sim(x) (x g^T) W + x."""
    n, d = x.shape
    if g_weight.shape != (d, d) or w.shape != (d, d):
        raise ShapeError("nonlocal_block", x.shape, g_weight.shape, w.shape)
    xv = ad.const(x)
    g_sim = similarity_graph_var(xv, ad.const(t.w), ad.const(t.w_prime))
    y = ad.matmul(g_sim, ad.matmul(xv, ad.const(g_weight.T)))
    return ad.add(ad.matmul(y, ad.const(w)), xv).value


def _const_params(model: GcnModel) -> dict[str, ad.Var]:
    return {name: ad.const(p) for name, p in model.named_parameters()}


def dropout_mask(rate: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept entries are scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones(size)
    keep = rng.random(size) >= rate
    return keep / (1.0 - rate)


def forward(model: GcnModel, inp: VideoGraphInput, training: bool = False,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits of length C, node features N x d).

    Uses ``inp.g_sim`` when present, otherwise builds it from the model's
    affinity transforms.  Dropout is active only when ``training`` is set.
    """
    if inp.node_features.shape[1] != model.d:
        raise ShapeError("forward", inp.node_features.shape, (inp.n, model.d))
    mask = None
    if training and model.dropout_rate > 0:
        if rng is None:
            raise ValueError("training forward needs an rng for dropout")
        mask = dropout_mask(model.dropout_rate, 2 * model.d, rng)
    logits, node_out = forward_var(
        _const_params(model), model, ad.const(inp.node_features), ad.const(inp.g_front.m),
        ad.const(inp.g_back.m), ad.const(inp.global_feature[None, :]),
        None if inp.g_sim is None else ad.const(inp.g_sim.m), mask)
    return logits.value[0], node_out.value


def aggregate_clips(clip_logit_vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Video-level scores as the elementwise max over clip scores."""
    if len(clip_logit_vectors) == 0:
        raise linalg.EmptyInputError("aggregate_clips needs at least one clip")
    return linalg.max_elementwise(clip_logit_vectors)


def similarity_first_layer(model: GcnModel, x: np.ndarray, g_sim: np.ndarray | None = None,
                           apply_norm: bool = True) -> np.ndarray:
    """Branch A's first layer on its own; ``apply_norm=False`` gives the pre-activation."""
    params = _const_params(model)
    xv = ad.const(x)
    g = (similarity_graph_var(xv, params["affinity.w"], params["affinity.w_prime"])
         if g_sim is None else ad.const(g_sim))
    gx = ad.matmul(xv, ad.transpose(params["g_weight"]))
    norm = (params["norm.sim.0.gain"], params["norm.sim.0.bias"]) if apply_norm else None
    return gcn_layer_var([g], gx, [params["sim.0.w"]], norm, model.ln_eps, residual=xv).value
