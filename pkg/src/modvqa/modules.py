"""Differentiable neural modules, one parameter set per module kind.

Attention maps travel between modules as flat row-major vectors of
length G*G that are nonnegative and sum to one; prediction-typed modules
emit logits over the shared answer vocabulary. Per-instance text vectors
come from the layout decoder.

is_present shares exist's parameters. Map-reading prediction heads see
the map scaled by G*G (mean-one entries), which keeps useful threshold
weights at unit scale.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .layout import SIGNATURES, SyntaxNode
from .scene import ANSWERS, FEATURE_DIM

MAP_EPS = 1e-12
MAP_TOL = 1e-6


class ModuleInvariantError(ValueError):
    """An attention-map operand violates nonnegativity or unit mass."""


def check_attention_map(data: np.ndarray, who: str) -> None:
    if data.min() < -MAP_TOL:
        raise ModuleInvariantError(
            f"{who}: attention map has negative entry {data.min():.3g}")
    total = float(data.sum())
    if abs(total - 1.0) > MAP_TOL:
        raise ModuleInvariantError(
            f"{who}: attention map mass {total:.9f} is not 1")


def _normalize(z: Tensor) -> Tensor:
    # epsilon floor guards the all-zero min case; reciprocal via exp(-log)
    # keeps the op set closed
    zf = ad.maximum(z, MAP_EPS)
    total = ad.tsum(zf)
    return ad.mul(zf, ad.exp(-ad.log(total)))


class ModuleSet:
    """Parameters and forward functions for the 13 module kinds."""

    def __init__(self, store: ParamStore, grid_size: int,
                 d_txt: int = 64, d_hid: int = 64,
                 n_answers: int = len(ANSWERS), prefix: str = "mod"):
        self.grid_size = grid_size
        self.n_cells = grid_size * grid_size
        self.d_txt = d_txt
        self.d_hid = d_hid
        self.n_answers = n_answers
        self.prefix = prefix
        g2, d, h, v = self.n_cells, FEATURE_DIM, d_hid, n_answers
        w = store.weight
        for kind in ("find", "filter", "relocate"):
            w(f"{prefix}.{kind}.W_img", (d, h))
            w(f"{prefix}.{kind}.W_txt", (h, d_txt))
            w(f"{prefix}.{kind}.u", (h,))
        w(f"{prefix}.relocate.W_pool", (h, d))
        w(f"{prefix}.describe.W_pool", (h, d))
        w(f"{prefix}.describe.W_txt", (h, d_txt))
        w(f"{prefix}.describe.W_out", (v, h))
        w(f"{prefix}.compare.W_pair", (h, 2 * d))
        w(f"{prefix}.compare.W_txt", (h, d_txt))
        w(f"{prefix}.compare.W_out", (v, h))
        for kind in ("exist", "count"):
            w(f"{prefix}.{kind}.W_map", (h, g2))
            w(f"{prefix}.{kind}.W_out", (v, h))
        for kind in ("greater_than", "less_than", "equal_to"):
            w(f"{prefix}.{kind}.W_pair", (h, 2 * g2))
            w(f"{prefix}.{kind}.W_out", (v, h))
        self.store = store

    def param(self, kind: str, name: str) -> Tensor:
        if kind == "is_present":  # aliases exist's parameters
            kind = "exist"
        return self.store[f"{self.prefix}.{kind}.{name}"]

    # -- attention-producing forms ------------------------------------

    def _find_scores(self, kind: str, c: Tensor, x_img: Tensor,
                     pooled: Tensor | None = None) -> Tensor:
        pre = ad.add(ad.matmul(x_img, self.param(kind, "W_img")),
                     ad.matmul(self.param(kind, "W_txt"), c))
        if pooled is not None:
            pre = ad.add(pre, ad.matmul(self.param(kind, "W_pool"), pooled))
        return ad.matmul(ad.tanh(pre), self.param(kind, "u"))

    def find(self, c: Tensor, x_img: Tensor) -> Tensor:
        return ad.softmax(self._find_scores("find", c, x_img), axis=0)

    def filter(self, t: Tensor, c: Tensor, x_img: Tensor) -> Tensor:
        p = ad.softmax(self._find_scores("filter", c, x_img), axis=0)
        return _normalize(ad.mul(t, p))

    def relocate(self, t: Tensor, c: Tensor, x_img: Tensor) -> Tensor:
        pooled = ad.matmul(t, x_img)
        scores = self._find_scores("relocate", c, x_img, pooled)
        return ad.softmax(scores, axis=0)

    @staticmethod
    def and_(t1: Tensor, t2: Tensor) -> Tensor:
        return _normalize(ad.minimum(t1, t2))

    @staticmethod
    def or_(t1: Tensor, t2: Tensor) -> Tensor:
        return _normalize(ad.maximum(t1, t2))

    # -- prediction heads ---------------------------------------------

    def describe(self, t: Tensor, c: Tensor, x_img: Tensor) -> Tensor:
        pooled = ad.matmul(t, x_img)
        hidden = ad.tanh(ad.add(ad.matmul(self.param("describe", "W_pool"), pooled),
                                ad.matmul(self.param("describe", "W_txt"), c)))
        return ad.matmul(self.param("describe", "W_out"), hidden)

    def compare(self, t1: Tensor, t2: Tensor, c: Tensor, x_img: Tensor) -> Tensor:
        pair = ad.concat([ad.matmul(t1, x_img), ad.matmul(t2, x_img)])
        hidden = ad.tanh(ad.add(ad.matmul(self.param("compare", "W_pair"), pair),
                                ad.matmul(self.param("compare", "W_txt"), c)))
        return ad.matmul(self.param("compare", "W_out"), hidden)

    def _map_head(self, kind: str, t: Tensor) -> Tensor:
        hidden = ad.tanh(ad.matmul(self.param(kind, "W_map"),
                                   ad.mul(t, float(self.n_cells))))
        return ad.matmul(self.param(kind, "W_out"), hidden)

    def _pair_head(self, kind: str, t1: Tensor, t2: Tensor) -> Tensor:
        pair = ad.mul(ad.concat([t1, t2]), float(self.n_cells))
        hidden = ad.tanh(ad.matmul(self.param(kind, "W_pair"), pair))
        return ad.matmul(self.param(kind, "W_out"), hidden)

    def apply(self, kind: str, attention_inputs, c: Tensor | None,
              x_img: Tensor) -> Tensor:
        """Run one module instance; validates arity and map invariants."""
        sig = SIGNATURES.get(kind)
        if sig is None:
            raise TypeError(f"unknown module kind {kind!r}")
        if len(attention_inputs) != sig.arity:
            raise TypeError(
                f"{kind} takes {sig.arity} attention inputs, "
                f"got {len(attention_inputs)}")
        for t in attention_inputs:
            check_attention_map(t.data, kind)
        if sig.uses_features and c is None:
            raise TypeError(f"{kind} needs a text vector")
        a = attention_inputs
        if kind == "find":
            return self.find(c, x_img)
        if kind == "filter":
            return self.filter(a[0], c, x_img)
        if kind == "relocate":
            return self.relocate(a[0], c, x_img)
        if kind == "and":
            return self.and_(a[0], a[1])
        if kind == "or":
            return self.or_(a[0], a[1])
        if kind == "describe":
            return self.describe(a[0], c, x_img)
        if kind == "compare":
            return self.compare(a[0], a[1], c, x_img)
        if kind in ("exist", "is_present", "count"):
            return self._map_head(kind, a[0])
        if kind in ("greater_than", "less_than", "equal_to"):
            return self._pair_head(kind, a[0], a[1])
        raise TypeError(f"unhandled module kind {kind!r}")  # pragma: no cover


def features_tensor(feature_map: np.ndarray) -> Tensor:
    """Flatten a G x G x d feature map into the [G*G, d] constant input."""
    g = feature_map.shape[0]
    return Tensor(feature_map.reshape(g * g, feature_map.shape[2]))


def assemble_and_execute(tree: SyntaxNode, text_vectors, x_img: Tensor,
                         modules: ModuleSet):
    """Evaluate a layout tree bottom-up.

    text_vectors align with the tree's post-order (the RPN emission
    order). Returns (answer logits, trace), where the trace records one
    entry per node in evaluation order.
    """
    trace: list[dict] = []
    counter = [0]

    def visit(node: SyntaxNode) -> Tensor:
        child_vals = [visit(ch) for ch in node.children]
        idx = counter[0]
        counter[0] += 1
        c = text_vectors[idx] if text_vectors is not None else None
        try:
            out = modules.apply(node.kind, child_vals, c, x_img)
        except (TypeError, ModuleInvariantError) as e:
            raise type(e)(f"at node {idx} ({node.kind}): {e}") from None
        entry = {"index": idx, "token": str(node.token), "kind": node.kind}
        if SIGNATURES[node.kind].output == "attention":
            g = modules.grid_size
            entry["attention"] = out.data.reshape(g, g).copy()
        else:
            entry["logits"] = out.data.copy()
        trace.append(entry)
        return out

    logits = visit(tree)
    return logits, trace
