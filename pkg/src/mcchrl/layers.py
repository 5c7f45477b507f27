"""Dense neural layers with analytic gradients: linear, GRU cell, MLP,
cosine target attention, and a factorization-machine interaction layer.

Every layer exposes forward(...) -> (output, cache) and
backward(cache, grad_output, accumulate=...) -> grad_inputs. Parameter
gradients are accumulated into the owning ParamStore; passing
accumulate=False computes input gradients only (used for grad-of-action
passes through the critic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore, uniform_init


class DimensionError(ValueError):
    pass


ACTIVATIONS = ("relu", "tanh", "sigmoid", "none")

LAYER_KINDS = ("linear", "gru", "mlp", "attention", "fm")


def check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")
    return x


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def activate(tag: str, a: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(a, 0.0)
    if tag == "tanh":
        return np.tanh(a)
    if tag == "sigmoid":
        return sigmoid(a)
    if tag == "none":
        return a
    raise ValueError(f"unknown activation tag: {tag}")


def activate_backward(tag: str, a: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through y = activate(tag, a); uses preactivation a and output y."""
    if tag == "relu":
        return dy * (a > 0.0)
    if tag == "tanh":
        return dy * (1.0 - y * y)
    if tag == "sigmoid":
        return dy * y * (1.0 - y)
    if tag == "none":
        return dy
    raise ValueError(f"unknown activation tag: {tag}")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description (kind, dims, hidden units, activations)."""

    kind: str
    in_dim: int
    out_dim: int
    hidden: tuple = ()
    activations: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind: {self.kind}")
        if self.in_dim <= 0 or self.out_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError("layer dims must be positive")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation tag: {tag}")


def mlp_spec(in_dim: int, hidden, out_dim: int, hidden_act: str = "relu",
             final_act: str = "none") -> LayerSpec:
    hidden = tuple(hidden)
    acts = tuple([hidden_act] * len(hidden) + [final_act])
    return LayerSpec("mlp", in_dim, out_dim, hidden, acts)


class Linear:
    """y = W @ x + b."""

    def __init__(self, store: ParamStore, prefix: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = store.add(prefix + "/w", uniform_init(rng, (out_dim, in_dim), in_dim))
        self.b = store.add(prefix + "/b", np.zeros(out_dim))

    def forward(self, x: np.ndarray):
        if x.shape != (self.in_dim,):
            raise DimensionError(f"linear expects input dim {self.in_dim}, got {x.shape}")
        y = self.w.value @ x + self.b.value
        return y, x

    def backward(self, cache, dy: np.ndarray, accumulate: bool = True) -> np.ndarray:
        x = cache
        if accumulate:
            self.w.grad += np.outer(dy, x)
            self.b.grad += dy
        return self.w.value.T @ dy


class GRUCell:
    """Gated recurrent cell:

        z  = sigmoid(Wz @ [h, x])
        r  = sigmoid(Wr @ [h, x])
        hc = tanh(Wh @ [r*h, x])
        h' = (1 - z) * h + z * hc

    item_space_init puts the candidate input block near the identity so the
    latent starts as a recency-weighted near-average of inputs (requires
    hidden_dim == input_dim); the gate blocks stay small.
    """

    def __init__(self, store: ParamStore, prefix: str, input_dim: int, hidden_dim: int,
                 rng: np.random.Generator, item_space_init: bool = False, gain: float = 1.0):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        cat = hidden_dim + input_dim
        self.wz = store.add(prefix + "/wz", uniform_init(rng, (hidden_dim, cat), cat))
        self.wr = store.add(prefix + "/wr", uniform_init(rng, (hidden_dim, cat), cat))
        if item_space_init:
            if input_dim != hidden_dim:
                raise DimensionError("item_space_init requires input_dim == hidden_dim")
            wh = rng.normal(0.0, 0.05 / np.sqrt(cat), size=(hidden_dim, cat))
            wh[:, hidden_dim:] += gain * np.eye(hidden_dim)
            self.wh = store.add(prefix + "/wh", wh)
        else:
            self.wh = store.add(prefix + "/wh", uniform_init(rng, (hidden_dim, cat), cat))

    def forward(self, h: np.ndarray, x: np.ndarray):
        if h.shape != (self.hidden_dim,) or x.shape != (self.input_dim,):
            raise DimensionError(
                f"gru expects h dim {self.hidden_dim}, x dim {self.input_dim}; "
                f"got {h.shape}, {x.shape}")
        hx = np.concatenate([h, x])
        z = sigmoid(self.wz.value @ hx)
        r = sigmoid(self.wr.value @ hx)
        rhx = np.concatenate([r * h, x])
        hc = np.tanh(self.wh.value @ rhx)
        h_new = (1.0 - z) * h + z * hc
        return h_new, (h, x, hx, z, r, rhx, hc)

    def backward(self, cache, dh_new: np.ndarray, accumulate: bool = True):
        h, x, hx, z, r, rhx, hc = cache
        H = self.hidden_dim
        dz = dh_new * (hc - h)
        dhc = dh_new * z
        dh = dh_new * (1.0 - z)

        da_h = dhc * (1.0 - hc * hc)
        drh = self.wh.value[:, :H].T @ da_h
        dx = self.wh.value[:, H:].T @ da_h
        dr = drh * h
        dh += drh * r

        da_r = dr * r * (1.0 - r)
        dh += self.wr.value[:, :H].T @ da_r
        dx += self.wr.value[:, H:].T @ da_r

        da_z = dz * z * (1.0 - z)
        dh += self.wz.value[:, :H].T @ da_z
        dx += self.wz.value[:, H:].T @ da_z

        if accumulate:
            self.wh.grad += np.outer(da_h, rhx)
            self.wr.grad += np.outer(da_r, hx)
            self.wz.grad += np.outer(da_z, hx)
        return dh, dx


class MLP:
    """Stack of linear layers with per-layer activation tags from a LayerSpec."""

    def __init__(self, store: ParamStore, prefix: str, spec: LayerSpec,
                 rng: np.random.Generator):
        if spec.kind != "mlp":
            raise ValueError("MLP requires a spec of kind 'mlp'")
        dims = [spec.in_dim, *spec.hidden, spec.out_dim]
        if len(spec.activations) != len(dims) - 1:
            raise ValueError("activation tag count must match layer count")
        self.spec = spec
        self.layers = [
            Linear(store, f"{prefix}/l{i}", dims[i], dims[i + 1], rng)
            for i in range(len(dims) - 1)
        ]

    def forward(self, x: np.ndarray):
        caches = []
        y = x
        for layer, tag in zip(self.layers, self.spec.activations):
            a, lin_cache = layer.forward(y)
            y = activate(tag, a)
            caches.append((lin_cache, a, y))
        return y, caches

    def backward(self, caches, dy: np.ndarray, accumulate: bool = True) -> np.ndarray:
        for layer, tag, (lin_cache, a, y) in zip(
                reversed(self.layers), reversed(self.spec.activations), reversed(caches)):
            da = activate_backward(tag, a, y, dy)
            dy = layer.backward(lin_cache, da, accumulate=accumulate)
        return dy


def _cosine(a: np.ndarray, b: np.ndarray, na: float, nb: float) -> float:
    # zero-norm convention: cosine of a zero vector is 0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def target_attention(history, target: np.ndarray, heads: int = 1):
    """Cosine target attention: weight_i = softmax_i cos(history_i, target),
    output = sum_i weight_i * history_i, averaged over heads.

    The weights are parameter-free, so every head computes the same value;
    the head count is kept for interface compatibility.
    """
    if heads < 1:
        raise ValueError("heads must be >= 1")
    if len(history) == 0:
        raise DimensionError("target_attention requires non-empty history")
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim != 2 or hist.shape[1] != target.shape[0]:
        raise DimensionError("history entries and target must share one dim")
    hn = np.linalg.norm(hist, axis=1)
    tn = float(np.linalg.norm(target))
    cos = np.array([_cosine(hist[i], target, hn[i], tn) for i in range(len(hist))])
    w = softmax(cos)
    out = w @ hist
    return out, (hist, target, hn, tn, cos, w)


def target_attention_backward(cache, dout: np.ndarray):
    hist, target, hn, tn, cos, w = cache
    dw = hist @ dout
    dhist = np.outer(w, dout)
    dcos = w * (dw - float(w @ dw))
    dtarget = np.zeros_like(target)
    for i in range(len(hist)):
        if hn[i] == 0.0 or tn == 0.0 or dcos[i] == 0.0:
            continue
        dhist[i] += dcos[i] * (target / (hn[i] * tn) - cos[i] * hist[i] / (hn[i] ** 2))
        dtarget += dcos[i] * (hist[i] / (hn[i] * tn) - cos[i] * target / (tn ** 2))
    return dhist, dtarget


def attention_weights(history, target: np.ndarray) -> np.ndarray:
    """Per-head attention weights (nonnegative, sum to 1)."""
    _, cache = target_attention(history, target, heads=1)
    return cache[5]


class FMLayer:
    """Linear projection of concatenated fields plus all pairwise inner products.

    Output = [W @ concat(fields) + b, <v_i, v_j> for i < j].
    """

    def __init__(self, store: ParamStore, prefix: str, n_fields: int, field_dim: int,
                 linear_out: int, rng: np.random.Generator):
        if n_fields < 1:
            raise ValueError("fm_layer requires >= 1 field")
        self.n_fields = n_fields
        self.field_dim = field_dim
        self.linear = Linear(store, prefix + "/lin", n_fields * field_dim, linear_out, rng)
        self.out_dim = linear_out + n_fields * (n_fields - 1) // 2

    def forward(self, fields):
        if len(fields) != self.n_fields:
            raise DimensionError(f"fm expects {self.n_fields} fields, got {len(fields)}")
        for v in fields:
            if v.shape != (self.field_dim,):
                raise DimensionError("inconsistent field lengths")
        cat = np.concatenate(fields)
        lin, lin_cache = self.linear.forward(cat)
        pairs = [float(fields[i] @ fields[j])
                 for i in range(self.n_fields) for j in range(i + 1, self.n_fields)]
        y = np.concatenate([lin, np.array(pairs)])
        return y, (list(fields), lin_cache)

    def backward(self, cache, dy: np.ndarray, accumulate: bool = True):
        fields, lin_cache = cache
        n_lin = self.linear.out_dim
        dcat = self.linear.backward(lin_cache, dy[:n_lin], accumulate=accumulate)
        dfields = [dcat[i * self.field_dim:(i + 1) * self.field_dim].copy()
                   for i in range(self.n_fields)]
        k = n_lin
        for i in range(self.n_fields):
            for j in range(i + 1, self.n_fields):
                dp = dy[k]
                dfields[i] += dp * fields[j]
                dfields[j] += dp * fields[i]
                k += 1
        return dfields


def pairwise_inner_products(fields) -> list[float]:
    """Second-order FM terms alone, in (i, j) lexicographic order."""
    n = len(fields)
    if n < 1:
        raise DimensionError("fm_layer requires >= 1 field")
    return [float(np.asarray(fields[i]) @ np.asarray(fields[j]))
            for i in range(n) for j in range(i + 1, n)]
