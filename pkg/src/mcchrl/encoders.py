"""Embedding tables and sequence encoders: item/user lookups, feature-family
context encodings, the session recurrent encoder (a GRU fold over item
embeddings), and the on-device feature GRU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import DimensionError, GRUCell
from .params import ParamStore, uniform_init


class EmbeddingTable:
    """Fixed-vocabulary lookup table; row 0 is the reserved out-of-vocabulary row."""

    def __init__(self, store: ParamStore, prefix: str, size: int, dim: int,
                 rng: np.random.Generator):
        if size < 1:
            raise ValueError("vocabulary size must be >= 1")
        self.size = size
        self.dim = dim
        self.rows = store.add(prefix + "/rows", uniform_init(rng, (size, dim), dim))

    def set_rows(self, start: int, values: np.ndarray) -> None:
        self.rows.value[start:start + len(values)] = values

    def _row_index(self, idx: int) -> int:
        if idx < 0:
            raise ValueError(f"negative embedding id: {idx}")
        return idx if idx < self.size else 0

    def lookup(self, idx: int) -> np.ndarray:
        return self.rows.value[self._row_index(idx)]

    def accumulate_grad(self, idx: int, g: np.ndarray) -> None:
        self.rows.grad[self._row_index(idx)] += g


@dataclass
class ContextFeatures:
    """Raw spatiotemporal and on-device features; categorical ids, stay_time >= 0."""

    hour: int = 0
    day: int = 0
    workday: int = 0
    location_id: int | None = None
    app_id: int | None = None
    stay_time: float | None = None
    district_id: int | None = None

    def __post_init__(self):
        if self.stay_time is not None and self.stay_time < 0:
            raise ValueError("stay_time must be >= 0")

    def outra_dict(self) -> dict:
        d = {"hour": self.hour, "day": self.day, "workday": self.workday}
        if self.location_id is not None:
            d["location"] = self.location_id
        return d

    def device_dict(self, stay_buckets: int = 16) -> dict:
        d = {}
        if self.app_id is not None:
            d["app"] = self.app_id
        if self.stay_time is not None:
            d["stay"] = bucketize_stay_time(self.stay_time, stay_buckets)
        if self.district_id is not None:
            d["district"] = self.district_id
        return d


def bucketize_stay_time(stay: float, buckets: int = 16) -> int:
    if stay < 0:
        raise ValueError("stay_time must be >= 0")
    return min(int(math.log2(1.0 + stay)), buckets - 1)


class FeatureFamilyEmbedder:
    """One embedding table per feature family; a feature dict encodes to the
    sum of the selected rows (additive combination keeps the output at `dim`)."""

    def __init__(self, store: ParamStore, prefix: str, families: dict[str, int],
                 dim: int, rng: np.random.Generator):
        self.dim = dim
        self.tables = {
            name: EmbeddingTable(store, f"{prefix}/{name}", size, dim, rng)
            for name, size in families.items()
        }

    def encode(self, features: dict) -> np.ndarray:
        out = np.zeros(self.dim)
        for name, idx in features.items():
            out += self.tables[name].lookup(idx)
        return out

    def accumulate_grad(self, features: dict, g: np.ndarray) -> None:
        for name, idx in features.items():
            self.tables[name].accumulate_grad(idx, g)


@dataclass
class SessionState:
    """Running session embedding with its length-so-far."""

    vector: np.ndarray
    k: int = 0


class SessionEncoder:
    """Session recurrent encoder: left GRU fold over item embeddings starting
    from the zero vector; the latent state is the session embedding."""

    def __init__(self, store: ParamStore, prefix: str, dim: int,
                 rng: np.random.Generator, item_space_init: bool = True,
                 gain: float = 1.0, max_len: int | None = None):
        self.dim = dim
        self.max_len = max_len
        self.cell = GRUCell(store, prefix, dim, dim, rng,
                            item_space_init=item_space_init, gain=gain)

    def initial(self) -> SessionState:
        return SessionState(np.zeros(self.dim), 0)

    def step(self, state: SessionState, e: np.ndarray) -> SessionState:
        if self.max_len is not None and state.k >= self.max_len:
            raise ValueError(f"session already at max length {self.max_len}")
        vec, _ = self.cell.forward(state.vector, e)
        return SessionState(vec, state.k + 1)

    def encode(self, items) -> np.ndarray:
        """Fold over an item-embedding sequence; empty sequence encodes to zero."""
        h = np.zeros(self.dim)
        for e in items:
            h, _ = self.cell.forward(h, e)
        return h

    def encode_with_caches(self, items):
        h = np.zeros(self.dim)
        caches = []
        for e in items:
            h, c = self.cell.forward(h, e)
            caches.append(c)
        return h, caches

    def backward(self, caches, dh: np.ndarray, accumulate: bool = True):
        """Backpropagate through the fold; returns gradients for each input item."""
        d_items = [None] * len(caches)
        for i in reversed(range(len(caches))):
            dh, dx = self.cell.backward(caches[i], dh, accumulate=accumulate)
            d_items[i] = dx
        return d_items


class DeviceSequenceEncoder:
    """On-device feature sequence encoder: feature-family embeddings per step,
    folded by a dedicated GRU; empty sequence encodes to zero."""

    def __init__(self, store: ParamStore, prefix: str, families: dict[str, int],
                 feat_dim: int, latent_dim: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.embedder = FeatureFamilyEmbedder(store, prefix + "/feat", families,
                                              feat_dim, rng)
        self.cell = GRUCell(store, prefix + "/gru", feat_dim, latent_dim, rng)

    def encode(self, steps) -> np.ndarray:
        h = np.zeros(self.latent_dim)
        for feats in steps:
            x = self.embedder.encode(_as_device_dict(feats))
            h, _ = self.cell.forward(h, x)
        return h

    def encode_with_caches(self, steps):
        h = np.zeros(self.latent_dim)
        caches = []
        for feats in steps:
            d = _as_device_dict(feats)
            x = self.embedder.encode(d)
            h, c = self.cell.forward(h, x)
            caches.append((d, c))
        return h, caches

    def backward(self, caches, dh: np.ndarray, accumulate: bool = True) -> None:
        for d, c in reversed(caches):
            dh, dx = self.cell.backward(c, dh, accumulate=accumulate)
            if accumulate:
                self.embedder.accumulate_grad(d, dx)


def _as_device_dict(feats) -> dict:
    if isinstance(feats, ContextFeatures):
        return feats.device_dict()
    return feats


class OutraContextEncoder:
    """Outra-session context c^o: additive feature-family encoding at dim L."""

    def __init__(self, store: ParamStore, prefix: str, families: dict[str, int],
                 dim: int, rng: np.random.Generator):
        self.dim = dim
        self.embedder = FeatureFamilyEmbedder(store, prefix, families, dim, rng)

    def encode(self, features) -> np.ndarray:
        if isinstance(features, ContextFeatures):
            features = features.outra_dict()
        return self.embedder.encode(features)

    def accumulate_grad(self, features, g: np.ndarray) -> None:
        if isinstance(features, ContextFeatures):
            features = features.outra_dict()
        self.embedder.accumulate_grad(features, g)


def intra_context(sre_latent: np.ndarray, device_latent: np.ndarray) -> np.ndarray:
    """Intra-session context: concatenation [session latent, device latent]."""
    return np.concatenate([sre_latent, device_latent])
