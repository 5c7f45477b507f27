"""MovieLens-driven interactive user simulator with an explicit edge/cloud
split: a matrix-factorization rating oracle (nearest rated pair by cosine over
concatenated user/item embeddings), edge-only feature masking, and a cloud
view of the interaction sequence that lags the edge view by d items."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .config import SimConfig
from .dataio import EDGE_ONLY_USER_FEATURES, movielens_device_features


def pretrain_mf(records, dim: int, epochs: int, rng: np.random.Generator,
                lr: float = 0.015, reg: float = 0.05, holdout_fraction: float = 0.1):
    """SGD matrix factorization minimizing sum (r - p.q)^2 + reg * norms.

    Returns (P, Q, holdout_rmse) with rows 1..n; row 0 is zero (OOV).
    """
    if not records:
        raise ValueError("pretrain_mf requires ratings")
    users = np.array([r.user for r in records])
    items = np.array([r.item for r in records])
    ratings = np.array([float(r.rating) for r in records])
    n_users = int(users.max())
    n_items = int(items.max())
    perm = rng.permutation(len(records))
    n_hold = int(len(records) * holdout_fraction)
    hold, train = perm[:n_hold], perm[n_hold:]

    P = rng.normal(0.0, 0.1, size=(n_users + 1, dim))
    Q = rng.normal(0.0, 0.1, size=(n_items + 1, dim))
    P[0] = 0.0
    Q[0] = 0.0
    for _ in range(epochs):
        order = rng.permutation(train)
        for idx in order:
            u, i, r = users[idx], items[idx], ratings[idx]
            p, q = P[u], Q[i]
            e = r - p @ q
            p_old = p.copy()
            p += lr * (e * q - reg * p)
            q += lr * (e * p_old - reg * q)
    if n_hold:
        pred = np.einsum("ij,ij->i", P[users[hold]], Q[items[hold]])
        rmse = float(np.sqrt(np.mean((ratings[hold] - pred) ** 2)))
    else:
        pred = np.einsum("ij,ij->i", P[users[train]], Q[items[train]])
        rmse = float(np.sqrt(np.mean((ratings[train] - pred) ** 2)))
    return P, Q, rmse


def load_or_pretrain_mf(records, dim: int, epochs: int, seed: int,
                        lr: float = 0.015, reg: float = 0.05,
                        cache_path: str | None = None):
    if cache_path and os.path.exists(cache_path):
        with np.load(cache_path) as data:
            return data["P"], data["Q"], float(data["rmse"][0])
    P, Q, rmse = pretrain_mf(records, dim, epochs, np.random.default_rng(seed),
                             lr=lr, reg=reg)
    if cache_path:
        os.makedirs(os.path.dirname(cache_path) or ".", exist_ok=True)
        np.savez(cache_path, P=P, Q=Q, rmse=np.array([rmse]))
    return P, Q, rmse


class RatingOracle:
    """Deterministic, total rating function over the user x item grid.

    Rated pairs return their dataset rating; unrated pairs return the rating
    of the rated pair (u', i') maximizing cosine(concat(p_u, q_i),
    concat(p_u', q_i')). The search is exact over all rated pairs (vectorized
    argmax; the query norm is constant and cannot change the argmax).
    """

    def __init__(self, records, P: np.ndarray, Q: np.ndarray):
        self.P = P
        self.Q = Q
        self.rated = {(r.user, r.item): float(r.rating) for r in records}
        self.pair_users = np.array([r.user for r in records])
        self.pair_items = np.array([r.item for r in records])
        self.pair_ratings = np.array([float(r.rating) for r in records])
        norms = np.sqrt(
            np.einsum("ij,ij->i", P[self.pair_users], P[self.pair_users])
            + np.einsum("ij,ij->i", Q[self.pair_items], Q[self.pair_items]))
        self._inv_norms = 1.0 / np.maximum(norms, 1e-12)
        self._memo: dict = {}
        self.mean_rating = float(self.pair_ratings.mean())

    def reward(self, user: int, item: int) -> float:
        key = (user, item)
        hit = self.rated.get(key)
        if hit is not None:
            return hit
        memo = self._memo.get(key)
        if memo is not None:
            return memo
        du = self.P @ self.P[user]
        di = self.Q @ self.Q[item]
        scores = (du[self.pair_users] + di[self.pair_items]) * self._inv_norms
        value = float(self.pair_ratings[int(np.argmax(scores))])
        self._memo[key] = value
        return value

    def reward_brute_force(self, user: int, item: int, limit: int | None = None) -> float:
        """Python-loop exhaustive scan (test oracle for the vectorized search)."""
        hit = self.rated.get((user, item))
        if hit is not None:
            return hit
        a = np.concatenate([self.P[user], self.Q[item]])
        na = np.linalg.norm(a)
        best, best_val = -np.inf, None
        n = len(self.pair_users) if limit is None else min(limit, len(self.pair_users))
        for j in range(n):
            b = np.concatenate([self.P[self.pair_users[j]], self.Q[self.pair_items[j]]])
            cos = float(a @ b) / (na * max(np.linalg.norm(b), 1e-12))
            if cos > best:
                best, best_val = cos, float(self.pair_ratings[j])
        return best_val


@dataclass
class SimState:
    """One user's episode state; the interaction history is append-only."""

    user: int
    k: int = 0
    t: int = 0
    exposed: list = field(default_factory=list)
    history: list = field(default_factory=list)       # per-session id lists
    interactions: list = field(default_factory=list)  # flat edge-side records
    pool_ids: np.ndarray | None = None
    context: dict | None = None
    session_open: bool = False


class DuplicateItemError(ValueError):
    pass


class MovieLensSimulator:
    """Interactive environment over the rating oracle. All stochastic choices
    (session clock, candidate pools) come from the simulator's own seeded rng;
    re-seeding reproduces rollouts exactly."""

    def __init__(self, oracle: RatingOracle, user_features: dict, cfg: SimConfig,
                 K: int, n_items: int, rng: np.random.Generator):
        self.oracle = oracle
        self.user_features = user_features
        self.cfg = cfg
        self.K = K
        self.n_items = n_items
        self.rng = rng
        self.edge_mask = set(EDGE_ONLY_USER_FEATURES)

    def users(self) -> list[int]:
        return sorted(self.user_features)

    def reset(self, user: int) -> SimState:
        return SimState(user=user)

    def begin_session(self, state: SimState) -> None:
        if state.session_open:
            raise RuntimeError("previous session not ended")
        day = int(self.rng.integers(0, 7))
        state.context = {"hour": int(self.rng.integers(0, 24)), "day": day,
                         "workday": int(day < 5)}
        seen = {i for s in state.history for i in s}
        open_items = np.array([i for i in range(1, self.n_items + 1) if i not in seen])
        size = min(self.cfg.pool_size, len(open_items))
        # pool keeps its sampled order: a sorted pool would alias the spec'd
        # lowest-index tie-break with catalog id order
        state.pool_ids = self.rng.choice(open_items, size=size, replace=False)
        state.exposed = []
        state.k = 0
        state.session_open = True

    def device_features(self, state: SimState) -> dict:
        return movielens_device_features(self.user_features[state.user])

    def step(self, state: SimState, item: int) -> SimState:
        if not state.session_open:
            raise RuntimeError("step outside a session")
        if state.k >= self.K:
            raise RuntimeError("step after session end")
        if item in state.exposed:
            raise DuplicateItemError(f"item {item} already exposed this session")
        state.exposed.append(int(item))
        state.k += 1
        return state

    def end_session(self, state: SimState):
        if not state.session_open:
            raise RuntimeError("no open session")
        if state.k != self.K:
            raise RuntimeError(f"session ended at {state.k} of {self.K} items")
        ratings = [self.oracle.reward(state.user, i) for i in state.exposed]
        clicks = [int(r >= self.cfg.click_threshold) for r in ratings]
        r_h = float(np.mean(clicks))
        feat = self.user_features[state.user]
        for item in state.exposed:
            state.interactions.append({
                "item": int(item), "session": state.t,
                "occupation": feat.occupation, "zip_code": feat.zip_code})
        state.history.append(list(state.exposed))
        state.t += 1
        state.session_open = False
        return clicks, r_h, ratings

    def edge_view(self, state: SimState) -> list[dict]:
        """Full on-device interaction sequence, edge features included."""
        return [dict(rec) for rec in state.interactions]

    def cloud_view(self, state: SimState, d: int | None = None) -> list[dict]:
        """Cloud copy: lags the edge sequence by d items, masked features removed."""
        if d is None:
            d = self.cfg.delay_d
        if d < 0:
            raise ValueError("delay must be >= 0")
        visible = state.interactions[:max(0, len(state.interactions) - d)]
        return [{k: v for k, v in rec.items() if k not in self.edge_mask}
                for rec in visible]

    def cloud_history_sessions(self, state: SimState, d: int | None = None) -> list[list[int]]:
        """Past sessions fully visible to the cloud under the d-item lag."""
        if d is None:
            d = self.cfg.delay_d
        visible_items = len(state.interactions) - d
        full = max(0, visible_items) // self.K
        return [list(s) for s in state.history[:full]]
