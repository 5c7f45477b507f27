"""The two agents: a session-level critic Q(s, a) with cosine target attention
over session history, and an item-level actor emitting a preference vector
that greedily selects candidates by inner product. Includes goal construction
and both reward functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import FeatureSchema, TrainConfig
from .encoders import (
    DeviceSequenceEncoder,
    EmbeddingTable,
    OutraContextEncoder,
    SessionEncoder,
    intra_context,
)
from .layers import (
    DimensionError,
    FMLayer,
    MLP,
    check_finite,
    mlp_spec,
    target_attention,
    target_attention_backward,
)
from .params import ParamStore


class PoolExhaustedError(RuntimeError):
    pass


@dataclass
class HighState:
    """Cloud-side user state: profile u, session-history embeddings, context c^o."""

    u: np.ndarray
    history: list = field(default_factory=list)
    c_o: np.ndarray = None

    def truncated(self, max_len: int) -> "HighState":
        return HighState(self.u, self.history[-max_len:], self.c_o)


@dataclass
class HighAction:
    """Embedding of the recommended session."""

    l: np.ndarray


@dataclass
class LowState:
    """Edge-side state: profile, context, device-feature steps, selected items.

    selected_ids mirrors `selected` with item ids when table training needs them.
    """

    u: np.ndarray
    c_o: np.ndarray
    device_steps: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    selected_ids: list | None = None


@dataclass
class LowAction:
    """Local preference vector used to score candidates."""

    e_hat: np.ndarray


@dataclass
class Goal:
    g: np.ndarray
    source: str = "logged-session"


class CandidatePool:
    """Candidate item ids with embeddings and a selected mask."""

    def __init__(self, item_ids, embeddings: np.ndarray):
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if len(self.item_ids) != len(self.embeddings):
            raise DimensionError("pool ids and embeddings must align")
        self.selected = np.zeros(len(self.item_ids), dtype=bool)

    def __len__(self):
        return len(self.item_ids)

    def n_selected(self) -> int:
        return int(self.selected.sum())

    def mark_selected(self, index: int) -> None:
        self.selected[index] = True


def select_item(action: LowAction, pool: CandidatePool) -> int:
    """Greedy selection: argmax over unselected candidates of e_hat . e;
    ties break to the lowest candidate index. The caller marks the mask."""
    open_idx = np.flatnonzero(~pool.selected)
    if open_idx.size == 0:
        raise PoolExhaustedError("all candidates already selected")
    scores = pool.embeddings[open_idx] @ action.e_hat
    return int(open_idx[int(np.argmax(scores))])


def candidate_scores(action: LowAction, pool: CandidatePool) -> np.ndarray:
    """Scores for every candidate (selected ones too), for inspection."""
    return pool.embeddings @ action.e_hat


class SessionCritic:
    """Q(s^h, a^h): attention over history with the action as target, the
    context vector concatenated with u and c^o, an FM interaction layer, and
    an MLP ending in tanh. Output is in [-1, 1]."""

    def __init__(self, store: ParamStore, cfg: TrainConfig, rng: np.random.Generator):
        L = cfg.L
        self.L = L
        self.heads = cfg.heads
        self.fm = FMLayer(store, "critic/fm", n_fields=3, field_dim=L,
                          linear_out=cfg.fm_linear_out, rng=rng)
        self.mlp = MLP(store, "critic/mlp",
                       mlp_spec(self.fm.out_dim, cfg.critic_hidden, 1,
                                hidden_act="relu", final_act="tanh"), rng)

    def q_with_cache(self, state: HighState, action: HighAction):
        if action.l.shape != (self.L,):
            raise DimensionError("action dim mismatch")
        if state.history:
            att, att_cache = target_attention(state.history, action.l, self.heads)
        else:
            # cold-start users: empty history falls back to a zero context
            att, att_cache = np.zeros(self.L), None
        fields = [att, state.u, state.c_o]
        fm_out, fm_cache = self.fm.forward(fields)
        y, mlp_caches = self.mlp.forward(fm_out)
        q = float(y[0])
        return q, (att_cache, fm_cache, mlp_caches)

    def q(self, state: HighState, action: HighAction) -> float:
        q, _ = self.q_with_cache(state, action)
        check_finite(np.array([q]), "critic_q")
        return q

    def backward(self, cache, dq: float, accumulate: bool = True) -> np.ndarray:
        """Backpropagate dq; returns the gradient with respect to the action."""
        att_cache, fm_cache, mlp_caches = cache
        dfm = self.mlp.backward(mlp_caches, np.array([dq]), accumulate=accumulate)
        datt, _, _ = self.fm.backward(fm_cache, dfm, accumulate=accumulate)
        if att_cache is None:
            return np.zeros(self.L)
        _, dtarget = target_attention_backward(att_cache, datt)
        return dtarget

    def action_grad(self, state: HighState, action: HighAction) -> tuple[float, np.ndarray]:
        q, cache = self.q_with_cache(state, action)
        return q, self.backward(cache, 1.0, accumulate=False)


class ItemActor:
    """pi(s^l): e_hat = MLP(concat(u, c^o, c^i)) where c^i concatenates the
    session encoding of already-selected items with the device-feature GRU
    latent. SRE gradients are blocked during actor updates."""

    def __init__(self, store: ParamStore, cfg: TrainConfig, schema: FeatureSchema,
                 sre: SessionEncoder, rng: np.random.Generator):
        L = cfg.L
        self.L = L
        self.sre = sre
        self.device = DeviceSequenceEncoder(store, "actor/device",
                                            schema.device_families,
                                            cfg.device_feat_dim, cfg.device_latent, rng)
        in_dim = L + L + L + cfg.device_latent
        self.mlp = MLP(store, "actor/mlp",
                       mlp_spec(in_dim, cfg.actor_hidden, L, hidden_act="relu",
                                final_act=cfg.actor_final_act), rng)

    def policy_with_cache(self, state: LowState, with_sre_caches: bool = False):
        if with_sre_caches:
            sre_latent, sre_caches = self.sre.encode_with_caches(state.selected)
        else:
            sre_latent, sre_caches = self.sre.encode(state.selected), None
        dev_latent, dev_caches = self.device.encode_with_caches(state.device_steps)
        c_i = intra_context(sre_latent, dev_latent)
        x = np.concatenate([state.u, state.c_o, c_i])
        e_hat, mlp_caches = self.mlp.forward(x)
        return LowAction(e_hat), (mlp_caches, dev_caches, sre_caches)

    def policy(self, state: LowState) -> LowAction:
        action, _ = self.policy_with_cache(state)
        check_finite(action.e_hat, "actor_policy")
        return action

    def backward(self, cache, d_ehat: np.ndarray, accumulate: bool = True):
        """Backpropagate into actor MLP and device encoder; the SRE slice of
        the input gradient is dropped (back-propagation through SRE blocked),
        and gradients for u / c^o are returned for optional table training."""
        mlp_caches, dev_caches, _ = cache
        dx = self.mlp.backward(mlp_caches, d_ehat, accumulate=accumulate)
        L = self.L
        d_u = dx[:L]
        d_co = dx[L:2 * L]
        d_dev = dx[3 * L:]
        self.device.backward(dev_caches, d_dev, accumulate=accumulate)
        return d_u, d_co

    def backward_full(self, cache, d_ehat: np.ndarray, item_table, selected_ids):
        """Warmup-mode backward: like backward() but also propagates through
        the SRE fold into its parameters and the selected items' embedding rows.
        Requires a cache from policy_with_cache(..., with_sre_caches=True)."""
        mlp_caches, dev_caches, sre_caches = cache
        if sre_caches is None:
            raise ValueError("backward_full needs SRE caches")
        dx = self.mlp.backward(mlp_caches, d_ehat, accumulate=True)
        L = self.L
        d_u = dx[:L]
        d_co = dx[L:2 * L]
        d_sre = dx[2 * L:3 * L]
        d_dev = dx[3 * L:]
        self.device.backward(dev_caches, d_dev, accumulate=True)
        d_items = self.sre.backward(sre_caches, d_sre, accumulate=True)
        for item_id, g in zip(selected_ids, d_items):
            item_table.accumulate_grad(item_id, g)
        return d_u, d_co


@dataclass
class ModelSet:
    """All networks plus their parameter stores, grouped by training ownership:
    encoder_store is frozen during RL (warmup-trained only), actor_store is the
    LRA's trainable set, critic_store the HRA's."""

    cfg: TrainConfig
    schema: FeatureSchema
    encoder_store: ParamStore
    actor_store: ParamStore
    critic_store: ParamStore
    item_table: EmbeddingTable
    user_table: EmbeddingTable
    outra: OutraContextEncoder
    sre: SessionEncoder
    critic: SessionCritic
    actor: ItemActor

    @staticmethod
    def build(cfg: TrainConfig, schema: FeatureSchema, rng: np.random.Generator,
              item_init: np.ndarray | None = None,
              user_init: np.ndarray | None = None) -> "ModelSet":
        encoder_store = ParamStore()
        actor_store = ParamStore()
        critic_store = ParamStore()
        item_table = EmbeddingTable(encoder_store, "item", schema.n_items, cfg.L, rng)
        user_table = EmbeddingTable(encoder_store, "user", schema.n_users, cfg.L, rng)
        if item_init is not None:
            item_table.set_rows(1, item_init)
        if user_init is not None:
            user_table.set_rows(1, user_init)
        outra = OutraContextEncoder(encoder_store, "outra", schema.outra_families,
                                    cfg.L, rng)
        sre = SessionEncoder(encoder_store, "sre", cfg.L, rng,
                             item_space_init=True, gain=cfg.sre_gain)
        critic = SessionCritic(critic_store, cfg, rng)
        actor = ItemActor(actor_store, cfg, schema, sre, rng)
        return ModelSet(cfg, schema, encoder_store, actor_store, critic_store,
                        item_table, user_table, outra, sre, critic, actor)

    def stores(self) -> dict[str, ParamStore]:
        return {"encoder": self.encoder_store, "actor": self.actor_store,
                "critic": self.critic_store}

    def save(self, path_prefix: str) -> None:
        for name, store in self.stores().items():
            store.save(f"{path_prefix}.{name}.npz")


def make_goal(exposed, sre: SessionEncoder, source: str = "logged-session") -> Goal:
    """Goal from an exposed item-embedding sequence (or a ready HighAction):
    the session encoding of what was actually shown."""
    if isinstance(exposed, HighAction):
        return Goal(exposed.l.copy(), source)
    return Goal(sre.encode(exposed), source)


def intrinsic_reward(goal: Goal, action: LowAction) -> float:
    """r^l = -||g - e_hat||_2: closer to the goal is higher, maximum 0."""
    if goal.g.shape != action.e_hat.shape:
        raise DimensionError("goal/action dim mismatch")
    return -float(np.linalg.norm(goal.g - action.e_hat))


def high_reward(clicks, K: int) -> float:
    """r^h = session click-through rate, sum(c)/K in [0, 1]."""
    if len(clicks) != K:
        raise ValueError(f"expected {K} click labels, got {len(clicks)}")
    arr = np.asarray(clicks)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("clicks must be binary")
    return float(arr.sum()) / K


def discounted_return(rewards, gamma: float) -> float:
    if not (0.0 <= gamma < 1.0):
        raise ValueError("gamma must be in [0, 1)")
    total = 0.0
    for i, r in enumerate(rewards):
        total += (gamma ** i) * r
    return total
