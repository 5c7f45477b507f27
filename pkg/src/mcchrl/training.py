"""Actor-critic training: Bellman targets, the critic TD step with an optional
conservative penalty, per-step actor updates driven by the critic's action
gradient plus the goal term, target-network soft updates, the online
edge/cloud loop, the offline log-driven loop, and supervised warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agents import (
    CandidatePool,
    Goal,
    HighAction,
    HighState,
    ItemActor,
    LowAction,
    LowState,
    ModelSet,
    SessionCritic,
    intrinsic_reward,
    select_item,
)
from .config import AblationFlags, TrainConfig
from .layers import softmax
from .params import ParamStore
from .replay import ReplayBuffer, Transition


@dataclass
class TargetNets:
    """Slow-tracking copies of the actor and critic parameters."""

    critic_store: ParamStore
    critic: SessionCritic
    actor_store: ParamStore
    actor: ItemActor

    @staticmethod
    def make(models: ModelSet) -> "TargetNets":
        rng = np.random.default_rng(0)  # values are overwritten by the sync
        critic_store = ParamStore()
        critic = SessionCritic(critic_store, models.cfg, rng)
        critic_store.copy_values_from(models.critic_store)
        actor_store = ParamStore()
        actor = ItemActor(actor_store, models.cfg, models.schema, models.sre, rng)
        actor_store.copy_values_from(models.actor_store)
        return TargetNets(critic_store, critic, actor_store, actor)


def bellman_target(tr: Transition, q_next, gamma: float,
                   reward_scale: float = 1.0, offline: bool = False) -> float:
    """y = r + gamma * Q(s', a'); terminal transitions drop the bootstrap.

    q_next is the target critic's Q online and the live critic's Q offline.
    """
    r = tr.r * reward_scale
    if tr.terminal:
        return r
    if tr.a_next is None:
        mode = "offline" if offline else "online"
        raise ValueError(f"non-terminal {mode} transition missing next action")
    return r + gamma * q_next(tr.s_next, tr.a_next)


def cql_penalty_terms(q_proposals: np.ndarray, q_data: float, alpha: float):
    """Conservative penalty alpha * (softmax-weighted mean of proposal Qs - data Q).

    Returns (penalty, d_penalty/d_q_proposals, d_penalty/d_q_data). Constant Q
    over proposals and data cancels to zero.
    """
    q_proposals = np.asarray(q_proposals, dtype=np.float64)
    if alpha == 0.0 or q_proposals.size == 0:
        return 0.0, np.zeros_like(q_proposals), 0.0
    w = softmax(q_proposals)
    soft_mean = float(w @ q_proposals)
    penalty = alpha * (soft_mean - q_data)
    dq_props = alpha * w * (1.0 + q_proposals - soft_mean)
    return penalty, dq_props, -alpha


def cql_proposals(actor: ItemActor, low_state: LowState, m: int, sigma: float,
                  rng: np.random.Generator) -> list[np.ndarray]:
    """M proposal actions: the policy output plus Gaussian perturbations."""
    base = actor.policy(low_state).e_hat
    out = [base]
    for _ in range(m - 1):
        out.append(base + rng.normal(0.0, sigma, size=base.shape))
    return out


def critic_update(models: ModelSet, batch: list[Transition], cfg: TrainConfig,
                  q_next, cql_rng: np.random.Generator | None = None,
                  offline: bool = False) -> dict:
    """One batch TD step: MSE against Bellman targets at the logged actions,
    plus the conservative penalty when alpha > 0 (offline)."""
    if not batch:
        raise ValueError("empty critic batch")
    n = len(batch)
    scale = cfg.effective_reward_scale
    ys = [bellman_target(tr, q_next, cfg.gamma, scale, offline) for tr in batch]
    qs, caches = [], []
    for tr in batch:
        q, cache = models.critic.q_with_cache(tr.s, tr.a)
        qs.append(q)
        caches.append(cache)
    qs = np.array(qs)
    ys = np.array(ys)
    td_loss = float(np.mean((qs - ys) ** 2))

    models.critic_store.zero_grads()
    for i, tr in enumerate(batch):
        models.critic.backward(caches[i], 2.0 * (qs[i] - ys[i]) / n)

    penalty = 0.0
    if cfg.alpha > 0.0 and cql_rng is not None:
        for i, tr in enumerate(batch):
            if tr.low_state0 is None:
                continue
            proposals = cql_proposals(models.actor, tr.low_state0,
                                      cfg.cql_proposals, cfg.cql_sigma, cql_rng)
            prop_qs, prop_caches = [], []
            for p in proposals:
                q, cache = models.critic.q_with_cache(tr.s, HighAction(p))
                prop_qs.append(q)
                prop_caches.append(cache)
            pen, dq_props, dq_data = cql_penalty_terms(np.array(prop_qs), qs[i],
                                                       cfg.alpha)
            penalty += pen / n
            for cache, dq in zip(prop_caches, dq_props):
                models.critic.backward(cache, dq / n)
            models.critic.backward(caches[i], dq_data / n)

    models.critic_store.adam_step(cfg.lr_critic, l1=cfg.l1, l2=cfg.l2)
    return {"td_loss": td_loss, "cql_penalty": penalty, "mean_q": float(qs.mean())}


def actor_update(actor: ItemActor, actor_store: ParamStore, critic: SessionCritic,
                 s_high: HighState, low_state: LowState, goal: Goal,
                 cfg: TrainConfig, use_critic: bool = True) -> dict:
    """One policy step: ascend the critic's action gradient at a = pi(s^l) and
    descend the squared goal distance (intrinsic term, weight eta_goal)."""
    action, cache = actor.policy_with_cache(low_state)
    if use_critic:
        q, g_a = critic.action_grad(s_high, HighAction(action.e_hat))
    else:
        q, g_a = 0.0, np.zeros_like(action.e_hat)
    d_ehat = -g_a + 2.0 * cfg.eta_goal * (action.e_hat - goal.g)
    actor_store.zero_grads()
    actor.backward(cache, d_ehat)
    actor_store.adam_step(cfg.lr_actor, l1=cfg.l1, l2=cfg.l2)
    return {"q": q, "intrinsic": intrinsic_reward(goal, action)}


@dataclass
class SessionCounters:
    actor_updates: int = 0
    critic_updates: int = 0


class MetricsLog:
    """Per-step training metrics; one JSON-serializable record each."""

    def __init__(self):
        self.records: list[dict] = []

    def append(self, **fields) -> None:
        self.records.append(dict(fields))

    def last(self) -> dict | None:
        return self.records[-1] if self.records else None


class OnlineTrainer:
    """Algorithm-1 style loop: per session a cloud-to-edge sync stage, K
    on-policy low-level steps trained on the edge replica, a delayed
    low-to-high transmission stage, and an off-policy high-level stage."""

    def __init__(self, models: ModelSet, env, cfg: TrainConfig, seed: int,
                 ablation: AblationFlags | None = None, out_dir: str | None = None):
        self.models = models
        self.env = env
        self.cfg = cfg
        self.ablation = ablation or AblationFlags()
        self.out_dir = out_dir
        ss = np.random.SeedSequence([seed, 0xA1])
        order_s, explore_s, buffer_s = ss.spawn(3)
        self.order_rng = np.random.default_rng(order_s)
        self.explore_rng = np.random.default_rng(explore_s)
        self.buffer = ReplayBuffer(cfg.replay_capacity, np.random.default_rng(buffer_s))
        self.targets = TargetNets.make(models)
        # edge replica: the actor copy trained on-device during a session
        self.replica_store = ParamStore()
        self.replica_actor = ItemActor(self.replica_store, cfg, models.schema,
                                       models.sre, np.random.default_rng(0))
        self.replica_store.copy_state_from(models.actor_store)
        # policy download lags like every cloud-to-edge transmission: the edge
        # receives the actor as of ceil(d/K) sessions ago
        self._snapshot_fifo: list[ParamStore] = []
        rows = models.item_table.rows.value
        norms = np.linalg.norm(rows[1:], axis=1)
        self.noise_unit = float(norms.mean()) if len(norms) else 1.0
        self.metrics = MetricsLog()
        self.session_idx = 0
        self.last_session = SessionCounters()
        self._pending: list[tuple[int, Transition]] = []

    # -- helpers -------------------------------------------------------------

    def _sigma(self, total_sessions: int) -> float:
        f = self.session_idx / max(1, total_sessions)
        return (self.cfg.explore_sigma0
                + (self.cfg.explore_sigma1 - self.cfg.explore_sigma0) * min(1.0, f))

    def _embed_sessions(self, id_lists) -> list[np.ndarray]:
        return [self.models.sre.encode(
            [self.models.item_table.lookup(i) for i in ids]) for ids in id_lists]

    def _high_state(self, user: int, state) -> HighState:
        u = self.models.user_table.lookup(user).copy()
        c_o = self.models.outra.encode(state.context)
        hist = self.env.cloud_history_sessions(state)[-self.cfg.history_len:]
        return HighState(u, self._embed_sessions(hist), c_o)

    def _session_goal(self, state) -> Goal:
        """One goal per session: the nearest high-level action the cloud can
        provide, i.e. the embedding of the most recent session fully visible
        under the transmission lag (zero before anything has uploaded)."""
        visible = self.env.cloud_history_sessions(state)
        if not visible:
            return Goal(np.zeros(self.cfg.L), "logged-session")
        return Goal(self.models.sre.encode(
            [self.models.item_table.lookup(i) for i in visible[-1]]),
            "logged-session")

    def _arrival_delay_sessions(self) -> int:
        d = getattr(self.env.cfg, "delay_d", 0)
        return math.ceil(d / self.cfg.K) if d > 0 else 0

    def _flush_due(self) -> None:
        keep = []
        for due, tr in self._pending:
            if due <= self.session_idx:
                self.buffer.push(tr)
            else:
                keep.append((due, tr))
        self._pending = keep

    def _drop_in_flight(self) -> None:
        # the upload queue is at-most-once: transitions still in flight when
        # the user's episode ends are lost
        self._pending = []

    # -- the loop ------------------------------------------------------------

    def train(self, n_sessions: int) -> MetricsLog:
        if n_sessions <= 0:
            return self.metrics
        users = self.env.users()
        order = list(self.order_rng.permutation(users))
        while self.session_idx < n_sessions:
            if not order:
                order = list(self.order_rng.permutation(users))
            user = int(order.pop())
            self._run_episode(user, n_sessions)
        return self.metrics

    def _run_episode(self, user: int, n_sessions: int) -> None:
        env, models, cfg = self.env, self.models, self.cfg
        state = env.reset(user)
        prev = None  # (s_h, a_h, r_h, ended_at)
        for _ in range(cfg.episode_len):
            if self.session_idx >= n_sessions:
                break
            prev = self._run_session(user, state, prev, n_sessions)
        if prev is not None:
            s_h, a_h, r_h, ended_at = prev
            due = ended_at + self._arrival_delay_sessions()
            if due <= self.session_idx:
                self.buffer.push(Transition(s_h, a_h, r_h, s_h, None, terminal=True))
        self._flush_due()
        self._drop_in_flight()

    def _run_session(self, user: int, state, prev, n_sessions: int):
        env, models, cfg = self.env, self.models, self.cfg
        counters = SessionCounters()

        # -- sync stage: cloud -> edge ---------------------------------------
        env.begin_session(state)
        s_h = self._high_state(user, state)
        if prev is not None:
            p_s, p_a, p_r, ended_at = prev
            tr = Transition(p_s, p_a, p_r, s_next=s_h, a_next=None, terminal=False)
            # a^h_{t+1} becomes known at this session's end; finalized below
            self._half_open = (tr, ended_at)
        else:
            self._half_open = None
        lag = self._arrival_delay_sessions()
        self._snapshot_fifo.append(models.actor_store.clone())
        while len(self._snapshot_fifo) > lag + 1:
            self._snapshot_fifo.pop(0)
        self.replica_store.copy_state_from(self._snapshot_fifo[0])
        pool = CandidatePool(
            state.pool_ids,
            np.array([models.item_table.lookup(i) for i in state.pool_ids]))

        # -- low-level on-policy stage ---------------------------------------
        sigma = self._sigma(n_sessions) * self.noise_unit
        goal = self._session_goal(state)
        device_steps: list[dict] = []
        selected_embs: list[np.ndarray] = []
        q_trace = []
        for k in range(cfg.K):
            device_steps.append({} if self.ablation.no_edge
                                else env.device_features(state))
            low = self._low_state(s_h, device_steps, selected_embs)
            action, _ = self.replica_actor.policy_with_cache(low)
            noisy = LowAction(action.e_hat
                              + sigma * self.explore_rng.normal(size=cfg.L))
            idx = select_item(noisy, pool)
            pool.mark_selected(idx)
            item_id = int(pool.item_ids[idx])
            env.step(state, item_id)
            selected_embs.append(models.item_table.lookup(item_id).copy())
            if not self.ablation.no_actor:
                low = self._low_state(s_h, device_steps, selected_embs[:-1])
                stats = actor_update(self.replica_actor, self.replica_store,
                                     models.critic, s_h, low, goal, cfg,
                                     use_critic=not self.ablation.no_critic)
                q_trace.append(stats["q"])
                counters.actor_updates += 1

        # -- transmission stage: edge -> cloud (with latency) -----------------
        clicks, r_h, _ = env.end_session(state)
        models.actor_store.copy_state_from(self.replica_store)
        self.targets.actor_store.soft_update_from(models.actor_store, cfg.tau)
        a_h = HighAction(models.sre.encode(selected_embs))
        if self._half_open is not None:
            tr, ended_at = self._half_open
            tr.a_next = a_h
            due = max(self.session_idx, ended_at + self._arrival_delay_sessions())
            self._pending.append((due, tr))
            self._half_open = None
        self._flush_due()

        # -- high-level off-policy stage --------------------------------------
        step_metrics = {"td_loss": None, "cql_penalty": 0.0, "mean_q": None}
        if (len(self.buffer) > cfg.batch_size
                and not self.ablation.no_critic
                and self.session_idx % cfg.critic_update_every == 0):
            batch = self.buffer.sample(cfg.batch_size)
            step_metrics = critic_update(
                models, batch, cfg,
                q_next=lambda s, a: self.targets.critic.q(s, a))
            self.targets.critic_store.soft_update_from(models.critic_store, cfg.tau)
            counters.critic_updates += 1

        self.metrics.append(
            step=self.session_idx, td_loss=step_metrics["td_loss"],
            cql_penalty=step_metrics["cql_penalty"],
            actor_objective=(float(np.mean(q_trace)) if q_trace else None),
            mean_q=step_metrics["mean_q"])
        self.last_session = counters
        self.session_idx += 1
        if (self.cfg.checkpoint_every and self.out_dir
                and self.session_idx % self.cfg.checkpoint_every == 0):
            self.models.save(f"{self.out_dir}/ckpt_{self.session_idx}")
        return (s_h, a_h, r_h, self.session_idx - 1)

    def _low_state(self, s_h: HighState, device_steps, selected_embs) -> LowState:
        selected = [] if self.ablation.no_edge else [e.copy() for e in selected_embs]
        return LowState(u=s_h.u, c_o=s_h.c_o,
                        device_steps=list(device_steps), selected=selected)


class OfflineTrainer:
    """Algorithm-2 style loop over session log lines: push the line's
    transition, take a conservative critic step when the buffer is warm, then
    run the K edge-stage actor steps against the logged items.

    use_critic=False drops the cloud stage entirely and trains the actor on
    the intrinsic goal term alone (the critic-less ablation)."""

    def __init__(self, models: ModelSet, cfg: TrainConfig, seed: int,
                 use_critic: bool = True):
        self.models = models
        self.cfg = cfg
        self.use_critic = use_critic
        ss = np.random.SeedSequence([seed, 0xF2])
        buffer_s, cql_s = ss.spawn(2)
        self.buffer = ReplayBuffer(cfg.replay_capacity, np.random.default_rng(buffer_s))
        self.cql_rng = np.random.default_rng(cql_s)
        self.metrics = MetricsLog()
        self.skipped = 0
        self._session_emb_cache: dict = {}

    def _embed_ids(self, ids) -> np.ndarray:
        key = tuple(ids)
        hit = self._session_emb_cache.get(key)
        if hit is None:
            hit = self.models.sre.encode(
                [self.models.item_table.lookup(i) for i in ids])
            self._session_emb_cache[key] = hit
        return hit

    def transition_from_record(self, rec) -> Transition:
        m = self.models
        cfg = self.cfg
        u = m.user_table.lookup(rec.user).copy()
        c_o = m.outra.encode(rec.context)
        s = HighState(u, [self._embed_ids(h) for h in rec.history[-cfg.history_len:]],
                      c_o)
        a = HighAction(self._embed_ids(rec.exposed))
        s_next = HighState(
            u, [self._embed_ids(h) for h in rec.next_history[-cfg.history_len:]],
            m.outra.encode(rec.next_context))
        terminal = rec.next_exposed is None
        a_next = None if terminal else HighAction(self._embed_ids(rec.next_exposed))
        low0 = LowState(u, c_o, device_steps=[rec.steps[0]["m"]] if rec.steps else [],
                        selected=[])
        return Transition(s, a, rec.r, s_next, a_next, terminal, low_state0=low0)

    def train(self, records, epochs: int | None = None) -> MetricsLog:
        cfg = self.cfg
        m = self.models
        line_idx = 0
        for _ in range(epochs if epochs is not None else cfg.epochs):
            for rec in records:
                try:
                    tr = self.transition_from_record(rec)
                except (KeyError, IndexError, ValueError):
                    self.skipped += 1
                    continue
                self.buffer.push(tr)
                line_idx += 1

                # cloud training stage
                if (self.use_critic and len(self.buffer) > cfg.batch_size
                        and line_idx % cfg.critic_update_every == 0):
                    batch = self.buffer.sample(cfg.batch_size)
                    stats = critic_update(
                        m, batch, cfg,
                        q_next=lambda s, a: m.critic.q(s, a),
                        cql_rng=self.cql_rng if cfg.alpha > 0 else None,
                        offline=True)
                    self.metrics.append(step=line_idx, **stats,
                                        actor_objective=None)

                # edge training stage: replay the session's own steps
                goal = Goal(tr.a.l, "logged-session")
                for k in range(len(rec.exposed)):
                    low = LowState(
                        tr.s.u, tr.s.c_o,
                        device_steps=[s["m"] for s in rec.steps[:k + 1]],
                        selected=[m.item_table.lookup(i).copy()
                                  for i in rec.exposed[:k]])
                    actor_update(m.actor, m.actor_store, m.critic, tr.s, low,
                                 goal, cfg, use_critic=self.use_critic)
        return self.metrics


def supervised_warmup(models: ModelSet, records, epochs: int, cfg: TrainConfig,
                      rng: np.random.Generator) -> dict:
    """Click-label warmup: binary cross-entropy of sigmoid(e_hat . e_k) against
    the logged clicks; trains the actor and the shared encoders (SRE included).
    Zero epochs is an exact no-op."""
    m = models
    total_bce, count = 0.0, 0
    for _ in range(epochs):
        total_bce, count = 0.0, 0
        order = rng.permutation(len(records))
        for ridx in order:
            rec = records[ridx]
            for k in range(len(rec.exposed)):
                prefix = rec.exposed[:k]
                low = LowState(
                    u=m.user_table.lookup(rec.user).copy(),
                    c_o=m.outra.encode(rec.context),
                    device_steps=[s["m"] for s in rec.steps[:k + 1]],
                    selected=[m.item_table.lookup(i).copy() for i in prefix],
                    selected_ids=list(prefix))
                action, cache = m.actor.policy_with_cache(low, with_sre_caches=True)
                e_k = m.item_table.lookup(rec.exposed[k])
                logit = float(action.e_hat @ e_k)
                p = 1.0 / (1.0 + np.exp(-logit))
                c = rec.clicks[k]
                eps = 1e-12
                total_bce -= c * np.log(p + eps) + (1 - c) * np.log(1 - p + eps)
                count += 1
                dlogit = p - c
                m.item_table.accumulate_grad(rec.exposed[k], dlogit * action.e_hat)
                d_u, d_co = m.actor.backward_full(cache, dlogit * e_k,
                                                  m.item_table, prefix)
                m.user_table.accumulate_grad(rec.user, d_u)
                m.outra.accumulate_grad(rec.context, d_co)
            m.actor_store.adam_step(cfg.lr_actor, l1=cfg.l1, l2=cfg.l2)
            m.encoder_store.adam_step(cfg.lr_actor, l1=cfg.l1, l2=cfg.l2)
    return {"bce": (total_bce / count) if count else 0.0}
