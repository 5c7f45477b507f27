"""Evaluation metrics (session rating, click AUC), the random baseline,
ablation runs, sensitivity sweeps, and report serialization."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .agents import (
    CandidatePool,
    HighAction,
    LowAction,
    LowState,
    ModelSet,
    select_item,
)
from .config import (
    AblationFlags,
    RunConfig,
    SIMULATOR_DEVICE_FAMILIES,
    SIMULATOR_OUTRA_FAMILIES,
    FeatureSchema,
    fingerprint,
    synth_schema,
)
from .dataio import load_movielens, synth_sessions
from .envsim import MovieLensSimulator, RatingOracle, load_or_pretrain_mf
from .training import OfflineTrainer, OnlineTrainer, supervised_warmup


class UndefinedMetricError(ValueError):
    pass


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mid-rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    sorted_x = x[order]
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(scores, labels) -> float:
    """ROC AUC via the rank statistic with tie mid-ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined for single-class labels")
    ranks = _midranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise_oracle(scores, labels) -> float:
    """O(n^2) pairwise-comparison AUC (ties count half); test oracle."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC undefined for single-class labels")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


@dataclass
class MetricsReport:
    metric: str
    mean: float
    stderr: float
    rounds: int
    fingerprint: str
    extra: dict | None = None

    def to_json(self) -> str:
        d = {"metric": self.metric, "mean": self.mean, "stderr": self.stderr,
             "rounds": self.rounds, "fingerprint": self.fingerprint}
        if self.extra:
            d["extra"] = self.extra
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def make_report(metric: str, values, config, extra: dict | None = None) -> MetricsReport:
    values = np.asarray(values, dtype=np.float64)
    rounds = len(values)
    mean = float(values.mean()) if rounds else 0.0
    # stderr undefined for a single round: reported as 0 with rounds=1 flag
    stderr = float(values.std(ddof=1) / np.sqrt(rounds)) if rounds > 1 else 0.0
    return MetricsReport(metric, mean, stderr, rounds, fingerprint(config), extra)


def write_report(report: MetricsReport, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name + ".json")
    with open(path, "w") as f:
        f.write(report.to_json() + "\n")
    return path


def write_curve_csv(path: str, header, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


# -- simulator experiment drivers ---------------------------------------------


def simulator_feature_schema(n_users: int, n_items: int) -> FeatureSchema:
    return FeatureSchema(n_users=n_users + 1, n_items=n_items + 1,
                         outra_families=dict(SIMULATOR_OUTRA_FAMILIES),
                         device_families=dict(SIMULATOR_DEVICE_FAMILIES))


class SimulatorBundle:
    """Shared, immutable simulator fixtures: ratings, MF embeddings, oracle."""

    def __init__(self, run_cfg: RunConfig, cache_dir: str | None = None):
        records, user_features, _ = load_movielens(run_cfg.ml100k_dir)
        self.records = records
        self.user_features = user_features
        self.n_users = max(r.user for r in records)
        self.n_items = max(r.item for r in records)
        sim = run_cfg.simulator
        dim = run_cfg.train.L
        cache = (os.path.join(cache_dir, f"mf_d{dim}_e{sim.mf_epochs}_s0.npz")
                 if cache_dir else None)
        self.P, self.Q, self.mf_rmse = load_or_pretrain_mf(
            records, dim=dim, epochs=sim.mf_epochs, seed=0,
            lr=sim.mf_lr, reg=sim.mf_reg, cache_path=cache)
        self.oracle = RatingOracle(records, self.P, self.Q)
        self.schema = simulator_feature_schema(self.n_users, self.n_items)
        # the agent sees centered item directions at a common norm: embedding
        # norm and the mean item direction are oracle artifacts correlated
        # with global mean rating, and leaving either in hands every constant
        # policy a popularity shortcut (centering shifts every candidate score
        # by a per-query constant, so greedy selection order is unchanged)
        Qn = self.Q[1:].copy()
        Qn -= Qn.mean(axis=0)
        norms = np.linalg.norm(Qn, axis=1, keepdims=True)
        scale = float(np.linalg.norm(self.Q[1:], axis=1).mean())
        self.agent_item_rows = Qn / np.maximum(norms, 1e-12) * scale

    def make_env(self, run_cfg: RunConfig, seed: int, delay: int | None = None,
                 users: list | None = None) -> MovieLensSimulator:
        sim_cfg = run_cfg.simulator
        if delay is not None:
            sim_cfg = type(sim_cfg)(**{**sim_cfg.__dict__, "delay_d": delay})
        feats = self.user_features
        if users is not None:
            feats = {u: f for u, f in feats.items() if u in users}
        return MovieLensSimulator(self.oracle, feats, sim_cfg,
                                  K=run_cfg.train.K, n_items=self.n_items,
                                  rng=np.random.default_rng(seed))

    def build_models(self, run_cfg: RunConfig, seed: int) -> ModelSet:
        # user rows stay at random init: the taste signal must come from the
        # user's own interaction history, not from oracle embeddings
        return ModelSet.build(run_cfg.train, self.schema,
                              np.random.default_rng(seed),
                              item_init=self.agent_item_rows, user_init=None)


def train_simulator_policy(bundle: SimulatorBundle, run_cfg: RunConfig, seed: int,
                           ablation: AblationFlags | None = None,
                           delay: int | None = None):
    """One full online training run; returns (models, trainer)."""
    env = bundle.make_env(run_cfg, seed=seed + 1000, delay=delay)
    models = bundle.build_models(run_cfg, seed)
    trainer = OnlineTrainer(models, env, run_cfg.train, seed=seed,
                            ablation=ablation)
    trainer.train(run_cfg.train.train_sessions)
    return models, trainer


def _actor_session(models: ModelSet, env, state, ablation: AblationFlags) -> list:
    """Roll one session with the deterministic actor; returns oracle ratings."""
    env.begin_session(state)
    u = models.user_table.lookup(state.user).copy()
    c_o = models.outra.encode(state.context)
    pool = CandidatePool(state.pool_ids,
                         np.array([models.item_table.lookup(i)
                                   for i in state.pool_ids]))
    device_steps: list = []
    selected: list = []
    for _ in range(env.K):
        device_steps.append({} if ablation.no_edge else env.device_features(state))
        low = LowState(u, c_o, list(device_steps),
                       [] if ablation.no_edge else [e.copy() for e in selected])
        action = models.actor.policy(low)
        idx = select_item(action, pool)
        pool.mark_selected(idx)
        item = int(pool.item_ids[idx])
        env.step(state, item)
        selected.append(models.item_table.lookup(item).copy())
    _, _, ratings = env.end_session(state)
    return ratings


def _random_session(env, state, rng) -> list:
    env.begin_session(state)
    pool = list(state.pool_ids)
    for _ in range(env.K):
        choices = [i for i in pool if i not in state.exposed]
        env.step(state, int(rng.choice(choices)))
    _, _, ratings = env.end_session(state)
    return ratings


def _argmax_q_session(models: ModelSet, env, state) -> list:
    """wo-actor selection: per candidate, complete the running session encoding
    with that candidate and pick argmax Q(s^h, candidate-completed session)."""
    env.begin_session(state)
    u = models.user_table.lookup(state.user).copy()
    c_o = models.outra.encode(state.context)
    hist_ids = env.cloud_history_sessions(state)[-models.cfg.history_len:]
    history = [models.sre.encode([models.item_table.lookup(i) for i in ids])
               for ids in hist_ids]
    from .agents import HighState

    s_h = HighState(u, history, c_o)
    pool_ids = list(state.pool_ids)
    latent = np.zeros(models.cfg.L)
    for _ in range(env.K):
        best_item, best_q, best_latent = None, -np.inf, None
        for item in pool_ids:
            if item in state.exposed:
                continue
            cand_latent, _ = models.sre.cell.forward(
                latent, models.item_table.lookup(item))
            q = models.critic.q(s_h, HighAction(cand_latent))
            if q > best_q:
                best_item, best_q, best_latent = item, q, cand_latent
        env.step(state, best_item)
        latent = best_latent
    _, _, ratings = env.end_session(state)
    return ratings


def eval_srating(models: ModelSet | None, bundle: SimulatorBundle,
                 run_cfg: RunConfig, rounds: int, seed: int,
                 policy: str = "actor",
                 ablation: AblationFlags | None = None,
                 delay: int | None = None,
                 report_config=None) -> MetricsReport:
    """S-rating: `rounds` independent passes over all users, one session each;
    per session the oracle ratings of the K selections are averaged."""
    ablation = ablation or AblationFlags()
    round_means = []
    for rnd in range(rounds):
        env = bundle.make_env(run_cfg, seed=_round_seed(seed, rnd), delay=delay)
        rng = np.random.default_rng(_round_seed(seed, rnd) + 7)
        ratings_all = []
        for user in env.users():
            state = env.reset(user)
            if policy == "actor":
                ratings = _actor_session(models, env, state, ablation)
            elif policy == "random":
                ratings = _random_session(env, state, rng)
            elif policy == "argmax_q":
                ratings = _argmax_q_session(models, env, state)
            else:
                raise ValueError(f"unknown policy: {policy}")
            ratings_all.extend(ratings)
        round_means.append(float(np.mean(ratings_all)))
    return make_report(f"s_rating/{policy}", round_means,
                       report_config if report_config is not None else run_cfg)


def _round_seed(seed: int, rnd: int) -> int:
    return int(np.random.SeedSequence([seed, rnd]).generate_state(1)[0] % (2**31))


def baseline_random(bundle: SimulatorBundle, run_cfg: RunConfig, rounds: int,
                    seed: int, report_config=None) -> MetricsReport:
    return eval_srating(None, bundle, run_cfg, rounds, seed, policy="random",
                        report_config=report_config)


# -- dataset experiment drivers -----------------------------------------------


def actor_click_scores(models: ModelSet, records) -> tuple[np.ndarray, np.ndarray]:
    """Score every logged (state, item) step with e_hat . e; labels are clicks."""
    scores, labels = [], []
    for rec in records:
        u = models.user_table.lookup(rec.user).copy()
        c_o = models.outra.encode(rec.context)
        for k in range(len(rec.exposed)):
            low = LowState(u, c_o,
                           device_steps=[s["m"] for s in rec.steps[:k + 1]],
                           selected=[models.item_table.lookup(i).copy()
                                     for i in rec.exposed[:k]])
            e_hat = models.actor.policy(low).e_hat
            scores.append(float(e_hat @ models.item_table.lookup(rec.exposed[k])))
            labels.append(rec.clicks[k])
    return np.array(scores), np.array(labels)


def eval_auc(models: ModelSet, records, report_config) -> MetricsReport:
    scores, labels = actor_click_scores(models, records)
    value = auc_score(scores, labels)
    return make_report("d_auc", [value], report_config)


def run_dataset_experiment(run_cfg: RunConfig, seed: int | None = None) -> dict:
    """Synthetic-log offline pipeline: generate, warmup, Algorithm-2 train,
    evaluate AUC on the held-out tail of each user's sessions."""
    seed = run_cfg.seed if seed is None else seed
    synth = run_cfg.synth
    records, _ = synth_sessions(synth)
    by_user: dict = {}
    for rec in records:
        by_user.setdefault(rec.user, []).append(rec)
    train_records, test_records = [], []
    for user, recs in sorted(by_user.items()):
        cut = max(1, int(len(recs) * (1.0 - synth.test_fraction)))
        train_records.extend(recs[:cut])
        test_records.extend(recs[cut:])
    schema = synth_schema(synth)
    models = ModelSet.build(run_cfg.train, schema, np.random.default_rng(seed))
    warm = supervised_warmup(models, train_records, run_cfg.train.warmup_epochs,
                             run_cfg.train, np.random.default_rng(seed + 1))
    trainer = OfflineTrainer(models, run_cfg.train, seed=seed)
    trainer.train(train_records, epochs=run_cfg.train.epochs)
    report = eval_auc(models, test_records, run_cfg)
    return {"models": models, "report": report, "warmup": warm,
            "metrics": trainer.metrics, "test_records": test_records,
            "train_records": train_records}


# -- ablations and sweeps -------------------------------------------------------


ABLATION_VARIANTS = ("full", "wo_edge", "wo_actor", "wo_critic")


def ablation_flags(variant: str) -> AblationFlags:
    if variant == "full":
        return AblationFlags()
    if variant == "wo_edge":
        return AblationFlags(no_edge=True)
    if variant == "wo_actor":
        return AblationFlags(no_actor=True)
    if variant == "wo_critic":
        return AblationFlags(no_critic=True)
    raise ValueError(f"unknown ablation variant: {variant}")


def collect_random_logs(bundle: SimulatorBundle, run_cfg: RunConfig,
                        n_sessions: int, seed: int):
    """Session logs from a uniform-random exposure policy on the simulator
    (the offline training corpus for the critic-less ablation)."""
    from .dataio import SessionLogRecord

    env = bundle.make_env(run_cfg, seed=seed + 5000)
    rng = np.random.default_rng(seed + 5001)
    order_rng = np.random.default_rng(seed + 5002)
    users = env.users()
    order: list = []
    records = []
    sessions_done = 0
    while sessions_done < n_sessions:
        if not order:
            order = list(order_rng.permutation(users))
        user = int(order.pop())
        state = env.reset(user)
        raw = []
        for _ in range(run_cfg.train.episode_len):
            if sessions_done >= n_sessions:
                break
            env.begin_session(state)
            history = [list(s) for s in
                       env.cloud_history_sessions(state)][-run_cfg.train.history_len:]
            context = dict(state.context)
            m = env.device_features(state)
            for _ in range(env.K):
                choices = [i for i in state.pool_ids if i not in state.exposed]
                env.step(state, int(rng.choice(choices)))
            exposed = list(state.exposed)
            clicks, r_h, _ = env.end_session(state)
            raw.append((exposed, clicks, r_h, context, m, history))
            sessions_done += 1
        for t, (exposed, clicks, r_h, context, m, history) in enumerate(raw):
            if t + 1 < len(raw):
                nxt = raw[t + 1]
                next_history, next_context, next_exposed = nxt[5], nxt[3], nxt[0]
            else:
                next_history, next_context, next_exposed = history, context, None
            records.append(SessionLogRecord(
                user=user, t=t, history=history, context=context, exposed=exposed,
                clicks=clicks, r=r_h, steps=[{"m": m} for _ in exposed],
                next_history=next_history, next_context=next_context,
                next_exposed=next_exposed))
    return records


def train_wo_critic_policy(bundle: SimulatorBundle, run_cfg: RunConfig,
                           seed: int) -> ModelSet:
    """The critic-less variant is trained offline (warmup plus intrinsic-only
    actor steps on logged sessions) and deployed frozen."""
    logs = collect_random_logs(bundle, run_cfg, run_cfg.train.train_sessions, seed)
    models = bundle.build_models(run_cfg, seed)
    if run_cfg.train.warmup_epochs > 0:
        supervised_warmup(models, logs, run_cfg.train.warmup_epochs,
                          run_cfg.train, np.random.default_rng(seed + 11))
    trainer = OfflineTrainer(models, run_cfg.train, seed=seed, use_critic=False)
    trainer.train(logs, epochs=run_cfg.train.epochs)
    return models


def run_ablation(bundle: SimulatorBundle, run_cfg: RunConfig, variants=None,
                 seed: int | None = None) -> dict[str, MetricsReport]:
    """Train and evaluate each ablation variant at the run seed."""
    seed = run_cfg.seed if seed is None else seed
    out = {}
    for variant in (variants or ABLATION_VARIANTS):
        flags = ablation_flags(variant)
        if flags.no_critic:
            models = train_wo_critic_policy(bundle, run_cfg, seed)
        else:
            models, _ = train_simulator_policy(bundle, run_cfg, seed, ablation=flags)
        policy = "argmax_q" if flags.no_actor else "actor"
        out[variant] = eval_srating(models, bundle, run_cfg,
                                    run_cfg.simulator.rounds, seed,
                                    policy=policy, ablation=flags)
    out["random"] = baseline_random(bundle, run_cfg, run_cfg.simulator.rounds, seed)
    return out


def edge_model_size(run_cfg: RunConfig, seq_len: int, schema: FeatureSchema) -> int:
    """Edge footprint in float64 slots: actor parameters plus the on-device
    buffers (cached item embeddings and device features for seq_len steps)."""
    models = ModelSet.build(run_cfg.train, schema, np.random.default_rng(0))
    actor_params = models.actor_store.total_size()
    buffers = seq_len * (run_cfg.train.L + run_cfg.train.device_feat_dim)
    return actor_params + buffers


def sweep_sensitivity(bundle: SimulatorBundle, run_cfg: RunConfig,
                      latencies, seq_lengths, out_dir: str,
                      seed: int | None = None) -> dict:
    """One train+eval per latency grid point plus the edge-size curve; both
    written as CSV."""
    seed = run_cfg.seed if seed is None else seed
    latency_rows = []
    for d in latencies:
        models, _ = train_simulator_policy(bundle, run_cfg, seed, delay=d)
        report = eval_srating(models, bundle, run_cfg, run_cfg.simulator.rounds,
                              seed, delay=d)
        latency_rows.append((d, report.mean, report.stderr))
    size_rows = [(n, edge_model_size(run_cfg, n, bundle.schema))
                 for n in seq_lengths]
    write_curve_csv(os.path.join(out_dir, "latency_curve.csv"),
                    ("delay_items", "s_rating_mean", "s_rating_stderr"),
                    latency_rows)
    write_curve_csv(os.path.join(out_dir, "edge_size_curve.csv"),
                    ("seq_len", "edge_size_float64"), size_rows)
    return {"latency": latency_rows, "edge_size": size_rows}
