"""Dataset ingestion and session logs: the MovieLens-100k loader, dataset
statistics, sessionization into the offline training line format, a synthetic
industrial-style session generator with a planted preference signal, and
newline-delimited JSON log round-trip."""

from __future__ import annotations

import datetime
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import SynthConfig

LOG_SCHEMA_VERSION = 1

# user attributes never visible to the cloud (spatial features live on the edge)
EDGE_ONLY_USER_FEATURES = ("occupation", "zip_code")


class SchemaVersionError(RuntimeError):
    pass


@dataclass
class RatingRecord:
    user: int
    item: int
    rating: int
    timestamp: int

    def __post_init__(self):
        if not 1 <= self.rating <= 5:
            raise ValueError(f"rating out of range: {self.rating}")


@dataclass
class UserFeatures:
    age: int
    gender: str
    occupation: str
    zip_code: str


@dataclass
class DatasetStats:
    impressions: int
    n_users: int
    n_items: int
    rating_counts: dict
    mean_rating: float


@dataclass
class SessionLogRecord:
    """One offline-training line: state components, the exposed session, the
    session reward, per-step device features, and the successor state/action."""

    user: int
    t: int
    history: list            # prior sessions' exposed item-id lists (cloud-delayed)
    context: dict            # outra-session features
    exposed: list            # a^h_t as item ids
    clicks: list
    r: float
    steps: list              # per-step device feature dicts {m_k}
    next_history: list
    next_context: dict
    next_exposed: list | None  # a^h_{t+1}; None marks a terminal session

    def to_json(self) -> str:
        return json.dumps({
            "v": LOG_SCHEMA_VERSION, "user": self.user, "t": self.t,
            "history": self.history, "context": self.context,
            "exposed": self.exposed, "clicks": self.clicks, "r": self.r,
            "steps": self.steps, "next_history": self.next_history,
            "next_context": self.next_context, "next_exposed": self.next_exposed,
        }, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "SessionLogRecord":
        d = json.loads(line)
        v = d.pop("v")
        if v != LOG_SCHEMA_VERSION:
            raise SchemaVersionError(f"log schema version {v} unsupported")
        return SessionLogRecord(**d)


def load_movielens(directory: str):
    """Parse the tab-separated ratings file and pipe-separated user file.

    Returns (records, user_features, skipped_lines). Occupation and zip code
    are edge-only (EDGE_ONLY_USER_FEATURES).
    """
    ratings_path = os.path.join(directory, "u.data")
    if not os.path.exists(ratings_path):
        raise FileNotFoundError(f"missing ratings file: {ratings_path}")
    records = []
    skipped = 0
    with open(ratings_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            try:
                records.append(RatingRecord(int(parts[0]), int(parts[1]),
                                            int(parts[2]), int(parts[3])))
            except (IndexError, ValueError):
                skipped += 1
    users = {}
    user_path = os.path.join(directory, "u.user")
    if os.path.exists(user_path):
        with open(user_path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                parts = line.split("|")
                try:
                    users[int(parts[0])] = UserFeatures(int(parts[1]), parts[2],
                                                        parts[3], parts[4])
                except (IndexError, ValueError):
                    skipped += 1
    return records, users, skipped


def dataset_stats(records) -> DatasetStats:
    counts = {r: 0 for r in range(1, 6)}
    users, items = set(), set()
    total = 0
    for rec in records:
        counts[rec.rating] += 1
        users.add(rec.user)
        items.add(rec.item)
        total += rec.rating
    n = len(records)
    return DatasetStats(
        impressions=n, n_users=len(users), n_items=len(items),
        rating_counts=counts, mean_rating=(total / n if n else 0.0))


OCCUPATIONS = (
    "administrator", "artist", "doctor", "educator", "engineer", "entertainment",
    "executive", "healthcare", "homemaker", "lawyer", "librarian", "marketing",
    "none", "other", "programmer", "retired", "salesman", "scientist", "student",
    "technician", "writer",
)
_OCC_IDS = {name: i + 1 for i, name in enumerate(OCCUPATIONS)}


def occupation_id(name: str) -> int:
    return _OCC_IDS.get(name, 0)


def zip2_bucket(zip_code: str) -> int:
    """First two zip digits + 1; non-numeric prefixes fall to the OOV bucket."""
    prefix = zip_code[:2]
    return int(prefix) + 1 if prefix.isdigit() else 0


def movielens_device_features(feat: UserFeatures) -> dict:
    return {"occupation": occupation_id(feat.occupation),
            "zip2": zip2_bucket(feat.zip_code)}


def timestamp_context(ts: int) -> dict:
    dt = datetime.datetime.fromtimestamp(ts, tz=datetime.timezone.utc)
    return {"hour": dt.hour, "day": dt.weekday(), "workday": int(dt.weekday() < 5)}


def _delayed_history(sessions: list, items_seen: int, visible_items: int,
                     K: int, history_len: int) -> list:
    """Sessions fully contained in the first `visible_items` of the stream."""
    full_visible = max(0, visible_items) // K
    return [list(s) for s in sessions[:full_visible]][-history_len:]


def sessionize(records, K: int, click_threshold: int = 4, history_len: int = 12,
               delay_d: int = 0, user_features: dict | None = None):
    """Reorganize a rating stream into K-item session lines per user.

    Records must be sorted by (user, timestamp); trailing partial windows are
    dropped. Click label = rating >= click_threshold. The cloud-side history
    lags the stream by delay_d items.
    """
    by_user: dict[int, list] = {}
    for rec in records:
        by_user.setdefault(rec.user, []).append(rec)
    out = []
    for user in sorted(by_user):
        rows = by_user[user]
        n_sessions = len(rows) // K
        exposed_lists = []
        raw = []
        for s in range(n_sessions):
            window = rows[s * K:(s + 1) * K]
            exposed = [r.item for r in window]
            clicks = [int(r.rating >= click_threshold) for r in window]
            context = timestamp_context(window[0].timestamp)
            if user_features and user in user_features:
                m = movielens_device_features(user_features[user])
            else:
                m = {}
            history = _delayed_history(exposed_lists, s * K, s * K - delay_d,
                                       K, history_len)
            raw.append((exposed, clicks, context, m, history))
            exposed_lists.append(exposed)
        for s, (exposed, clicks, context, m, history) in enumerate(raw):
            if s + 1 < len(raw):
                nxt = raw[s + 1]
                next_history, next_context, next_exposed = nxt[4], nxt[2], nxt[0]
            else:
                next_history = _delayed_history(exposed_lists, len(raw) * K,
                                                len(raw) * K - delay_d, K, history_len)
                next_context, next_exposed = context, None
            out.append(SessionLogRecord(
                user=user, t=s, history=history, context=context, exposed=exposed,
                clicks=clicks, r=float(np.mean(clicks)), steps=[{"m": m} for _ in exposed],
                next_history=next_history, next_context=next_context,
                next_exposed=next_exposed))
    return out


@dataclass
class SynthGroundTruth:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    signal_gain: float
    signal_strength: float

    def logit(self, user: int, item: int) -> float:
        return (self.signal_strength * self.signal_gain
                * float(self.user_vectors[user] @ self.item_vectors[item]))


def synth_sessions(cfg: SynthConfig):
    """Generate industrial-schema session logs with a planted preference signal.

    Click probability = sigmoid(signal_strength * gain * <u, i> + device effect);
    the logging policy softmax-follows the same signal (uniform at strength 0),
    so empirical CTR grows with signal_strength. Returns (records, ground_truth).
    """
    rng = np.random.default_rng(cfg.seed)
    scale = cfg.latent_dim ** -0.25
    gt = SynthGroundTruth(
        user_vectors=rng.normal(0.0, scale, size=(cfg.users + 1, cfg.latent_dim)),
        item_vectors=rng.normal(0.0, scale, size=(cfg.n_items + 1, cfg.latent_dim)),
        signal_gain=cfg.signal_gain, signal_strength=cfg.signal_strength)
    # zero-mean per-app effect, independent of items: label noise at any strength
    app_effect = rng.normal(0.0, cfg.device_noise, size=cfg.n_apps + 1)
    app_effect -= app_effect.mean()
    user_app = rng.integers(1, cfg.n_apps + 1, size=cfg.users + 1)
    user_district = rng.integers(1, cfg.n_districts + 1, size=cfg.users + 1)

    sessions_per_user = max(1, cfg.sessions // cfg.users)
    records = []
    for user in range(1, cfg.users + 1):
        exposed_lists = []
        raw = []
        for s in range(sessions_per_user):
            hour = int(rng.integers(0, 24))
            day = int(rng.integers(0, 7))
            context = {"hour": hour, "day": day, "workday": int(day < 5),
                       "location": int(rng.integers(1, cfg.n_locations + 1))}
            exposed, clicks, steps = [], [], []
            chosen = set()
            u_vec = gt.user_vectors[user]
            sig = cfg.signal_strength * cfg.signal_gain
            for k in range(cfg.K):
                pool = rng.choice(np.arange(1, cfg.n_items + 1),
                                  size=min(cfg.pool_size, cfg.n_items),
                                  replace=False)
                pool = np.array([i for i in pool if i not in chosen])
                if pool.size == 0:
                    pool = np.array([i for i in range(1, cfg.n_items + 1)
                                     if i not in chosen])
                logits = sig * (gt.item_vectors[pool] @ u_vec)
                probs = np.exp(cfg.behavior_beta * (logits - logits.max()))
                probs /= probs.sum()
                item = int(rng.choice(pool, p=probs))
                chosen.add(item)
                stay = float(rng.exponential(20.0))
                app = int(user_app[user]) if rng.random() < 0.8 \
                    else int(rng.integers(1, cfg.n_apps + 1))
                dev = app_effect[app]
                p_click = 1.0 / (1.0 + np.exp(-(gt.logit(user, item) + dev)))
                clicks.append(int(rng.random() < p_click))
                exposed.append(item)
                steps.append({"m": {"app": app,
                                    "stay": _stay_bucket(stay, cfg.stay_buckets),
                                    "district": int(user_district[user])}})
            history = _delayed_history(exposed_lists, s * cfg.K,
                                       s * cfg.K - cfg.delay_d, cfg.K,
                                       history_len=50)
            raw.append((exposed, clicks, context, steps, history))
            exposed_lists.append(exposed)
        for s, (exposed, clicks, context, steps, history) in enumerate(raw):
            if s + 1 < len(raw):
                nxt = raw[s + 1]
                next_history, next_context, next_exposed = nxt[4], nxt[2], nxt[0]
            else:
                next_history = _delayed_history(
                    exposed_lists, len(raw) * cfg.K,
                    len(raw) * cfg.K - cfg.delay_d, cfg.K, history_len=50)
                next_context, next_exposed = context, None
            records.append(SessionLogRecord(
                user=user, t=s, history=history, context=context, exposed=exposed,
                clicks=clicks, r=float(np.mean(clicks)), steps=steps,
                next_history=next_history, next_context=next_context,
                next_exposed=next_exposed))
    return records, gt


def _stay_bucket(stay: float, buckets: int) -> int:
    import math
    return min(int(math.log2(1.0 + stay)), buckets - 1)


def write_log(path: str, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_log(path: str):
    """Read a session log; corrupt lines are skipped and counted.

    Returns (records, skipped). A schema version mismatch raises.
    """
    records = []
    skipped = 0
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(SessionLogRecord.from_json(line))
            except SchemaVersionError:
                raise
            except (json.JSONDecodeError, TypeError, KeyError):
                skipped += 1
    return records, skipped
