"""Deterministic generator of labeled probe telemetry.

Every user yields one probe every 5000 ms. Benign cells are Gaussian with
per-column mean and scale shared by all users. Malicious sessions cover
``session_probes`` consecutive probes; on those rows the informative
columns belonging to the session's target class are shifted by
``separation_scale * (1 - overlap)`` column scales. Each target class owns
a disjoint set of informative columns, so stage 2 is learnable and the
class-pooled marginal of any single informative column stays close to the
benign one (the per-class shift touches only that class's share of rows).

Nulls come from two sources: apps that are not running at a probe (a whole
block of local columns) and cells blanked uniformly at ``null_fraction``.

Session intervals are written so that ingest with the default slack of one
probe period labels exactly the rows that were shifted: a session covering
probes ``i .. i+k-1`` starts in ``(t_i, t_{i+1}]`` and ends in
``[t_{i+k-2}, t_{i+k-1})``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from theftgate.frame import MALICIOUS, NO_TARGET, TARGET_CLASSES, FeatureFrame, concat_frames, format_value
from theftgate.ingest import MoriartyLabel
from theftgate.learners.model import parallel_map
from theftgate.telemetry import build_schema

PROBE_PERIOD_MS = 5000
EPOCH_MS = 1451606400000  # 2016-01-01T00:00:00Z
DECIMALS = 3

_GLOBAL_BASES = (
    "cpu_user", "cpu_system", "cpu_idle", "mem_free", "mem_cached", "mem_active",
    "net_rx_bytes", "net_tx_bytes", "net_rx_packets", "net_tx_packets", "wifi_rssi",
    "wifi_link_speed", "battery_level", "battery_temp", "screen_brightness", "disk_reads",
    "disk_writes", "ctx_switches", "interrupts", "procs_running",
)
_LOCAL_BASES = (
    "rss", "utime", "stime", "num_threads", "dalvik_pss", "vsize", "cminflt", "priority",
)
_CORE_APPS = (
    "Chrome", "Contacts Storage", "Gmail", "Google Maps", "Moriarty", "Photos", "SherLock",
    "WhatsApp", "Facebook", "Camera", "Clock", "Phone", "Messages", "Play Store",
)
_RARE_APPS = ("Solitaire", "Weather Widget", "Podcast Player", "Flashlight", "Voice Recorder")


class InfeasibleConfigError(ValueError):
    pass


def _names(bases: Sequence[str], count: int) -> list[str]:
    out = []
    for i in range(count):
        base = bases[i % len(bases)]
        out.append(base if i < len(bases) else f"{base}{i // len(bases) + 1}")
    return out


@dataclass(frozen=True)
class SynthConfig:
    users: int = 5
    rows_per_user: int = 20000
    g: int = 16
    n: int = 6
    app_count: int = 8
    rare_app_count: int = 2
    imbalance_ratio: float = 90.0
    null_fraction: float = 0.2
    overlap: float = 0.2
    informative_feature_count: int = 24
    target_class_mix: tuple = tuple([1.0 / len(TARGET_CLASSES)] * len(TARGET_CLASSES))
    seed: int = 0
    separation_scale: float = 100.0
    session_probes: int = 3
    app_presence: float = 0.95
    rare_app_presence: float = 0.1
    user_shift: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_class_mix", tuple(float(x) for x in self.target_class_mix))
        for name in ("users", "rows_per_user", "g", "n", "app_count", "informative_feature_count"):
            if getattr(self, name) < 1:
                raise InfeasibleConfigError(f"{name} must be positive")
        if self.rare_app_count < 0 or self.rare_app_count > len(_RARE_APPS):
            raise InfeasibleConfigError(f"rare_app_count must lie in [0, {len(_RARE_APPS)}]")
        if self.app_count > len(_CORE_APPS):
            raise InfeasibleConfigError(f"at most {len(_CORE_APPS)} core apps are available")
        if self.imbalance_ratio <= 0:
            raise InfeasibleConfigError("imbalance_ratio must be positive")
        for name in ("null_fraction", "overlap", "app_presence", "rare_app_presence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InfeasibleConfigError(f"{name} must lie in [0, 1], got {v}")
        mix = np.array(self.target_class_mix)
        if mix.size != len(TARGET_CLASSES) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise InfeasibleConfigError(
                f"target_class_mix needs {len(TARGET_CLASSES)} non-negative weights summing to 1")
        width = self.g + (self.app_count + self.rare_app_count) * self.n
        candidates = self.g + self.app_count * self.n
        if self.informative_feature_count > width:
            raise InfeasibleConfigError(
                f"{self.informative_feature_count} informative features exceed width {width}")
        if self.informative_feature_count > candidates:
            raise InfeasibleConfigError(
                f"{self.informative_feature_count} informative features exceed the "
                f"{candidates} columns of globals and core apps")
        if self.informative_feature_count < int(np.count_nonzero(mix)):
            raise InfeasibleConfigError("need at least one informative feature per target class")
        if self.session_probes < 2:
            raise InfeasibleConfigError("sessions must cover at least 2 probes")
        if self.sessions_per_user() == 0:
            raise InfeasibleConfigError(
                "rows_per_user is too small for one malicious session at this imbalance ratio")
        if self.sessions_per_user() * self.session_probes > self.rows_per_user:
            raise InfeasibleConfigError("malicious sessions do not fit into rows_per_user")

    def sessions_per_user(self) -> int:
        malicious = self.rows_per_user / (self.imbalance_ratio + 1.0)
        return int(np.floor(malicious / self.session_probes + 0.5))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_class_mix"] = list(self.target_class_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise InfeasibleConfigError(f"unknown config keys: {unknown}")
        if "target_class_mix" in known:
            known["target_class_mix"] = tuple(known["target_class_mix"])
        return cls(**known)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SynthLayout:
    """Column layout and the benign distribution shared by all users."""

    global_names: list
    local_names: list
    apps: list  # sorted universe
    rare: np.ndarray  # bool per app
    mean: np.ndarray
    scale: np.ndarray
    informative: list  # per target class, column indices
    direction: np.ndarray  # +1 / -1 per column

    @property
    def columns(self) -> list:
        return build_schema(self.global_names, self.local_names, self.apps).columns

    @property
    def informative_columns(self) -> list:
        cols = self.columns
        return [cols[j] for group in self.informative for j in group]


@dataclass
class SynthData:
    config: SynthConfig
    layout: SynthLayout
    frame: FeatureFrame
    present: np.ndarray  # (rows, apps) bool, app running at the probe
    labels: list = field(default_factory=list)  # MoriartyLabel, malicious and benign


def _layout(cfg: SynthConfig, rng: np.random.Generator) -> SynthLayout:
    global_names = _names(_GLOBAL_BASES, cfg.g)
    local_names = _names(_LOCAL_BASES, cfg.n)
    core = list(_CORE_APPS[: cfg.app_count])
    rare = list(_RARE_APPS[: cfg.rare_app_count])
    apps = sorted(core + rare)
    is_rare = np.array([a in rare for a in apps])
    width = cfg.g + len(apps) * cfg.n
    scale = np.power(10.0, rng.uniform(0.0, 3.0, size=width))
    mean = scale * rng.uniform(2.0, 6.0, size=width)
    direction = np.where(rng.random(width) < 0.5, -1.0, 1.0)
    candidates = list(range(cfg.g))
    for a, app in enumerate(apps):
        if not is_rare[a]:
            start = cfg.g + a * cfg.n
            candidates.extend(range(start, start + cfg.n))
    chosen = rng.permutation(np.array(candidates))[: cfg.informative_feature_count]
    active = [k for k, w in enumerate(cfg.target_class_mix) if w > 0]
    groups: list = [[] for _ in TARGET_CLASSES]
    for i, col in enumerate(chosen):
        groups[active[i % len(active)]].append(int(col))
    return SynthLayout(global_names, local_names, apps, is_rare, mean, scale,
                       [sorted(g) for g in groups], direction)


def _sessions(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Sorted first-probe indices of non-overlapping malicious sessions."""
    k, p = cfg.sessions_per_user(), cfg.session_probes
    slots = np.sort(rng.choice(cfg.rows_per_user - (p - 1) * k, size=k, replace=False))
    return slots + (p - 1) * np.arange(k)


def _user(cfg: SynthConfig, layout: SynthLayout, user: str, seed: np.random.SeedSequence,
          show_all_apps: bool = False):
    rng = np.random.default_rng(seed)
    R, n, m = cfg.rows_per_user, cfg.n, len(layout.apps)
    width = cfg.g + m * n
    t = EPOCH_MS + PROBE_PERIOD_MS * np.arange(R, dtype=np.int64)
    offset = cfg.user_shift * rng.standard_normal(width)
    X = layout.mean + layout.scale * (offset + rng.standard_normal((R, width)))

    label = np.zeros(R, dtype=np.int8)
    target = np.full(R, NO_TARGET, dtype=np.int8)
    p = cfg.session_probes
    starts = _sessions(cfg, rng)
    classes = rng.choice(len(TARGET_CLASSES), size=starts.size, p=np.array(cfg.target_class_mix))
    shift = cfg.separation_scale * (1.0 - cfg.overlap)
    labels: list[MoriartyLabel] = []
    for i, k in zip(starts.tolist(), classes.tolist()):
        rows = slice(i, i + p)
        label[rows] = MALICIOUS
        target[rows] = k
        cols = layout.informative[k]
        X[rows, cols] += shift * layout.direction[cols] * layout.scale[cols]
        s = int(t[i]) + 1 + int(rng.integers(0, PROBE_PERIOD_MS - 1))
        e_lo = max(s, int(t[i + p - 2]))
        e = e_lo + int(rng.integers(0, int(t[i + p - 1]) - e_lo))
        labels.append(MoriartyLabel(user, s, e, MALICIOUS, int(k)))
    # benign Moriarty sessions sit wholly between malicious windows
    busy = np.zeros(R + 2, dtype=bool)
    for i in starts.tolist():
        busy[max(i - 1, 0) : i + p + 1] = True
    for i in np.sort(rng.choice(R, size=min(starts.size, R), replace=False)).tolist():
        j = i + p
        if j < R and not busy[i : j + 1].any():
            labels.append(MoriartyLabel(user, int(t[i]), int(t[j - 1]), 0))
            busy[i : j + 1] = True

    presence = np.where(layout.rare, cfg.rare_app_presence, cfg.app_presence)
    present = rng.random((R, m)) < presence
    if show_all_apps:
        present[0] = True  # every app shows up once, so ingest sees the full universe
    cell_null = rng.random((R, width)) < cfg.null_fraction
    X = np.round(X, DECIMALS)
    X[cell_null] = np.nan
    local = X[:, cfg.g :].reshape(R, m, n)
    local[~present] = np.nan
    labels.sort(key=lambda s: (s.start_ms, s.end_ms))
    frame = FeatureFrame(layout.columns, X, np.full(R, user, dtype=object), t, label, target)
    return frame, present, labels


def user_names(count: int) -> list[str]:
    return [f"u{i + 1:02d}" for i in range(count)]


def generate(config: SynthConfig, threads: int = 1) -> SynthData:
    """Build every user's stream in memory; identical for a given config."""
    root = np.random.SeedSequence(config.seed)
    layout_seed, *user_seeds = root.spawn(config.users + 1)
    layout = _layout(config, np.random.default_rng(layout_seed))
    users = user_names(config.users)
    jobs = [(u, s, i == 0) for i, (u, s) in enumerate(zip(users, user_seeds))]
    parts = parallel_map(lambda a: _user(config, layout, *a), jobs, threads)
    present = np.vstack([p for _, p, _ in parts])
    frame = concat_frames([f for f, _, _ in parts])
    labels = [lab for _, _, labs in parts for lab in labs]
    return SynthData(config, layout, frame, present, labels)


def write_csvs(data: SynthData, outdir) -> dict:
    """Write gsf.csv, laf.csv and labels.csv; return their paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    lay, f = data.layout, data.frame
    g, n = len(lay.global_names), len(lay.local_names)
    text = np.vectorize(format_value, otypes=[object])(f.values) if len(f) else np.empty(f.shape, dtype=object)
    paths = {"gsf": out / "gsf.csv", "laf": out / "laf.csv", "labels": out / "labels.csv"}
    with open(paths["gsf"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "t_ms", *lay.global_names])
        for i in range(len(f)):
            w.writerow([f.users[i], int(f.t_ms[i]), *text[i, :g]])
    with open(paths["laf"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "t_ms", "app", *lay.local_names])
        for i in range(len(f)):
            user, t = f.users[i], int(f.t_ms[i])
            for a in np.flatnonzero(data.present[i]).tolist():
                start = g + a * n
                w.writerow([user, t, lay.apps[a], *text[i, start : start + n]])
    with open(paths["labels"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "start_ms", "end_ms", "action", "target"])
        for lab in sorted(data.labels, key=lambda s: (s.user, s.start_ms, s.end_ms)):
            w.writerow([lab.user, lab.start_ms, lab.end_ms,
                        "malicious" if lab.action == MALICIOUS else "benign",
                        TARGET_CLASSES[lab.target] if lab.target != NO_TARGET else ""])
    return paths
