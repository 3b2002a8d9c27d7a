"""Trial enumeration, threshold calibration, TAR/FAR/ROC metrics, and protocols."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Manifest
from .validation import check_matrix

AGE_GROUPS = ("le8", "gt8", "unknown")
AGE_SPLIT_YEARS = 8.0


def age_group_of(age_years: float) -> str:
    if age_years is None or not np.isfinite(age_years):
        return "unknown"
    return "le8" if age_years <= AGE_SPLIT_YEARS else "gt8"


@dataclass(frozen=True)
class Trial:
    enroll_key: str
    probe_key: str
    genuine: bool
    gap_months: int
    probe_age_years: float
    age_group: str

    def __post_init__(self):
        if self.enroll_key == self.probe_key:
            raise ValueError("a trial cannot compare a record with itself")
        if self.gap_months < 0:
            raise ValueError("gap_months must be nonnegative")
        if self.age_group not in AGE_GROUPS:
            raise ValueError(f"unknown age group {self.age_group!r}")


@dataclass
class ScoreSet:
    trials: list[Trial]
    distances: np.ndarray

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if len(self.trials) != self.distances.shape[0]:
            raise ValueError("trials and distances lengths differ")
        if self.distances.size and (
            not np.all(np.isfinite(self.distances)) or np.any(self.distances < 0)
        ):
            raise ValueError("distances must be finite and nonnegative")

    @property
    def genuine_mask(self) -> np.ndarray:
        return np.array([t.genuine for t in self.trials], dtype=bool)

    def subset(self, keep: np.ndarray) -> "ScoreSet":
        keep = np.asarray(keep, dtype=bool)
        return ScoreSet(
            [t for t, k in zip(self.trials, keep) if k],
            self.distances[keep],
        )


def pairwise_distances(X: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Euclidean distance matrix; exactly symmetric with a zero diagonal."""
    X = check_matrix(X, "X")
    n = X.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = X[start:stop, None, :] - X[None, :, :]
        out[start:stop] = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(out, 0.0)
    return np.sqrt(out)


def build_trials(manifest: Manifest, protocol) -> list[Trial]:
    """Enumerate trials: ("within", s) or ("cross", enroll_s, probe_s)."""
    if protocol[0] == "within":
        return build_within_trials(manifest, protocol[1])
    if protocol[0] == "cross":
        return build_cross_trials(manifest, protocol[1], protocol[2])
    raise ValueError(f"unknown protocol {protocol!r}")


def build_within_trials(manifest: Manifest, session: int) -> list[Trial]:
    """All unordered record pairs within one session, gap 0."""
    recs = manifest.by_session(session)
    if not recs:
        raise ValueError(f"session {session} is empty")
    trials = []
    for i in range(len(recs)):
        for j in range(i + 1, len(recs)):
            probe = recs[j]
            trials.append(Trial(
                enroll_key=recs[i].key,
                probe_key=probe.key,
                genuine=recs[i].subject_id == probe.subject_id,
                gap_months=0,
                probe_age_years=probe.age_years,
                age_group=age_group_of(probe.age_years),
            ))
    return trials


def build_cross_trials(manifest: Manifest, enroll_session: int, probe_session: int) -> list[Trial]:
    """All ordered (enroll, probe) pairs across two distinct sessions."""
    if enroll_session == probe_session:
        raise ValueError("cross protocol requires distinct sessions")
    enroll = manifest.by_session(enroll_session)
    probes = manifest.by_session(probe_session)
    if not enroll:
        raise ValueError(f"session {enroll_session} is empty")
    if not probes:
        raise ValueError(f"session {probe_session} is empty")
    gap = manifest.session_spacing_months * abs(probe_session - enroll_session)
    trials = []
    for e in enroll:
        for p in probes:
            trials.append(Trial(
                enroll_key=e.key,
                probe_key=p.key,
                genuine=e.subject_id == p.subject_id,
                gap_months=gap,
                probe_age_years=p.age_years,
                age_group=age_group_of(p.age_years),
            ))
    return trials


def score_trials(trials: list[Trial], vectors) -> ScoreSet:
    """Attach Euclidean distances to trials from a key -> vector mapping."""
    distances = np.empty(len(trials))
    for i, t in enumerate(trials):
        a = np.asarray(vectors[t.enroll_key], dtype=np.float64)
        b = np.asarray(vectors[t.probe_key], dtype=np.float64)
        distances[i] = float(np.linalg.norm(a - b))
    return ScoreSet(list(trials), distances)


# --- threshold calibration and rates -------------------------------------------


def calibrate_threshold(scores: ScoreSet, target_far: float):
    """Largest impostor-distance threshold with FAR <= target_far.

    Accept rule is distance <= threshold. Returns None (the reject-all marker)
    when even the smallest impostor distance would blow the FAR budget.
    """
    if not 0.0 <= target_far <= 1.0:
        raise ValueError("target_far must be in [0, 1]")
    imp = scores.distances[~scores.genuine_mask]
    if imp.size == 0:
        raise ValueError("no impostor trials to calibrate on")
    values = np.unique(imp)
    counts = np.searchsorted(np.sort(imp), values, side="right")
    ok = (counts / imp.size) <= target_far
    if not ok.any():
        return None
    return float(values[np.flatnonzero(ok)[-1]])


@dataclass
class RateReport:
    threshold: float | None
    ta: int
    fr: int
    fa: int
    tr: int

    @property
    def tar(self) -> float:
        return self.ta / (self.ta + self.fr) if (self.ta + self.fr) > 0 else 0.0

    @property
    def far(self) -> float:
        return self.fa / (self.fa + self.tr) if (self.fa + self.tr) > 0 else 0.0

    @property
    def n_genuine(self) -> int:
        return self.ta + self.fr

    @property
    def n_impostor(self) -> int:
        return self.fa + self.tr


def compute_rates(scores: ScoreSet, threshold) -> RateReport:
    """Classify trials into TA/FR/FA/TR at the threshold (None rejects all)."""
    genuine = scores.genuine_mask
    n_gen = int(genuine.sum())
    n_imp = int((~genuine).sum())
    if threshold is None:
        return RateReport(None, 0, n_gen, 0, n_imp)
    accept = scores.distances <= threshold
    ta = int(np.count_nonzero(accept & genuine))
    fa = int(np.count_nonzero(accept & ~genuine))
    return RateReport(float(threshold), ta, n_gen - ta, fa, n_imp - fa)


def roc_curve(scores: ScoreSet):
    """ROC swept over all distinct distances plus -inf/+inf sentinels.

    Returns (points, eer) where points is a list of (far, tar) sorted by far
    and eer interpolates the far = frr crossing linearly.
    """
    genuine = scores.genuine_mask
    gen = np.sort(scores.distances[genuine])
    imp = np.sort(scores.distances[~genuine])
    if gen.size == 0 or imp.size == 0:
        raise ValueError("roc needs at least one genuine and one impostor trial")
    thresholds = np.concatenate(([-np.inf], np.unique(scores.distances), [np.inf]))
    tar = np.searchsorted(gen, thresholds, side="right") / gen.size
    far = np.searchsorted(imp, thresholds, side="right") / imp.size
    points = list(zip(far.tolist(), tar.tolist()))

    frr = 1.0 - tar
    diff = far - frr  # non-decreasing from -1 to +1
    i = int(np.searchsorted(diff, 0.0, side="left"))
    if diff[i] == 0.0:
        eer = far[i]
    elif i == 0:
        eer = far[0]
    else:
        d0, d1 = diff[i - 1], diff[i]
        lam = -d0 / (d1 - d0)
        eer = far[i - 1] + lam * (far[i] - far[i - 1])
    return points, float(eer)


# --- protocols ------------------------------------------------------------------


@dataclass
class GroupStats:
    threshold: float | None
    ta: int = 0
    fr: int = 0
    fa: int = 0
    tr: int = 0

    @classmethod
    def from_rates(cls, rates: RateReport) -> "GroupStats":
        return cls(rates.threshold, rates.ta, rates.fr, rates.fa, rates.tr)

    def merge(self, other: "GroupStats"):
        self.ta += other.ta
        self.fr += other.fr
        self.fa += other.fa
        self.tr += other.tr
        self.threshold = None if self.threshold != other.threshold else self.threshold

    def as_table_row(self) -> dict:
        n_gen = self.ta + self.fr
        n_imp = self.fa + self.tr
        return {
            "tar": self.ta / n_gen if n_gen else 0.0,
            "far": self.fa / n_imp if n_imp else 0.0,
            "n_genuine": n_gen,
            "n_impostor": n_imp,
        }


@dataclass
class ExperimentResult:
    protocol: str
    rates: RateReport | None
    eer: float | None
    roc: list
    per_gap: dict
    per_age_group: dict
    flag: str | None = None


@dataclass
class EvalReport:
    target_far: float
    experiments: list[ExperimentResult]
    per_gap: dict = field(default_factory=dict)
    per_age_group: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def enumerate_experiments(manifest: Manifest, anchor_session: int = 1) -> list[tuple]:
    """Within each session, plus cross anchor -> later/other sessions."""
    sessions = manifest.sessions
    protocols: list[tuple] = [("within", s) for s in sessions]
    protocols += [("cross", anchor_session, s) for s in sessions if s != anchor_session]
    return protocols


def _protocol_name(protocol: tuple) -> str:
    if protocol[0] == "within":
        return f"within-{protocol[1]}"
    return f"cross-{protocol[1]}-{protocol[2]}"


def _evaluate_groupwise(scores: ScoreSet, target_far: float, key_of) -> dict:
    """Calibrate and score each trial subgroup (filtered before calibration)."""
    table = {}
    keys = sorted({key_of(t) for t in scores.trials})
    for key in keys:
        keep = np.array([key_of(t) == key for t in scores.trials], dtype=bool)
        subset = scores.subset(keep)
        mask = subset.genuine_mask
        if not mask.any() or mask.all():
            table[key] = None  # flagged: missing a trial class
            continue
        thr = calibrate_threshold(subset, target_far)
        table[key] = GroupStats.from_rates(compute_rates(subset, thr))
    return table


def evaluate_experiment(protocol: tuple, scores: ScoreSet, target_far: float) -> ExperimentResult:
    name = _protocol_name(protocol)
    mask = scores.genuine_mask
    if len(scores.trials) == 0 or not mask.any() or mask.all():
        missing = "genuine" if not mask.any() else "impostor"
        return ExperimentResult(name, None, None, [], {}, {},
                                flag=f"no {missing} trials")
    threshold = calibrate_threshold(scores, target_far)
    rates = compute_rates(scores, threshold)
    roc, eer = roc_curve(scores)
    per_gap = {}
    for gap in sorted({t.gap_months for t in scores.trials}):
        keep = np.array([t.gap_months == gap for t in scores.trials], dtype=bool)
        per_gap[gap] = GroupStats.from_rates(compute_rates(scores.subset(keep), threshold))
    per_age = _evaluate_groupwise(scores, target_far, lambda t: t.age_group)
    return ExperimentResult(name, rates, eer, roc, per_gap, per_age)


def run_protocol(manifest: Manifest, scores_by_experiment: dict, target_far: float) -> EvalReport:
    """Evaluate every experiment and aggregate per-gap / per-age-group tables.

    scores_by_experiment maps protocol tuples (as from enumerate_experiments)
    to ScoreSets. Experiments missing a trial class are flagged, not fatal.
    """
    report = EvalReport(target_far=target_far, experiments=[])
    agg_gap: dict = {}
    agg_age: dict = {}
    for protocol, scores in scores_by_experiment.items():
        result = evaluate_experiment(protocol, scores, target_far)
        report.experiments.append(result)
        if result.flag:
            report.notes.append(f"{result.protocol}: {result.flag}")
            continue
        for gap, stats in result.per_gap.items():
            if gap in agg_gap:
                agg_gap[gap].merge(stats)
            else:
                agg_gap[gap] = GroupStats(stats.threshold, stats.ta, stats.fr,
                                          stats.fa, stats.tr)
        for group, stats in result.per_age_group.items():
            if stats is None:
                continue
            if group in agg_age:
                agg_age[group].merge(stats)
            else:
                agg_age[group] = GroupStats(stats.threshold, stats.ta, stats.fr,
                                            stats.fa, stats.tr)
    report.per_gap = dict(sorted(agg_gap.items()))
    report.per_age_group = {g: agg_age[g] for g in AGE_GROUPS if g in agg_age}
    return report
