"""Trial bookkeeping, FAR/FRR counting rules and EER threshold calibration.

Acceptance is inclusive and rejection strict everywhere: a score equal
to the threshold is an accept. The same counting rules apply to
development scores (calibration), evaluation scores at the frozen
threshold, and defended (voted) scores; the aliases exist so call sites
say which set they are counting.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .seeding import derive_seed


def _scores(values, what):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{what}: expected a flat score list, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{what}: empty score list")
    return arr


def dev_far(nontarget_scores, tau: float) -> float:
    """Fraction of non-target scores accepted: |{s >= tau}| / |scores|."""
    s = _scores(nontarget_scores, "dev_far")
    return float(np.count_nonzero(s >= tau) / s.size)


def dev_frr(target_scores, tau: float) -> float:
    """Fraction of target scores rejected: |{s < tau}| / |scores|."""
    s = _scores(target_scores, "dev_frr")
    return float(np.count_nonzero(s < tau) / s.size)


def eval_far(nontarget_scores, tau: float) -> float:
    """dev_far's counting rule on evaluation scores at the frozen threshold."""
    return dev_far(nontarget_scores, tau)


def eval_frr(target_scores, tau: float) -> float:
    """dev_frr's counting rule on evaluation scores at the frozen threshold."""
    return dev_frr(target_scores, tau)


def vote_far(nontarget_scores, tau: float) -> float:
    """dev_far's counting rule on defended (voted) scores."""
    return dev_far(nontarget_scores, tau)


def vote_frr(target_scores, tau: float) -> float:
    """dev_frr's counting rule on defended (voted) scores."""
    return dev_frr(target_scores, tau)


@dataclass(frozen=True)
class Threshold:
    """Calibrated operating point: tau and the dev rates achieved there."""

    tau: float
    far: float
    frr: float
    eer: float


def calibrate_threshold(dev_target_scores, dev_nontarget_scores) -> Threshold:
    """Pick the threshold where dev FAR and FRR are closest.

    Candidates are the midpoints between adjacent distinct score values
    (over both lists pooled), plus one candidate below the minimum and
    one above the maximum; between two adjacent scores every threshold
    yields the same counts, so the midpoints cover all achievable
    operating points. Ties go to the smaller tau. The reported EER is
    the average of FAR and FRR at the chosen point.
    """
    tgt = _scores(dev_target_scores, "calibrate_threshold")
    ntgt = _scores(dev_nontarget_scores, "calibrate_threshold")
    distinct = np.unique(np.concatenate([tgt, ntgt]))
    candidates = np.concatenate(
        [[distinct[0] - 1.0], (distinct[:-1] + distinct[1:]) / 2.0, [distinct[-1] + 1.0]]
    )
    tgt_sorted = np.sort(tgt)
    ntgt_sorted = np.sort(ntgt)
    # counts via binary search: accepts are >= tau, rejects are < tau
    fars = (ntgt.size - np.searchsorted(ntgt_sorted, candidates, side="left")) / ntgt.size
    frrs = np.searchsorted(tgt_sorted, candidates, side="left") / tgt.size
    best = int(np.argmin(np.abs(fars - frrs)))  # first minimum = smallest tau
    return Threshold(
        tau=float(candidates[best]),
        far=float(fars[best]),
        frr=float(frrs[best]),
        eer=float((fars[best] + frrs[best]) / 2.0),
    )


@dataclass(frozen=True)
class Trial:
    trial_id: str
    enroll_id: str
    test_id: str
    is_target: bool
    partition: str = ""  # "dev" or "eval" once split


class TrialSet:
    """A list of trials split into development and evaluation partitions."""

    def __init__(self, trials):
        self.trials = list(trials)
        self.validate()

    def validate(self):
        seen = set()
        for t in self.trials:
            if t.partition not in ("dev", "eval"):
                raise ValueError(f"trial {t.trial_id} has no partition")
            if t.trial_id in seen:
                raise ValueError(f"duplicate trial id {t.trial_id}")
            seen.add(t.trial_id)
        for part in ("dev", "eval"):
            kinds = {t.is_target for t in self.trials if t.partition == part}
            if kinds != {True, False}:
                raise ValueError(
                    f"partition {part!r} is missing a trial type; "
                    "need both target and non-target trials on each side"
                )

    def partition(self, name):
        return [t for t in self.trials if t.partition == name]

    @property
    def dev(self):
        return self.partition("dev")

    @property
    def eval(self):
        return self.partition("eval")


def split_trials(trials, dev_fraction: float, seed: int) -> TrialSet:
    """Randomly assign trials to dev/eval partitions.

    The split is a seeded permutation cut at round(dev_fraction * n);
    original trial order is preserved in the result. Raises if either
    partition ends up without both trial types.
    """
    if not 0.0 < dev_fraction < 1.0:
        raise ValueError("dev_fraction must be strictly between 0 and 1")
    n = len(trials)
    n_dev = int(round(dev_fraction * n))
    rng = np.random.default_rng(derive_seed(seed, "trial-split"))
    dev_positions = set(rng.permutation(n)[:n_dev].tolist())
    assigned = [
        replace(t, partition="dev" if i in dev_positions else "eval")
        for i, t in enumerate(trials)
    ]
    return TrialSet(assigned)


SCORE_COLUMNS = ("trial_id", "enroll_id", "test_id", "is_target", "partition", "score")


def write_scores_csv(path, scored_trials):
    """Dump (trial, score) pairs with the standard score columns."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SCORE_COLUMNS)
        for trial, score in scored_trials:
            writer.writerow(
                [
                    trial.trial_id,
                    trial.enroll_id,
                    trial.test_id,
                    int(trial.is_target),
                    trial.partition,
                    f"{score:.17g}",
                ]
            )


TRIAL_COLUMNS = ("trial_id", "enroll_id", "test_id", "is_target", "partition")


def write_trials_csv(path, trials):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRIAL_COLUMNS)
        for t in trials:
            writer.writerow([t.trial_id, t.enroll_id, t.test_id, int(t.is_target), t.partition])


def read_trials_csv(path) -> TrialSet:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != TRIAL_COLUMNS:
            raise ValueError(f"{path}: unexpected trial columns {reader.fieldnames}")
        trials = [
            Trial(
                trial_id=row["trial_id"],
                enroll_id=row["enroll_id"],
                test_id=row["test_id"],
                is_target=bool(int(row["is_target"])),
                partition=row["partition"],
            )
            for row in reader
        ]
    return TrialSet(trials)
