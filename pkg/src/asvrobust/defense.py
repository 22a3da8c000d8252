"""Score-voting defense and classical smoothing-filter baselines.

The voting defense scores the incoming test utterance together with K
Gaussian-perturbed copies and averages the K+1 cosine scores. The noise
scale sigma is given in 16-bit amplitude units, like attack budgets, so
the two are directly comparable. Filters (mean, median, Gaussian) are
the purification baselines: the test utterance is smoothed before
scoring.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .seeding import derive_seed
from .wavio import AMPLITUDE_UNIT


@dataclass(frozen=True)
class VoteConfig:
    sigma: float        # noise std, 16-bit amplitude units
    k_votes: int        # number of perturbed copies (0 = no defense)
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.k_votes < 0:
            raise ValueError("k_votes must be non-negative")


def sample_neighbors(x_test, config: VoteConfig) -> np.ndarray:
    """K noisy copies of the test waveform, clipped to the legal range.

    Deterministic in (x_test, config): the same seed always yields the
    same neighbourhood. sigma=0 returns K exact copies.
    """
    x = np.asarray(x_test, dtype=np.float64)
    rng = np.random.default_rng(derive_seed(config.seed, "vote-noise"))
    noise = rng.standard_normal((config.k_votes, x.size)) * (config.sigma * AMPLITUDE_UNIT)
    return np.clip(x[None, :] + noise, -1.0, 1.0)


def vote_score(model, x_test, x_enroll, config: VoteConfig, enroll_embedding=None) -> float:
    """Mean cosine score over the test utterance and its K neighbours.

    With k_votes=0 this is exactly the undefended score. Pass
    ``enroll_embedding`` to reuse a cached enrolment embedding; the
    enrolment waveform may then be omitted.
    """
    from .model import _unit_cosine

    x = np.asarray(x_test, dtype=np.float64)
    if enroll_embedding is None:
        if x_enroll is None:
            raise ValueError("need x_enroll or enroll_embedding")
        enroll_embedding = model.embed(x_enroll)
    if config.k_votes == 0:
        batch = x[None, :]
    else:
        batch = np.concatenate([x[None, :], sample_neighbors(x, config)], axis=0)
    embeddings = model.embed_batch(batch)
    scores = [_unit_cosine(e, enroll_embedding) for e in embeddings]
    return float(np.mean(scores))


@dataclass(frozen=True)
class FilterSpec:
    kind: str               # "mean", "median" or "gaussian"
    kernel_size: int = 3
    # mild by default: [0.17, 0.66, 0.17] taps, gentle on genuine audio
    gaussian_std: float = 0.6

    def __post_init__(self):
        if self.kind not in ("mean", "median", "gaussian"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.gaussian_std <= 0:
            raise ValueError("gaussian_std must be positive")


@lru_cache(maxsize=None)
def _kernel(kind, kernel_size, gaussian_std):
    if kind == "mean":
        return np.full(kernel_size, 1.0 / kernel_size)
    center = kernel_size // 2
    w = np.exp(-0.5 * ((np.arange(kernel_size) - center) / gaussian_std) ** 2)
    return w / w.sum()


@lru_cache(maxsize=None)
def _window_indices(n, kernel_size):
    # replicate padding folded into the index table
    pad = kernel_size // 2
    padded = np.clip(np.arange(-pad, n + pad), 0, n - 1)
    return np.ascontiguousarray(
        padded[np.arange(n)[:, None] + np.arange(kernel_size)[None, :]]
    )


def apply_filter(x, spec: FilterSpec) -> np.ndarray:
    """Smooth a waveform with replicate edge padding (fast numpy path)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("apply_filter expects a non-empty 1-D waveform")
    windows = x[_window_indices(x.size, spec.kernel_size)]
    if spec.kind == "median":
        return np.median(windows, axis=-1)
    return windows @ _kernel(spec.kind, spec.kernel_size, spec.gaussian_std)


def filter_graph(x: ad.Tensor, spec: FilterSpec) -> ad.Tensor:
    """Differentiable view of apply_filter for attack composition.

    Linear kernels get exact gradients through the windowed weighted
    sum; the median picks its window element in the forward pass and
    routes the whole gradient to it.
    """
    t = ad.as_tensor(x)
    idx = _window_indices(t.shape[-1], spec.kernel_size)
    windows = ad.gather(t, idx)
    if spec.kind == "median":
        order = np.argsort(windows.data, axis=-1)
        med = np.ascontiguousarray(order[..., spec.kernel_size // 2])
        return ad.pick(windows, med)
    return ad.matmul(windows, _kernel(spec.kind, spec.kernel_size, spec.gaussian_std))


# preset operating points, exposed for configs and sweeps
SIGMA_SWEEP = (1.0, 15.0, 30.0, 60.0, 90.0, 120.0)
DEFAULT_K_VOTES = 50
ADAPTIVE_K_VOTES = 5
ADAPTIVE_SIGMA = 60.0
DEFAULT_FILTERS = (
    FilterSpec("gaussian"),
    FilterSpec("mean"),
    FilterSpec("median"),
)
