"""Accuracies, cluster-to-class matching, episodic evaluation and reports."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import __version__
from .assign import hard_assign, prototypes, sinkhorn_conditionals, softmax_conditionals
from .clustering import ClusterConfig, cluster, nearest_centroid
from .episodes import ConsistencyMode, Episode, LabeledDataset, sample_episode
from .ot_core import Marginals, build_cost_matrix, sinkhorn

log = logging.getLogger(__name__)

Z95 = 1.96
METRICS = ("clustering_accuracy", "unsupervised_accuracy", "supervised_accuracy")
TASKS = {"fsc": "clustering_accuracy", "ufsc": "unsupervised_accuracy", "supervised": "supervised_accuracy"}

EmbedFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MatchingResult:
    permutation: np.ndarray  # predicted cluster j -> class permutation[j]
    matched_accuracy: float
    agreement_matrix: np.ndarray  # [cluster, class] counts


def _check_ids(ids, k, name):
    a = np.asarray(ids)
    if a.ndim != 1 or not np.issubdtype(a.dtype, np.integer):
        raise ValueError(f"{name} must be a 1-D integer array")
    if a.size and (a.min() < 0 or a.max() >= k):
        raise ValueError(f"{name} ids must lie in [0, {k})")
    return a


def optimal_match(pred, truth, k: int) -> MatchingResult:
    """Cluster-to-class bijection maximizing the number of agreements."""
    p = _check_ids(pred, k, "pred")
    t = _check_ids(truth, k, "truth")
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("pred and truth must be non-empty and of equal length")
    agreement = np.zeros((k, k), dtype=np.int64)
    np.add.at(agreement, (p, t), 1)
    rows, cols = linear_sum_assignment(agreement, maximize=True)
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    acc = float(agreement[rows, cols].sum()) / p.size
    return MatchingResult(perm, acc, agreement)


@dataclass
class EpisodeResult:
    clustering_accuracy: float | None = None
    unsupervised_accuracy: float | None = None
    supervised_accuracy: float | None = None
    n_way: int = 0
    n_shot: int = 0
    seed: int | None = None
    semantic_attribute: int | None = None
    converged: bool = True


def _embed(embed_fn, x):
    return np.asarray(x, dtype=np.float64) if embed_fn is None else embed_fn(x)


def _cluster_support(z_support, k, cfg, seed):
    """Cluster embedded support points; labels are never seen here.

    With one point per cluster every point is its own centroid.
    """
    if z_support.shape[0] == k:
        return z_support.copy(), np.arange(k), True
    res = cluster(z_support, k, cfg, seed=seed or 0)
    return res.centroids, res.hard_labels, res.converged


def _episode_meta(episode):
    return dict(
        n_way=episode.n_way,
        n_shot=episode.n_shot,
        seed=episode.seed,
        semantic_attribute=episode.semantic_attribute,
    )


def eval_few_shot_clustering(episode: Episode, embed_fn: EmbedFn | None = None,
                             cluster_cfg: ClusterConfig = ClusterConfig()) -> EpisodeResult:
    z = _embed(embed_fn, episode.support_x)
    _, labels, converged = _cluster_support(z, episode.n_way, cluster_cfg, episode.seed)
    match = optimal_match(labels, episode.support_y, episode.n_way)
    return EpisodeResult(clustering_accuracy=match.matched_accuracy, converged=converged, **_episode_meta(episode))


def _query_clusters(z_query, centroids, cfg):
    if cfg.query_mode == "sinkhorn":
        cost = build_cost_matrix(z_query, centroids)
        plan = sinkhorn(cost, Marginals.uniform(*cost.shape), cfg.gamma)
        return hard_assign(sinkhorn_conditionals(plan))
    return nearest_centroid(z_query, centroids)


def eval_unsupervised_fsc(episode: Episode, embed_fn: EmbedFn | None = None,
                          cluster_cfg: ClusterConfig = ClusterConfig()) -> EpisodeResult:
    """Cluster the support set, match clusters to classes there, label queries.

    Also reports the support clustering accuracy, which the matching step
    computes anyway.
    """
    k = episode.n_way
    z_s = _embed(embed_fn, episode.support_x)
    centroids, labels, converged = _cluster_support(z_s, k, cluster_cfg, episode.seed)
    z_q = _embed(embed_fn, episode.query_x)
    query_clusters = _query_clusters(z_q, centroids, cluster_cfg)
    match = optimal_match(labels, episode.support_y, k)
    pred = match.permutation[query_clusters]
    return EpisodeResult(
        clustering_accuracy=match.matched_accuracy,
        unsupervised_accuracy=float(np.mean(pred == episode.query_y)),
        converged=converged,
        **_episode_meta(episode),
    )


def eval_supervised_fsc(episode: Episode, embed_fn: EmbedFn | None = None, T: float = 1.0) -> EpisodeResult:
    z_s = _embed(embed_fn, episode.support_x)
    mu = prototypes(z_s, episode.support_y, episode.n_way)
    pred = hard_assign(softmax_conditionals(_embed(embed_fn, episode.query_x), mu, T))
    return EpisodeResult(supervised_accuracy=float(np.mean(pred == episode.query_y)), **_episode_meta(episode))


# -------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    ci95: float
    n: int

    @property
    def degenerate(self) -> bool:
        """True for a single episode, where the spread is undefined."""
        return self.n == 1


def summarize(values: Sequence[float]) -> MetricSummary:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty sequence")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return MetricSummary(float(v.mean()), std, Z95 * std / math.sqrt(v.size), int(v.size))


@dataclass(frozen=True)
class CsccResult:
    value: float
    ci95: float
    below_chance: bool = False


@dataclass
class EvalReport:
    """Aggregated evaluation with the configuration that produced it.

    JSON layout::

        {"metrics": {name: {"mean", "std", "ci95", "n"}},
         "cscc": null | {"value", "ci95", "below_chance"},
         "config": {...}, "fingerprint": str, "run_id": str,
         "version": str, "converged_fraction": float}
    """

    metrics: dict[str, MetricSummary]
    config: dict = field(default_factory=dict)
    fingerprint: str = ""
    converged_fraction: float = 1.0
    cscc: CsccResult | None = None
    version: str = __version__

    def __post_init__(self):
        if not self.metrics:
            raise ValueError("report has no metrics")
        if any(m.n <= 0 for m in self.metrics.values()):
            raise ValueError("episode_count must be > 0")

    @property
    def run_id(self) -> str:
        canon = json.dumps({"config": self.config, "version": self.version}, sort_keys=True)
        return hashlib.sha1(canon.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "metrics": {k: asdict(v) for k, v in sorted(self.metrics.items())},
            "cscc": asdict(self.cscc) if self.cscc else None,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "converged_fraction": self.converged_fraction,
            "run_id": self.run_id,
            "version": self.version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            metrics = {k: MetricSummary(**v) for k, v in d["metrics"].items()}
            c = d.get("cscc")
            return cls(
                metrics=metrics,
                config=d.get("config", {}),
                fingerprint=d.get("fingerprint", ""),
                converged_fraction=d.get("converged_fraction", 1.0),
                cscc=CsccResult(**c) if c else None,
                version=d.get("version", __version__),
            )
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed report: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def aggregate(results: Sequence[EpisodeResult], config: dict | None = None, fingerprint: str = "") -> EvalReport:
    """Reduce episode results in the given order into an :class:`EvalReport`."""
    if not results:
        raise ValueError("cannot aggregate zero episodes")
    metrics = {}
    for name in METRICS:
        vals = [getattr(r, name) for r in results if getattr(r, name) is not None]
        if vals:
            metrics[name] = summarize(vals)
    conv = sum(r.converged for r in results) / len(results)
    return EvalReport(metrics, dict(config or {}), fingerprint, conv)


def cscc(unsup: EvalReport, sup: EvalReport, chance: float | None = None,
         unsup_metric: str = "unsupervised_accuracy", sup_metric: str = "supervised_accuracy") -> CsccResult:
    """Ratio of unsupervised to supervised accuracy for one backbone.

    The interval treats the two means as independent:
    ``ci = r * sqrt((ci_u / u)^2 + (ci_s / s)^2)``. ``chance`` defaults to
    ``1 / n_way`` when the supervised report's config records ``n_way``.
    """
    if unsup.fingerprint != sup.fingerprint:
        raise ValueError(
            f"reports come from different architectures ({unsup.fingerprint!r} vs {sup.fingerprint!r})"
        )
    try:
        u, s = unsup.metrics[unsup_metric], sup.metrics[sup_metric]
    except KeyError as e:
        raise ValueError(f"report lacks metric {e}") from None
    if not s.mean > 0:
        raise ValueError("supervised accuracy must be > 0")
    ratio = u.mean / s.mean
    rel = (u.ci95 / u.mean) ** 2 if u.mean > 0 else 0.0
    rel += (s.ci95 / s.mean) ** 2
    if chance is None and sup.config.get("n_way"):
        chance = 1.0 / sup.config["n_way"]
    below = chance is not None and s.mean <= chance
    if below:
        log.warning("supervised accuracy %.4f is at or below chance %.4f; the ratio is not meaningful", s.mean, chance)
    return CsccResult(ratio, ratio * math.sqrt(rel), below)


# ---------------------------------------------------------- episode loops


def episode_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


@dataclass(frozen=True)
class EvalPlan:
    """Everything needed to evaluate one episode, picklable for workers."""

    task: str
    n_way: object
    n_shot: object
    n_query: int
    base_seed: int
    cluster_cfg: ClusterConfig = ClusterConfig()
    T: float = 1.0
    consistency: ConsistencyMode | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")


def run_episode(ds: LabeledDataset, plan: EvalPlan, index: int, embed_fn: EmbedFn | None = None) -> EpisodeResult:
    ep = sample_episode(ds, plan.n_way, plan.n_shot, plan.n_query, episode_seed(plan.base_seed, index), plan.consistency)
    if plan.task == "fsc":
        return eval_few_shot_clustering(ep, embed_fn, plan.cluster_cfg)
    if plan.task == "ufsc":
        return eval_unsupervised_fsc(ep, embed_fn, plan.cluster_cfg)
    return eval_supervised_fsc(ep, embed_fn, plan.T)


_WORKER = {}


def _init_worker(ds, plan, embed_fn):
    _WORKER.update(ds=ds, plan=plan, embed_fn=embed_fn)


def _work(index):
    return run_episode(_WORKER["ds"], _WORKER["plan"], index, _WORKER["embed_fn"])


def run_episodes(ds: LabeledDataset, plan: EvalPlan, n_episodes: int,
                 embed_fn: EmbedFn | None = None, jobs: int = 1) -> list[EpisodeResult]:
    """Evaluate episodes ``0..n_episodes-1``; results come back in index order."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if jobs <= 1:
        return [run_episode(ds, plan, i, embed_fn) for i in range(n_episodes)]
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ds, plan, embed_fn)) as pool:
        return list(pool.map(_work, range(n_episodes), chunksize=max(1, n_episodes // (4 * jobs))))
