"""
Ranking metrics and case-study export.

AUC is the rank-sum (Mann-Whitney) statistic over all held-out targets.
Precision/Recall@k are computed per user over that user's targets ranked
by score (ties broken by ascending item id) and macro-averaged; F1 comes
from the averaged precision and recall.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from . import diffmath as dm
from .augment import Polarity, StrategyState, construct
from .config import RunConfig
from .data import FeatureTable, TrainingInstance, sample_substitute_pool, substream
from .errors import UndefinedMetricError
from .model import ModelParams, Role, encode, predict_ctr, score_sequence, score_substitutes


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedPrediction:
    """One user's evaluation targets with predicted scores and labels."""
    user: int
    item_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class EvalResult:
    auc: float
    precision: float
    recall: float
    f1: float
    k: int
    n_users: int


def _check_binary(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("AUC needs at least one clicked and one unclicked target")
    return scores, labels == 1


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a clicked target outranks an unclicked one (ties count half)."""
    scores, positive = _check_binary(scores, labels)
    ranks = rankdata(scores, method="average")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(scores: Sequence[float], labels: Sequence[int]) -> float:
    """O(n²) reference definition of ``auc``."""
    scores, positive = _check_binary(scores, labels)
    pos, neg = scores[positive], scores[~positive]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def precision_recall_f1_at_k(predictions: Sequence[RankedPrediction], k: int = 50) -> Tuple[float, float, float]:
    """
    Macro P@k and R@k over users, and F1 from the averaged pair.

    The precision denominator is min(k, number of targets). Users with no
    clicked target count toward precision only.
    """
    precisions, recalls = [], []
    for pred in predictions:
        n = len(pred.scores)
        if n == 0:
            continue
        order = np.lexsort((pred.item_ids, -np.asarray(pred.scores)))
        cutoff = min(k, n)
        labels = np.asarray(pred.labels, dtype=np.float64)
        hits = float(labels[order[:cutoff]].sum())
        precisions.append(hits / cutoff)
        clicked = labels.sum()
        if clicked > 0:
            recalls.append(hits / clicked)

    if not precisions:
        raise UndefinedMetricError("no user with evaluation targets")
    precision = float(np.mean(precisions))
    recall = float(np.mean(recalls)) if recalls else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def predict_instances(
    params: ModelParams,
    features: FeatureTable,
    instances: Sequence[TrainingInstance],
) -> List[RankedPrediction]:
    predictions = []
    with dm.no_grad():
        for instance in instances:
            user = encode(params, score_sequence(params, features, instance.history))
            scores = predict_ctr(params, user, instance.target_items, features).values
            predictions.append(
                RankedPrediction(instance.user, np.array(instance.target_items), scores.copy(), instance.labels)
            )
    return predictions


def evaluate(
    params: ModelParams,
    features: FeatureTable,
    instances: Sequence[TrainingInstance],
    k: int = 50,
) -> EvalResult:
    predictions = predict_instances(params, features, instances)
    if not predictions:
        raise UndefinedMetricError("no held-out instances to evaluate")
    scores = np.concatenate([p.scores for p in predictions])
    labels = np.concatenate([p.labels for p in predictions])
    precision, recall, f1 = precision_recall_f1_at_k(predictions, k)
    return EvalResult(auc(scores, labels), precision, recall, f1, k, len(predictions))


def format_epoch_line(epoch: int, result: EvalResult) -> str:
    return f"epoch {epoch} {result.auc:.6f} {result.precision:.6f} {result.recall:.6f} {result.f1:.6f}"


def format_metrics_line(result: EvalResult) -> str:
    return (
        f"auc {result.auc:.6f} precision@{result.k} {result.precision:.6f} "
        f"recall@{result.k} {result.recall:.6f} f1@{result.k} {result.f1:.6f}"
    )


def export_case_study(
    params: ModelParams,
    features: FeatureTable,
    instances: Sequence[TrainingInstance],
    config: RunConfig,
    path: Union[str, Path],
    n_users: int = 2,
    progress: float = 1.0,
) -> int:
    """
    Write query and augmented representations for sampled users as CSV.

    Columns are ``user_id,role,hardness,dim_0..dim_{d-1}``; query rows leave
    hardness empty. Users are sampled from instances with at least two
    behaviors. Returns the number of rows written.
    """
    train = config.train
    eligible = {}
    for instance in instances:
        if len(instance.history) >= 2:
            eligible[instance.user] = instance
    users = sorted(eligible)
    rng = substream(train.seed, "case_study")
    if n_users < len(users):
        users = sorted(int(u) for u in rng.choice(users, size=n_users, replace=False))
    if len(users) < n_users:
        logger.warning(f"Only {len(users)} user(s) have a history long enough to augment")

    state = StrategyState(train.strategy, progress, train.n_r)
    pool = sample_substitute_pool(features.n_items, train.n_z, None, substream(train.seed, "case_study_pool"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    rows = 0
    with dm.no_grad(), open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["user_id", "role", "hardness"] + [f"dim_{i}" for i in range(params.dim)])
        for user in users:
            instance = eligible[user]
            scored = score_sequence(params, features, instance.history)
            beta = score_substitutes(params, scored, pool, features)
            query = encode(params, scored)
            writer.writerow([user, Role.QUERY.value, ""] + _cells(query.vector.values))
            rows += 1

            augment_rng = substream(train.seed, "case_study_augment", user)
            for polarity, role, count in (
                (Polarity.POSITIVE, Role.POSITIVE, train.n_p),
                (Polarity.NEGATIVE, Role.NEGATIVE, train.n_n),
            ):
                for index, sample in enumerate(construct(scored, beta, pool, polarity, count, state, augment_rng, user)):
                    rep = encode(params, score_sequence(params, features, sample.item_ids), role, index)
                    writer.writerow([user, role.value, f"{sample.hardness:.9g}"] + _cells(rep.vector.values))
                    rows += 1

    logger.info(f"Wrote {rows} case-study rows for {len(users)} user(s) to {path}")
    return rows


def _cells(vector: np.ndarray) -> List[str]:
    return [f"{x:.9g}" for x in np.asarray(vector).reshape(-1)]
