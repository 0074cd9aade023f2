"""
Contrastive, cross-entropy and click-gap losses.

Every loss is a scalar Tensor built from diffmath operations, so one tape
records the whole objective. Hardness scores come in as plain floats; the
margins derived from them are constants on the tape.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import diffmath as dm
from .config import DistanceKind, MarginConfig, Objective
from .diffmath import Tensor
from .errors import ContractError, DomainError
from .model import Role


logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
STEP_LINE_FIELDS = ("total", "l_ccl", "l_ccl_pos", "l_ccl_neg", "l_ce", "l_ce_pos", "l_ce_neg", "l_cui")

# (representation, hardness)
Scored = Tuple[Tensor, float]


class MarginMode(str, Enum):
    SUM = "sum"
    DIFF = "diff"


def distance(a: Tensor, b: Tensor, kind: DistanceKind = DistanceKind.COSINE) -> Tensor:
    """Cosine distance 1 - cos(a, b) in [0, 2], or the Euclidean norm of a - b."""
    a, b = dm.as_tensor(a), dm.as_tensor(b)
    if kind is DistanceKind.EUCLIDEAN:
        return dm.l2_norm(dm.sub(a, b))
    if not np.any(a.values) or not np.any(b.values):
        raise DomainError("cosine distance of a zero-norm representation")
    cosine = dm.div(dm.sum(dm.mul(a, b)), dm.mul(dm.l2_norm(a), dm.l2_norm(b)))
    return dm.sub(1.0, cosine)


def adaptive_margin(first: float, second: float, mode: MarginMode, cfg: MarginConfig) -> float:
    """
    Hardness-scaled margin clamped into [delta_l, delta_u].

    SUM combines a positive and a negative (first + second); DIFF compares two
    samples of the same polarity (first - second). With ``adaptive`` off the
    fixed ``delta`` is returned.
    """
    if not cfg.adaptive:
        return cfg.delta
    combined = first + second if mode is MarginMode.SUM else first - second
    return max(min(combined * cfg.delta_s, cfg.delta_u), cfg.delta_l)


def _distances(u_q: Tensor, samples: Sequence[Scored], kind: DistanceKind) -> Tensor:
    """Distances from u_q to every sample representation, shape (len(samples),)."""
    if kind is DistanceKind.EUCLIDEAN:
        return dm.concat([dm.reshape(distance(u_q, rep, kind), (1,)) for rep, _ in samples], axis=0)
    u_q = dm.as_tensor(u_q)
    reps = [dm.as_tensor(rep) for rep, _ in samples]
    if not np.any(u_q.values) or not all(np.any(rep.values) for rep in reps):
        raise DomainError("cosine distance of a zero-norm representation")
    stack = dm.concat([dm.reshape(rep, (1, rep.size)) for rep in reps], axis=0)
    dots = dm.reshape(dm.matmul(stack, dm.reshape(u_q, (u_q.size, 1))), (len(reps),))
    norms = dm.sqrt(dm.sum(dm.mul(stack, stack), axis=1))
    return dm.sub(1.0, dm.div(dots, dm.mul(norms, dm.l2_norm(u_q))))


def _column(x: Tensor) -> Tensor:
    return dm.reshape(x, (x.shape[0], 1))


def _row(x: Tensor) -> Tensor:
    return dm.reshape(x, (1, x.shape[0]))


def loss_ccl(u_q: Tensor, positives: Sequence[Scored], negatives: Sequence[Scored], cfg: MarginConfig) -> Tensor:
    """Σ_i Σ_j max(d(u_q, u⁺_i) - d(u_q, u⁻_j) + δ*_ij, 0), margin in SUM mode."""
    if not positives or not negatives:
        raise ContractError("loss_ccl needs at least one positive and one negative")
    d_pos = _distances(u_q, positives, cfg.distance)
    d_neg = _distances(u_q, negatives, cfg.distance)
    margins = np.array([[adaptive_margin(a_p, a_n, MarginMode.SUM, cfg) for _, a_n in negatives] for _, a_p in positives])
    return dm.sum(dm.relu(dm.add(dm.sub(_column(d_pos), _row(d_neg)), margins)))


def _same_polarity_pairs(samples: Sequence[Scored], cfg: MarginConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Mask[i, k] = a_k < a_i and the DIFF-mode margins for those pairs."""
    hardness = np.array([a for _, a in samples], dtype=np.float64)
    mask = (hardness[None, :] < hardness[:, None]).astype(np.float64)
    margins = np.array([[adaptive_margin(a_i, a_k, MarginMode.DIFF, cfg) for a_k in hardness] for a_i in hardness])
    return mask, margins


def loss_ccl_pos(u_q: Tensor, positives: Sequence[Scored], cfg: MarginConfig) -> Tensor:
    """
    Contrast positives against each other.

    For every pair with a⁺_k < a⁺_i the better positive i must sit closer to
    the query than k by the DIFF-mode margin.
    """
    if not positives:
        raise ContractError("loss_ccl_pos needs at least one positive")
    d = _distances(u_q, positives, cfg.distance)
    mask, margins = _same_polarity_pairs(positives, cfg)
    hinge = dm.relu(dm.add(dm.sub(_column(d), _row(d)), margins))
    return dm.sum(dm.mul(hinge, mask))


def loss_ccl_neg(u_q: Tensor, negatives: Sequence[Scored], cfg: MarginConfig) -> Tensor:
    """For every pair with a⁻_k < a⁻_i the harder negative i must sit farther than k."""
    if not negatives:
        raise ContractError("loss_ccl_neg needs at least one negative")
    d = _distances(u_q, negatives, cfg.distance)
    mask, margins = _same_polarity_pairs(negatives, cfg)
    hinge = dm.relu(dm.add(dm.sub(_row(d), _column(d)), margins))
    return dm.sum(dm.mul(hinge, mask))


def loss_ce(predictions: Tensor, labels: np.ndarray, variant: Role = Role.QUERY) -> Tensor:
    """
    Binary cross-entropy summed over targets.

    The NEGATIVE variant keeps only clicked targets and supervises them
    toward 0. Predictions are clamped to [1e-12, 1 - 1e-12] before the log.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != predictions.shape:
        raise ContractError(f"labels {labels.shape} do not match predictions {predictions.shape}")
    clamped = dm.clip(predictions, PROB_FLOOR, 1.0 - PROB_FLOOR)
    log_miss = dm.log(dm.sub(1.0, clamped))
    if variant is Role.NEGATIVE:
        return dm.neg(dm.sum(dm.mul(log_miss, labels)))
    log_hit = dm.log(clamped)
    return dm.neg(dm.sum(dm.add(dm.mul(log_hit, labels), dm.mul(log_miss, 1.0 - labels))))


def sum_terms(terms: Sequence[Tensor]) -> Optional[Tensor]:
    """Tape-recorded sum of scalar terms; None for an empty list."""
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = dm.add(total, term)
    return total


def loss_cui(groups: Iterable[Tuple[Tensor, np.ndarray]]) -> Tensor:
    """
    -Σ log(S⁺ / (S⁺ + S⁻)) with S± = Σ exp(ŷ) over clicked / unclicked targets.

    One term per group of predictions; groups without a clicked target are skipped.
    """
    terms: List[Tensor] = []
    for predictions, labels in groups:
        labels = np.asarray(labels, dtype=np.float64)
        if not np.any(labels == 1.0):
            continue
        weights = dm.exp(predictions)
        clicked = dm.sum(dm.mul(weights, labels))
        everything = dm.sum(weights)
        terms.append(dm.sub(dm.log(everything), dm.log(clicked)))
    total = sum_terms(terms)
    return Tensor(0.0) if total is None else total


@dataclass
class LossBreakdown:
    l_ccl: Tensor
    l_ccl_pos: Tensor
    l_ccl_neg: Tensor
    l_ce: Tensor
    l_ce_pos: Tensor
    l_ce_neg: Tensor
    l_cui: Tensor
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        """Scalar values keyed in step-line order (total first)."""
        return {name: getattr(self, name).item() for name in STEP_LINE_FIELDS}


def total_loss(terms: Mapping[Objective, Tensor], enabled: Optional[Iterable[Objective]] = None) -> LossBreakdown:
    """
    Unweighted sum of the seven terms.

    Terms that are missing or not in ``enabled`` become constant zeros, so
    ``total`` is always the sum of the reported fields.
    """
    enabled = set(Objective) if enabled is None else set(enabled)
    parts = {}
    for objective in Objective:
        term = terms.get(objective)
        parts[objective.value] = term if term is not None and objective in enabled else Tensor(0.0)

    total = Tensor(0.0)
    for objective in Objective:
        total = dm.add(total, parts[objective.value])
    return LossBreakdown(total=total, **parts)


def format_step_line(step: int, values: Mapping[str, float]) -> str:
    """``step total l_ccl l_ccl+ l_ccl- l_ce l_ce+ l_ce- l_cui``"""
    return f"{step} " + " ".join(f"{values[name]:.6f}" for name in STEP_LINE_FIELDS)


def mean_breakdowns(rows: Sequence[Mapping[str, float]]) -> Dict[str, float]:
    if not rows:
        return {}
    return {name: float(np.mean([row[name] for row in rows])) for name in STEP_LINE_FIELDS}
