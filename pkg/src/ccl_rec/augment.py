"""
Hardness-aware replacement augmentation.

A positive replaces low-importance behaviors with unrelated substitutes; a
negative replaces important behaviors with related ones. Each augmented
sequence carries a hardness score computed from the detached importance and
relatedness scores, and the sampling weights are steered by a strategy
(random, harder, easier, easy2hard, hard2easy).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import Strategy
from .diffmath import softmax_values
from .errors import AugmentationError, ContractError
from .model import ScoredSequence


logger = logging.getLogger(__name__)

MAX_SUBSTITUTE_ATTEMPTS = 100
DUMP_HEADER = "user_id polarity hardness replacements"


class Polarity(str, Enum):
    POSITIVE = "pos"
    NEGATIVE = "neg"


@dataclass(frozen=True)
class Replacement:
    """Behavior at ``position`` replaced by pool entry ``substitute``."""
    position: int
    substitute: int


@dataclass(frozen=True)
class AugmentedSequence:
    base: Tuple[int, ...]
    replacements: Tuple[Replacement, ...]
    polarity: Polarity
    hardness: float
    item_ids: Tuple[int, ...]
    user: Optional[int] = None

    @property
    def n_r(self) -> int:
        return len(self.replacements)


@dataclass
class StrategyState:
    """
    Sampling strategy plus training progress in [0, 1].

    ``n_r`` overrides the number of replacements per sample; ``None`` keeps
    the halving rule.
    """
    strategy: Strategy = Strategy.EASY2HARD
    progress: float = 0.0
    n_r: Optional[int] = None

    def advance_to(self, completed_steps: int, total_steps: int) -> None:
        progress = 1.0 if total_steps <= 0 else min(1.0, completed_steps / total_steps)
        if progress < self.progress:
            raise ContractError(f"progress cannot move backwards ({self.progress} -> {progress})")
        self.progress = progress


def _hardness_tables(alpha: np.ndarray, beta: np.ndarray, sign: float) -> Tuple[np.ndarray, np.ndarray]:
    """Importance softmax over positions and row-wise relatedness softmax over the pool."""
    importance = softmax_values(sign * np.asarray(alpha, dtype=np.float64))
    relatedness = softmax_values(sign * np.asarray(beta, dtype=np.float64), axis=-1)
    return importance, relatedness


def _hardness(alpha: np.ndarray, beta: np.ndarray, replacements: Sequence[Replacement], sign: float) -> float:
    if not replacements:
        raise ContractError("hardness needs at least one replacement")
    importance, relatedness = _hardness_tables(alpha, beta, sign)
    return _table_hardness(importance, relatedness, replacements)


def _table_hardness(importance: np.ndarray, relatedness: np.ndarray, replacements: Sequence[Replacement]) -> float:
    return float(sum(importance[r.position] * relatedness[r.position, r.substitute] for r in replacements))


def hardness_negative(alpha: np.ndarray, beta: np.ndarray, replacements: Sequence[Replacement]) -> float:
    """Σ softmax(alpha)[m] · softmax(beta[m])[n] over the replacements."""
    return _hardness(alpha, beta, replacements, 1.0)


def hardness_positive(alpha: np.ndarray, beta: np.ndarray, replacements: Sequence[Replacement]) -> float:
    """Σ softmax(-alpha)[m] · softmax(-beta[m])[n] over the replacements."""
    return _hardness(alpha, beta, replacements, -1.0)


def sampling_weights(scores: np.ndarray, polarity: Polarity, state: StrategyState) -> np.ndarray:
    """
    Probability vector over ``scores`` for the current strategy.

    The "hard" weights maximise the polarity's expected hardness (softmax of
    the scores for negatives, of the negated scores for positives) and the
    "easy" weights are the other one. easy2hard blends linearly from easy to
    hard as progress goes 0 -> 1; hard2easy runs the other way. A matrix of
    scores gives one distribution per row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if state.strategy is Strategy.RANDOM:
        return np.full(scores.shape, 1.0 / scores.shape[-1])

    related = softmax_values(scores, axis=-1)
    unrelated = softmax_values(-scores, axis=-1)
    hard, easy = (related, unrelated) if polarity is Polarity.NEGATIVE else (unrelated, related)
    if state.strategy is Strategy.HARDER:
        return hard
    if state.strategy is Strategy.EASIER:
        return easy
    t = state.progress
    if state.strategy is Strategy.EASY2HARD:
        mixed = (1.0 - t) * easy + t * hard
    else:
        mixed = (1.0 - t) * hard + t * easy
    return mixed / mixed.sum(axis=-1, keepdims=True)


def _draw(weights: np.ndarray, available: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn ∝ weights among ``available``; uniform if that mass underflowed."""
    cumulative = np.cumsum(np.where(available, weights, 0.0))
    if cumulative[-1] <= 0.0:
        cumulative = np.cumsum(available.astype(np.float64))
    pick = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(pick, cumulative.size - 1)


def replacement_count(n_u: int, state: StrategyState) -> Tuple[int, int]:
    """(candidate positions, replacements per sample) for a history of length n_u."""
    candidates = math.ceil(n_u / 2)
    n_r = state.n_r if state.n_r is not None else math.ceil(candidates / 2)
    return candidates, min(n_r, candidates)


def construct(
    scored: ScoredSequence,
    beta: np.ndarray,
    pool: Sequence[int],
    polarity: Polarity,
    n: int,
    state: StrategyState,
    rng: np.random.Generator,
    user: Optional[int] = None,
) -> List[AugmentedSequence]:
    """
    Build ``n`` augmented sequences of one polarity.

    Candidates are the lowest-importance half of the history for positives
    and the highest-importance half for negatives (ties go to the lower
    index). Positions are drawn without replacement from the candidates, then
    each gets a substitute drawn from its beta row; substitutes already in the
    sequence are rejected and redrawn.
    """
    n_u = len(scored)
    if n_u < 2:
        raise ContractError(f"augmentation needs at least 2 behaviors, got {n_u}")
    alpha = scored.detached_alpha.values
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (n_u, len(pool)):
        raise ContractError(f"beta has shape {beta.shape}, expected {(n_u, len(pool))}")

    n_candidates, n_r = replacement_count(n_u, state)
    order = np.argsort(alpha if polarity is Polarity.POSITIVE else -alpha, kind="stable")
    candidates = order[:n_candidates]
    position_weights = sampling_weights(alpha[candidates], polarity, state)
    substitute_weights = sampling_weights(beta, polarity, state)
    importance, relatedness = _hardness_tables(alpha, beta, 1.0 if polarity is Polarity.NEGATIVE else -1.0)

    pool_ids = np.asarray(pool, dtype=np.int64)
    base = scored.item_ids
    in_history = np.isin(pool_ids, np.asarray(base, dtype=np.int64))

    samples = []
    for _ in range(n):
        open_positions = np.ones(n_candidates, dtype=bool)
        positions = []
        for _ in range(n_r):
            pick = _draw(position_weights, open_positions, rng)
            open_positions[pick] = False
            positions.append(int(candidates[pick]))

        blocked = in_history.copy()
        replacements = []
        for position in sorted(positions):
            allowed = np.ones(len(pool_ids), dtype=bool)
            k = None
            for _attempt in range(MAX_SUBSTITUTE_ATTEMPTS):
                if not allowed.any():
                    break
                k = _draw(substitute_weights[position], allowed, rng)
                if not blocked[k]:
                    break
                allowed[k] = False
                logger.debug(f"substitute {pool_ids[k]} collides with the sequence; redrawing")
            else:
                k = None
            if k is None or blocked[k]:
                raise AugmentationError(
                    f"no admissible substitute for position {position} after {MAX_SUBSTITUTE_ATTEMPTS} attempts "
                    f"(pool of {len(pool_ids)} is too small)",
                    user,
                )
            blocked |= pool_ids == pool_ids[k]
            replacements.append(Replacement(position, k))

        item_ids = list(base)
        for r in replacements:
            item_ids[r.position] = int(pool_ids[r.substitute])
        samples.append(
            AugmentedSequence(
                base=base,
                replacements=tuple(replacements),
                polarity=polarity,
                hardness=_table_hardness(importance, relatedness, replacements),
                item_ids=tuple(item_ids),
                user=user,
            )
        )
    return samples


def format_dump(samples: Sequence[AugmentedSequence]) -> List[str]:
    """``user_id polarity hardness pos:sub,pos:sub,...`` per sample."""
    lines = []
    for s in samples:
        pairs = ",".join(f"{r.position}:{r.substitute}" for r in s.replacements)
        lines.append(f"{s.user} {s.polarity.value} {s.hardness:.6f} {pairs}")
    return lines


def summarize(samples: Sequence[AugmentedSequence]) -> Dict[str, Dict[str, float]]:
    """Mean/min/max hardness per polarity."""
    summary = {}
    for polarity in Polarity:
        values = [s.hardness for s in samples if s.polarity is polarity]
        if values:
            summary[polarity.value] = {
                "count": float(len(values)),
                "mean": float(np.mean(values)),
                "min": float(np.min(values)),
                "max": float(np.max(values)),
            }
    return summary
