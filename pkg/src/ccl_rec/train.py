"""
Training loop: batch planning, loss assembly, Adam and run orchestration.

A step samples one substitute pool for the batch, builds the augmentation
plan for every instance without recording (hardness is a constant), then
records the seven loss terms on a single tape and takes one Adam step.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import diffmath as dm
from .augment import AugmentedSequence, Polarity, StrategyState, construct
from .config import Objective, RunConfig, Strategy, TrainConfig, save_config
from .data import Dataset, FeatureTable, TrainingInstance, load_dataset, sample_substitute_pool, substream
from .diffmath import Tensor
from .errors import CheckpointError, ConfigError, NonFiniteGradientError, UndefinedMetricError
from .evaluation import EvalResult, evaluate, format_epoch_line
from .model import (
    PARAM_ORDER,
    ModelParams,
    Role,
    encode_many,
    predict_ctr_many,
    read_params,
    read_tensor,
    score_sequence,
    score_substitutes,
    write_params,
    write_tensor,
)
from .objectives import (
    LossBreakdown,
    format_step_line,
    loss_ccl,
    loss_ccl_neg,
    loss_ccl_pos,
    loss_ce,
    loss_cui,
    mean_breakdowns,
    sum_terms,
    total_loss,
)


logger = logging.getLogger(__name__)

ADAM_MAGIC = b"ADAM"
METRICS_LOG = "metrics.log"
CHECKPOINT = "checkpoint.cclm"

AUGMENTED_OBJECTIVES = {Objective.CCL, Objective.CCL_POS, Objective.CCL_NEG, Objective.CE_POS, Objective.CE_NEG}

ABLATIONS: Dict[str, Tuple[Objective, ...]] = {
    "full": tuple(Objective),
    "-ccl_pm": tuple(o for o in Objective if o not in (Objective.CCL_POS, Objective.CCL_NEG)),
    "-ccl": (Objective.CE, Objective.CE_POS, Objective.CE_NEG, Objective.CUI),
    "-cui": (Objective.CE, Objective.CE_POS, Objective.CE_NEG),
}


# ============================================================================
# OPTIMIZER
# ============================================================================

@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus the step counter."""
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-7
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, config: TrainConfig) -> "AdamState":
        return cls(
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
            m={name: np.zeros_like(t.values) for name, t in params.named_tensors()},
            v={name: np.zeros_like(t.values) for name, t in params.named_tensors()},
        )


def adam_step(
    params: Union[ModelParams, Mapping[str, Tensor]],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> None:
    """
    One bias-corrected Adam update with decoupled weight decay.

    θ ← θ - lr·m̂/(√v̂ + ε) - lr·weight_decay·θ, where the decay uses θ
    from before the step. Every gradient is checked first; a non-finite entry
    aborts the step before anything is modified. ``params`` is a ModelParams
    or any name -> Tensor mapping.
    """
    named = params.named_tensors() if isinstance(params, ModelParams) else list(params.items())
    for name, _ in named:
        bad = int(np.count_nonzero(~np.isfinite(grads[name])))
        if bad:
            raise NonFiniteGradientError(name, bad)

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, tensor in named:
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g

        m_hat = m / correction1
        v_hat = v / correction2
        theta = tensor.values
        tensor.values = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps) - state.lr * state.weight_decay * theta


# ============================================================================
# BATCH PLANNING AND LOSS
# ============================================================================

@dataclass(frozen=True)
class InstancePlan:
    """An instance with its frozen augmentations; both tuples are empty when N_u < 2."""
    instance: TrainingInstance
    positives: Tuple[AugmentedSequence, ...] = ()
    negatives: Tuple[AugmentedSequence, ...] = ()


def prepare_batch(
    params: ModelParams,
    features: FeatureTable,
    batch: Sequence[TrainingInstance],
    config: TrainConfig,
    state: StrategyState,
    epoch: int,
    step: int,
) -> List[InstancePlan]:
    """Sample the shared pool and construct every augmentation, outside any tape."""
    enabled = set(config.objectives)
    if not enabled & AUGMENTED_OBJECTIVES:
        return [InstancePlan(instance) for instance in batch]

    pool = sample_substitute_pool(features.n_items, config.n_z, None, substream(config.seed, "pool", epoch, step))
    logger.debug(f"step {step}: pool of {len(pool)} substitutes")

    plans = []
    short = 0
    with dm.no_grad():
        for index, instance in enumerate(batch):
            if len(instance.history) < 2:
                short += 1
                plans.append(InstancePlan(instance))
                continue
            scored = score_sequence(params, features, instance.history)
            beta = score_substitutes(params, scored, pool, features)
            rng = substream(config.seed, "augment", epoch, step, index)
            positives = construct(scored, beta, pool, Polarity.POSITIVE, config.n_p, state, rng, user=instance.user)
            negatives = construct(scored, beta, pool, Polarity.NEGATIVE, config.n_n, state, rng, user=instance.user)
            plans.append(InstancePlan(instance, tuple(positives), tuple(negatives)))
    if short:
        logger.debug(f"step {step}: {short} instance(s) with a single behavior contribute L_ce and L_cui only")
    return plans


def batch_loss(params: ModelParams, features: FeatureTable, plans: Sequence[InstancePlan], config: RunConfig) -> LossBreakdown:
    """
    Record the seven loss terms for a planned batch on the active tape.

    The query history and its augmentations share one length, so each
    instance is encoded in a single stacked pass. Augmented representations
    are scored against the same targets as the query. L_cui has one term per
    user in the batch, over all of that user's targets. Terms are plain sums
    over the batch.
    """
    enabled = set(config.train.objectives)
    margin = config.margin
    ccl, ccl_pos, ccl_neg, ce, ce_pos, ce_neg = [], [], [], [], [], []
    per_user: Dict[int, List[Tuple[Tensor, np.ndarray]]] = {}
    score_augmented = bool(enabled & {Objective.CE_POS, Objective.CE_NEG})

    for plan in plans:
        instance = plan.instance
        targets = instance.target_items
        labels = np.asarray(instance.labels, dtype=np.float64)
        n_p, n_n = len(plan.positives), len(plan.negatives)
        sequences = [instance.history] + [s.item_ids for s in plan.positives + plan.negatives]
        reps = encode_many(params, features, sequences)

        scored_rows = reps if score_augmented and n_p else dm.index_rows(reps, [0])
        predictions = predict_ctr_many(params, scored_rows, targets, features)
        query_predictions = dm.reshape(dm.index_rows(predictions, [0]), (len(targets),))
        ce.append(loss_ce(query_predictions, labels))
        per_user.setdefault(instance.user, []).append((query_predictions, labels))
        if not n_p:
            continue

        for objective, role, rows, terms in (
            (Objective.CE_POS, Role.POSITIVE, range(1, 1 + n_p), ce_pos),
            (Objective.CE_NEG, Role.NEGATIVE, range(1 + n_p, 1 + n_p + n_n), ce_neg),
        ):
            if objective in enabled:
                block = dm.index_rows(predictions, list(rows))
                terms.append(loss_ce(block, np.tile(labels, (len(rows), 1)), role))

        query = dm.index_rows(reps, [0])
        positives = [(dm.index_rows(reps, [1 + i]), s.hardness) for i, s in enumerate(plan.positives)]
        negatives = [(dm.index_rows(reps, [1 + n_p + j]), s.hardness) for j, s in enumerate(plan.negatives)]
        if Objective.CCL in enabled:
            ccl.append(loss_ccl(query, positives, negatives, margin))
        if Objective.CCL_POS in enabled:
            ccl_pos.append(loss_ccl_pos(query, positives, margin))
        if Objective.CCL_NEG in enabled:
            ccl_neg.append(loss_ccl_neg(query, negatives, margin))

    cui_groups = [
        (dm.concat([p for p, _ in groups], axis=0), np.concatenate([labels for _, labels in groups]))
        for groups in per_user.values()
    ]
    terms = {
        Objective.CCL: sum_terms(ccl),
        Objective.CCL_POS: sum_terms(ccl_pos),
        Objective.CCL_NEG: sum_terms(ccl_neg),
        Objective.CE: sum_terms(ce),
        Objective.CE_POS: sum_terms(ce_pos),
        Objective.CE_NEG: sum_terms(ce_neg),
        Objective.CUI: loss_cui(cui_groups) if Objective.CUI in enabled else None,
    }
    return total_loss(terms, enabled)


def train_step(
    params: ModelParams,
    adam: AdamState,
    features: FeatureTable,
    batch: Sequence[TrainingInstance],
    config: RunConfig,
    state: StrategyState,
    epoch: int,
    step: int,
) -> Dict[str, float]:
    """Plan, record, backpropagate and apply one Adam update; returns the loss values."""
    plans = prepare_batch(params, features, batch, config.train, state, epoch, step)
    params.zero_grad()
    with dm.Tape() as tape:
        breakdown = batch_loss(params, features, plans, config)
    tape.backward(breakdown.total)
    adam_step(params, params.gradients(), adam)
    return breakdown.as_floats()


@dataclass
class EpochResult:
    steps: int
    mean_losses: Dict[str, float]
    step_lines: List[str]


def steps_per_epoch(n_instances: int, batch_size: int) -> int:
    return math.ceil(n_instances / batch_size)


def train_epoch(
    params: ModelParams,
    adam: AdamState,
    dataset: Dataset,
    config: RunConfig,
    state: StrategyState,
    epoch: int,
    first_step: int = 0,
    total_steps: Optional[int] = None,
) -> EpochResult:
    """
    One seeded-shuffle pass over the training instances.

    Strategy progress advances after every step to completed/total_steps;
    ``first_step`` is the number of steps taken in earlier epochs.
    """
    instances = dataset.train
    if not instances:
        return EpochResult(0, {}, [])

    train_config = config.train
    n_steps = steps_per_epoch(len(instances), train_config.batch_size)
    total_steps = n_steps if total_steps is None else total_steps
    order = substream(train_config.seed, "shuffle", epoch).permutation(len(instances))

    rows, lines = [], []
    batches = tqdm(range(n_steps), desc=f"epoch {epoch}", disable=not train_config.show_progress, leave=False)
    for batch_index in batches:
        step = first_step + batch_index + 1
        chosen = order[batch_index * train_config.batch_size:(batch_index + 1) * train_config.batch_size]
        batch = [instances[i] for i in chosen]
        values = train_step(params, adam, dataset.features, batch, config, state, epoch, step)
        state.advance_to(step, total_steps)

        line = format_step_line(step, values)
        logger.debug(line)
        rows.append(values)
        lines.append(line)

    return EpochResult(n_steps, mean_breakdowns(rows), lines)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_training_checkpoint(path: Union[str, Path], params: ModelParams, adam: AdamState) -> None:
    """Model checkpoint followed by ``ADAM``, u64 step counter, m tensors, v tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        write_params(f, params)
        f.write(ADAM_MAGIC)
        f.write(struct.pack("<Q", adam.t))
        for moments in (adam.m, adam.v):
            for name in PARAM_ORDER:
                write_tensor(f, moments[name])
    logger.info(f"Wrote checkpoint {path}")


def load_training_checkpoint(path: Union[str, Path], config: TrainConfig) -> Tuple[ModelParams, AdamState]:
    """Restore params and Adam state; a params-only checkpoint gets fresh moments."""
    with open(path, "rb") as f:
        params = read_params(f)
        adam = AdamState.for_params(params, config)
        magic = f.read(4)
        if not magic:
            return params, adam
        if magic != ADAM_MAGIC:
            raise CheckpointError(f"{path}: unexpected trailer {magic!r}")
        counter = f.read(8)
        if len(counter) != 8:
            raise CheckpointError(f"{path}: truncated optimizer state")
        (adam.t,) = struct.unpack("<Q", counter)
        for moments in (adam.m, adam.v):
            for name in PARAM_ORDER:
                values = read_tensor(f)
                if values.shape != moments[name].shape:
                    raise CheckpointError(f"{path}: moment {name} has shape {values.shape}")
                moments[name] = values
    return params, adam


# ============================================================================
# RUNS
# ============================================================================

@dataclass
class RunResult:
    params: ModelParams
    evaluations: List[Optional[EvalResult]]
    metrics_path: Path
    checkpoint_path: Path

    @property
    def final_auc(self) -> float:
        last = self.evaluations[-1] if self.evaluations else None
        return last.auc if last is not None else float("nan")


def _evaluate_quietly(params: ModelParams, dataset: Dataset, k: int) -> Optional[EvalResult]:
    try:
        return evaluate(params, dataset.features, dataset.heldout, k)
    except UndefinedMetricError as e:
        logger.warning(f"Evaluation skipped: {e}")
        return None


def run(config: RunConfig, resume: Optional[Union[str, Path]] = None, dataset: Optional[Dataset] = None) -> RunResult:
    """
    Train for ``train.epochs`` epochs, evaluating on the held-out split before
    training and after every epoch.

    Writes ``metrics.log``, ``checkpoint.cclm`` and the resolved
    ``config.yaml`` into ``output.dir``. With ``epochs=0`` only the initial
    (or resumed) model is evaluated and saved.
    """
    out_dir = Path(config.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else load_dataset(config)
    train_config = config.train

    if resume is not None:
        params, adam = load_training_checkpoint(resume, train_config)
        logger.info(f"Resumed from {resume} at optimizer step {adam.t}")
    else:
        params = ModelParams.initialize(dataset.features.dim, substream(train_config.seed, "init"))
        adam = AdamState.for_params(params, train_config)
    save_config(config, out_dir / "config.yaml")

    state = StrategyState(train_config.strategy, 0.0, train_config.n_r)
    n_steps = steps_per_epoch(len(dataset.train), train_config.batch_size)
    total_steps = n_steps * train_config.epochs
    logger.info(
        f"Training {params.size()} parameters on {len(dataset.train)} instances: "
        f"{train_config.epochs} epoch(s), {n_steps} step(s) each, strategy {train_config.strategy.value}"
    )

    metrics_path = out_dir / METRICS_LOG
    evaluations = []
    with open(metrics_path, "w", encoding="utf-8") as log:
        result = _evaluate_quietly(params, dataset, config.evaluation.k)
        evaluations.append(result)
        if result is not None:
            log.write(format_epoch_line(0, result) + "\n")

        for epoch in range(1, train_config.epochs + 1):
            epoch_result = train_epoch(params, adam, dataset, config, state, epoch, (epoch - 1) * n_steps, total_steps)
            for line in epoch_result.step_lines:
                log.write(line + "\n")

            result = _evaluate_quietly(params, dataset, config.evaluation.k)
            evaluations.append(result)
            mean_total = epoch_result.mean_losses.get("total", float("nan"))
            if result is not None:
                log.write(format_epoch_line(epoch, result) + "\n")
                logger.info(f"Epoch {epoch}: loss {mean_total:.4f}, auc {result.auc:.4f}, f1@{result.k} {result.f1:.4f}")
            else:
                logger.info(f"Epoch {epoch}: loss {mean_total:.4f}")
            log.flush()

    checkpoint_path = out_dir / CHECKPOINT
    save_training_checkpoint(checkpoint_path, params, adam)
    return RunResult(params, evaluations, metrics_path, checkpoint_path)


def _variant(config: RunConfig, out_dir: Path, **train_updates) -> RunConfig:
    return config.model_copy(
        update={
            "train": config.train.model_copy(update=train_updates),
            "output": config.output.model_copy(update={"dir": out_dir}),
        }
    )


def compare_strategies(config: RunConfig, out_dir: Union[str, Path]) -> Dict[Strategy, RunResult]:
    """Train once per strategy with the same seed; each run writes out_dir/<strategy>/metrics.log."""
    out_dir = Path(out_dir)
    dataset = load_dataset(config)
    results = {}
    for strategy in Strategy:
        logger.info(f"Strategy {strategy.value}")
        results[strategy] = run(_variant(config, out_dir / strategy.value, strategy=strategy), dataset=dataset)
    return results


def run_ablation(
    config: RunConfig,
    seeds: Sequence[int],
    out_dir: Union[str, Path],
    names: Optional[Sequence[str]] = None,
) -> Dict[str, List[float]]:
    """
    Progressively remove loss terms and report held-out AUC per training seed.

    ``names`` picks a subset of ``ABLATIONS`` (default: all, in table order).
    Writes ``ablation.tsv`` with one row per configuration: name, the AUC of
    every seed, then the mean.
    """
    unknown = sorted(set(names or ()) - set(ABLATIONS))
    if unknown:
        raise ConfigError(f"unknown ablation(s) {unknown}; choose from {list(ABLATIONS)}")
    selected = [name for name in ABLATIONS if names is None or name in names]

    out_dir = Path(out_dir)
    dataset = load_dataset(config)
    table: Dict[str, List[float]] = {}
    for name in selected:
        objectives = ABLATIONS[name]
        scores = []
        for seed in seeds:
            variant = _variant(config, out_dir / name / f"seed_{seed}", seed=seed, objectives=list(objectives))
            scores.append(run(variant, dataset=dataset).final_auc)
        table[name] = scores
        logger.info(f"Ablation {name}: mean auc {np.mean(scores):.4f}")

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.tsv", "w", encoding="utf-8") as f:
        f.write("config\t" + "\t".join(f"seed_{s}" for s in seeds) + "\tmean\n")
        for name, scores in table.items():
            f.write(name + "\t" + "\t".join(f"{s:.6f}" for s in scores) + f"\t{np.mean(scores):.6f}\n")
    return table
