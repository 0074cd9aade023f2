"""
Interaction logs, item features and training instances.

Interaction log format: UTF-8 text, one record per line, tab-separated
``user_id item_id timestamp label``. A first line whose first field is not
numeric is treated as a header.

Feature table format: little-endian ``CCLF`` magic, u32 n_items, u32 dim,
then n_items*dim float32 values row-major. Files ending in ``.csv`` hold one
comma-separated row per item instead.
"""

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.special import expit

from .config import RunConfig, SyntheticSpec
from .errors import CapacityError, FeatureIndexError, ParseError


logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"CCLF"
_FEATURE_HEADER = struct.Struct("<4sII")

PathLike = Union[str, Path]


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """
    Named random stream derived from the root seed.

    Distinct (name, keys) give statistically independent generators, and the
    same arguments always give the same stream.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8")), *(int(k) for k in keys)])


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class FeatureTable:
    """Fixed item feature vectors; row i belongs to item i."""
    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] < 1:
            raise ValueError(f"feature rows must be an n_items x dim matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("feature rows contain NaN or Inf")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n_items(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def lookup(self, item_ids: Sequence[int]) -> np.ndarray:
        """Feature rows for ``item_ids`` in order."""
        ids = np.asarray(item_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_items):
            bad = [int(i) for i in ids if i < 0 or i >= self.n_items]
            raise FeatureIndexError(f"item ids {bad[:5]} outside feature table of {self.n_items} items")
        return self.rows[ids]


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: int
    label: int


@dataclass(frozen=True)
class TrainingInstance:
    """
    One scoring context: a user's clicked history and the targets scored against it.

    ``history`` holds clicked items only, oldest first, at most n_max long.
    No target item appears in ``history``.
    """
    user: int
    history: Tuple[int, ...]
    targets: Tuple[Tuple[int, int], ...]

    @property
    def target_items(self) -> List[int]:
        return [item for item, _ in self.targets]

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.targets], dtype=np.float64)


@dataclass(frozen=True)
class Dataset:
    """Everything a run needs: features plus train and held-out instances."""
    features: FeatureTable
    train: List[TrainingInstance]
    heldout: List[TrainingInstance]

    @property
    def n_items(self) -> int:
        return self.features.n_items


# ============================================================================
# INTERACTION LOGS
# ============================================================================

def _parse_int(field: str, name: str, path: PathLike, line_number: int) -> int:
    try:
        return int(field)
    except ValueError:
        raise ParseError(f"{name} must be an integer, got {field!r}", path, line_number) from None


def load_interactions(path: PathLike) -> List[Interaction]:
    """
    Read an interaction log, sorted by (user, timestamp).

    Lines with the wrong number of fields are skipped and counted; a record
    whose fields are present but invalid raises ParseError with its line number.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read interaction log: {e}", path) from e

    records: List[Interaction] = []
    malformed = 0
    first_content = True
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\r\n").split("\t")
        if first_content:
            first_content = False
            if not fields[0].strip().lstrip("-").isdigit():
                continue
        if len(fields) != 4:
            malformed += 1
            logger.debug(f"{path}:{line_number}: expected 4 fields, got {len(fields)}")
            continue

        user = _parse_int(fields[0], "user_id", path, line_number)
        item = _parse_int(fields[1], "item_id", path, line_number)
        timestamp = _parse_int(fields[2], "timestamp", path, line_number)
        label = _parse_int(fields[3], "label", path, line_number)
        if label not in (0, 1):
            raise ParseError(f"label must be 0 or 1, got {label}", path, line_number)
        if user < 0 or item < 0:
            raise ParseError("user_id and item_id must be non-negative", path, line_number)
        records.append(Interaction(user, item, timestamp, label))

    if malformed:
        logger.warning(f"{path}: skipped {malformed} malformed line(s)")
    logger.info(f"Loaded {len(records)} interactions from {path}")
    return sorted(records, key=lambda r: (r.user, r.timestamp))


def write_interactions(path: PathLike, log: Iterable[Interaction], header: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write("user_id\titem_id\ttimestamp\tlabel\n")
        for record in log:
            f.write(f"{record.user}\t{record.item}\t{record.timestamp}\t{record.label}\n")


# ============================================================================
# FEATURE TABLES
# ============================================================================

def load_features(path: PathLike) -> FeatureTable:
    """Read a ``.cclf`` binary or ``.csv`` feature table (widened to float64)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        try:
            rows = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except (OSError, ValueError) as e:
            raise ParseError(f"cannot read feature CSV: {e}", path) from e
        return FeatureTable(rows)

    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read feature table: {e}", path) from e
    if len(blob) < _FEATURE_HEADER.size:
        raise ParseError("feature file shorter than its header", path)
    magic, n_items, dim = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", path)
    expected = n_items * dim * 4
    payload = blob[_FEATURE_HEADER.size:]
    if len(payload) != expected:
        raise ParseError(f"expected {expected} bytes of float32 data, found {len(payload)}", path)
    rows = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n_items, dim)
    return FeatureTable(rows)


def write_features(path: PathLike, table: FeatureTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, table.rows, delimiter=",", fmt="%.9g")
        return
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, table.n_items, table.dim))
        f.write(table.rows.astype("<f4").tobytes())


# ============================================================================
# INSTANCES
# ============================================================================

def _by_user(log: Sequence[Interaction]):
    return groupby(log, key=lambda r: r.user)


def build_instances(log: Sequence[Interaction], n_max: int) -> List[TrainingInstance]:
    """
    Turn a per-user chronological log into training instances.

    Every exposure is a target scored against the clicks strictly before it.
    Consecutive exposures sharing that clicked prefix form one instance (the
    run ends with the next click). Exposures with no earlier click are dropped.
    """
    instances: List[TrainingInstance] = []
    leaked = 0
    for user, records in _by_user(log):
        clicks: List[int] = []
        pending: List[Tuple[int, int]] = []

        def flush():
            nonlocal leaked
            if not clicks or not pending:
                return
            history = tuple(clicks[-n_max:])
            seen = set(history)
            targets = tuple((item, label) for item, label in pending if item not in seen)
            leaked += len(pending) - len(targets)
            if targets:
                instances.append(TrainingInstance(user, history, targets))

        for record in records:
            pending.append((record.item, record.label))
            if record.label == 1:
                flush()
                pending = []
                clicks.append(record.item)
        flush()

    if leaked:
        logger.debug(f"Dropped {leaked} target(s) already present in their history")
    return instances


def split_leave_latest(log: Sequence[Interaction], holdout: int = 1) -> Tuple[List[Interaction], List[Interaction]]:
    """
    Hold out each user's ``holdout`` most recent exposures.

    Users with no more than ``holdout`` records stay entirely in training.
    """
    train: List[Interaction] = []
    heldout: List[Interaction] = []
    for _, records in _by_user(log):
        records = list(records)
        if len(records) <= holdout:
            train.extend(records)
            continue
        train.extend(records[:-holdout])
        heldout.extend(records[-holdout:])
    return train, heldout


def build_eval_instances(
    train_log: Sequence[Interaction],
    heldout: Sequence[Interaction],
    n_max: int,
) -> List[TrainingInstance]:
    """Score each user's held-out exposures against all of their training clicks."""
    clicks = {user: [r.item for r in records if r.label == 1] for user, records in _by_user(train_log)}
    instances = []
    for user, records in _by_user(heldout):
        history = tuple(clicks.get(user, [])[-n_max:])
        if not history:
            continue
        seen = set(history)
        targets = tuple((r.item, r.label) for r in records if r.item not in seen)
        if targets:
            instances.append(TrainingInstance(user, history, targets))
    return instances


# ============================================================================
# SYNTHETIC CORPUS
# ============================================================================

def _latent_factors(spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    users = rng.standard_normal((spec.n_users, spec.latent_dim))
    items = rng.standard_normal((spec.n_items, spec.latent_dim))
    return users, items


def generate_synthetic(spec: SyntheticSpec) -> Tuple[FeatureTable, List[Interaction]]:
    """
    Latent-factor click corpus, fully determined by ``spec``.

    Click probability is sigmoid(signal_scale * user.item / sqrt(latent_dim));
    sampled labels are then flipped with probability click_noise_rate. Item
    features are the item factors, scaled to unit expected norm, lifted into
    ``dim`` by a fixed random orthonormal map plus Gaussian noise.
    """
    rng = substream(spec.seed, "synthetic")
    users, items = _latent_factors(spec, rng)
    lift, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.latent_dim)))
    rows = items @ lift.T / math.sqrt(spec.latent_dim) + spec.feature_noise * rng.standard_normal((spec.n_items, spec.dim))

    log: List[Interaction] = []
    norm = math.sqrt(spec.latent_dim)
    for user in range(spec.n_users):
        exposed = rng.choice(spec.n_items, size=spec.exposures_per_user, replace=False)
        click_prob = expit(spec.signal_scale * (items[exposed] @ users[user]) / norm)
        labels = (rng.random(spec.exposures_per_user) < click_prob).astype(int)
        flips = rng.random(spec.exposures_per_user) < spec.click_noise_rate
        labels = np.where(flips, 1 - labels, labels)
        log.extend(
            Interaction(user, int(item), timestamp, int(label))
            for timestamp, (item, label) in enumerate(zip(exposed, labels))
        )

    logger.info(
        f"Generated synthetic corpus: {spec.n_users} users, {spec.n_items} items, "
        f"{len(log)} interactions, click rate {np.mean([r.label for r in log]):.3f}"
    )
    return FeatureTable(rows), log


def latent_scores(spec: SyntheticSpec, log: Sequence[Interaction]) -> np.ndarray:
    """Noise-free logits user.item / sqrt(latent_dim) for each record of a generated log."""
    users, items = _latent_factors(spec, substream(spec.seed, "synthetic"))
    return np.array([items[r.item] @ users[r.user] for r in log]) / math.sqrt(spec.latent_dim)


def sample_substitute_pool(
    n_items: int,
    n_z: int,
    exclude: Optional[Set[int]],
    rng: np.random.Generator,
) -> List[int]:
    """
    Draw ``n_z`` distinct substitutes uniformly from the gallery minus ``exclude``.

    A batch shares one pool; per-user history collisions are resolved later
    during augmentation.
    """
    excluded = np.fromiter(exclude or (), dtype=np.int64)
    eligible = np.setdiff1d(np.arange(n_items), excluded)
    if n_z > eligible.size:
        raise CapacityError(f"cannot draw {n_z} substitutes from {eligible.size} eligible items")
    return [int(i) for i in rng.choice(eligible, size=n_z, replace=False)]


# ============================================================================
# ASSEMBLY
# ============================================================================

def load_dataset(config: RunConfig) -> Dataset:
    """Build features and leave-latest-out train/held-out instances for a run."""
    if config.synthetic is not None:
        features, log = generate_synthetic(config.synthetic)
    else:
        features = load_features(config.data.features)
        log = load_interactions(config.data.interactions)
        out_of_range = sum(1 for r in log if r.item >= features.n_items)
        if out_of_range:
            raise FeatureIndexError(
                f"{out_of_range} interaction(s) reference items beyond the {features.n_items}-item feature table"
            )

    train_log, heldout_log = split_leave_latest(log, config.data.holdout)
    train = build_instances(train_log, config.data.n_max)
    heldout = build_eval_instances(train_log, heldout_log, config.data.n_max)
    logger.info(f"Dataset: {len(train)} training instances, {len(heldout)} held-out users, dim {features.dim}")
    return Dataset(features, train, heldout)
