"""
Trainable parameters and forward computations.

Scores, the attention encoder and the CTR head are all built from diffmath
operations, so they record on whatever tape is active.

Checkpoint format (little-endian): magic ``CCLM``, u32 dim, then each
parameter as u32 rank, u32 dims..., f64 values..., in the order of
``ModelParams.named_tensors``. Training state may follow (see train.py).
"""

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffmath as dm
from .data import FeatureTable
from .diffmath import Tensor
from .errors import CheckpointError, ContractError, DomainError


logger = logging.getLogger(__name__)

MODEL_MAGIC = b"CCLM"
PARAM_ORDER = ("w1", "w2", "w3", "w4", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mlp_w3", "mlp_b3")


def param_count(dim: int) -> int:
    """Trainable scalars for feature dimension ``dim`` (four dim×dim maps plus the 3d→d→d/2→1 head)."""
    if dim < 2 or dim % 2:
        raise DomainError(f"dim must be even and at least 2, got {dim}")
    half = dim // 2
    return 4 * dim * dim + (3 * dim * dim + dim) + (dim * half + half) + (half + 1)


@dataclass
class ModelParams:
    """
    W1, W2 score item pairs; W3 is the encoder map; W4 projects targets.

    The MLP head maps [u, vW4, u*vW4] (3·dim) to dim, dim/2 and finally one
    logit, with relu, relu and sigmoid activations. Biases are 1×n rows.
    """
    dim: int
    w1: Tensor
    w2: Tensor
    w3: Tensor
    w4: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    mlp_w3: Tensor
    mlp_b3: Tensor

    @staticmethod
    def shapes(dim: int) -> Dict[str, Tuple[int, int]]:
        half = dim // 2
        return {
            "w1": (dim, dim),
            "w2": (dim, dim),
            "w3": (dim, dim),
            "w4": (dim, dim),
            "mlp_w1": (3 * dim, dim),
            "mlp_b1": (1, dim),
            "mlp_w2": (dim, half),
            "mlp_b2": (1, half),
            "mlp_w3": (half, 1),
            "mlp_b3": (1, 1),
        }

    @classmethod
    def initialize(cls, dim: int, rng: np.random.Generator) -> "ModelParams":
        """Weights ~ U(-1/sqrt(dim), 1/sqrt(dim)); biases zero."""
        param_count(dim)
        bound = 1.0 / math.sqrt(dim)
        tensors = {}
        for name, shape in cls.shapes(dim).items():
            if name.startswith("mlp_b"):
                values = np.zeros(shape)
            else:
                values = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(values, requires_grad=True, name=name)
        return cls(dim=dim, **tensors)

    @classmethod
    def from_arrays(cls, dim: int, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        expected = cls.shapes(dim)
        tensors = {}
        for name in PARAM_ORDER:
            if name not in arrays:
                raise ContractError(f"missing parameter {name}")
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.shape != expected[name]:
                raise ContractError(f"{name}: expected shape {expected[name]}, got {values.shape}")
            tensors[name] = Tensor(values, requires_grad=True, name=name)
        return cls(dim=dim, **tensors)

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def tensors(self) -> List[Tensor]:
        return [getattr(self, name) for name in PARAM_ORDER]

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: t.grad for name, t in self.named_tensors()}

    def zero_grad(self) -> None:
        for tensor in self.tensors():
            tensor.zero_grad()

    def size(self) -> int:
        return sum(t.size for t in self.tensors())


class Role(str, Enum):
    QUERY = "query"
    POSITIVE = "pos"
    NEGATIVE = "neg"


@dataclass(frozen=True)
class ScoredSequence:
    """
    A history with its pairwise relevance and importance scores.

    ``alpha`` is the exact row sum of ``alpha_pair``. ``detached_alpha`` has
    the same values but no gradient path; augmentation and margins read it.
    """
    item_ids: Tuple[int, ...]
    rows: Tensor
    alpha_pair: Tensor
    alpha: Tensor
    detached_alpha: Tensor

    def __len__(self) -> int:
        return len(self.item_ids)


@dataclass(frozen=True)
class UserRepresentation:
    vector: Tensor
    role: Role = Role.QUERY
    index: Optional[int] = None


def score_sequence(params: ModelParams, features: FeatureTable, history: Sequence[int]) -> ScoredSequence:
    """alpha_pair[i][j] = (v_i W1)·(v_j W2); alpha = row sums."""
    if len(history) == 0:
        raise ContractError("cannot score an empty history")
    rows = Tensor(features.lookup(history))
    left = dm.matmul(rows, params.w1)
    right = dm.matmul(rows, params.w2)
    alpha_pair = dm.matmul(left, dm.transpose(right))
    alpha = dm.sum(alpha_pair, axis=1)
    return ScoredSequence(tuple(int(i) for i in history), rows, alpha_pair, alpha, dm.detach(alpha))


def score_substitutes(
    params: ModelParams,
    scored: ScoredSequence,
    pool: Sequence[int],
    features: FeatureTable,
) -> np.ndarray:
    """Detached relatedness beta[t][k] = (v_t W1)·(z_k W2), shape N_u × N_z."""
    if len(pool) == 0:
        raise ContractError("substitute pool is empty")
    with dm.no_grad():
        left = dm.matmul(scored.rows, params.w1)
        right = dm.matmul(Tensor(features.lookup(pool)), params.w2)
        beta = dm.matmul(left, dm.transpose(right))
    return dm.detach(beta).values


def encode(
    params: ModelParams,
    scored: ScoredSequence,
    role: Role = Role.QUERY,
    index: Optional[int] = None,
) -> UserRepresentation:
    """
    Single-layer attention encoder.

    v̂_t = Σ_i softmax_i(alpha_pair[t])·(v_i W3), u = Σ_t softmax_t(alpha)·v̂_t.
    Both softmaxes use the non-detached scores. The result is a 1×dim row.
    """
    projected = dm.matmul(scored.rows, params.w3)
    mixing = dm.softmax(scored.alpha_pair, axis=1)
    updated = dm.matmul(mixing, projected)
    weights = dm.reshape(dm.softmax(scored.alpha), (1, len(scored)))
    return UserRepresentation(dm.matmul(weights, updated), role, index)


def encode_many(params: ModelParams, features: FeatureTable, sequences: Sequence[Sequence[int]]) -> Tensor:
    """
    ``encode`` for S histories of one common length, stacked into an S×dim tensor.

    Row s equals ``encode(params, score_sequence(params, features, sequences[s]))``.
    """
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ContractError(f"encode_many needs histories of one length, got lengths {sorted(lengths)}")
    (n_u,) = lengths
    if n_u == 0:
        raise ContractError("cannot score an empty history")
    rows = Tensor(np.stack([features.lookup(s) for s in sequences]))
    alpha_pair = dm.matmul(dm.matmul(rows, params.w1), dm.transpose(dm.matmul(rows, params.w2)))
    alpha = dm.sum(alpha_pair, axis=2)
    updated = dm.matmul(dm.softmax(alpha_pair, axis=2), dm.matmul(rows, params.w3))
    weights = dm.reshape(dm.softmax(alpha, axis=1), (len(sequences), 1, n_u))
    return dm.reshape(dm.matmul(weights, updated), (len(sequences), params.dim))


def predict_ctr_many(params: ModelParams, users: Tensor, targets: Sequence[int], features: FeatureTable) -> Tensor:
    """Click probabilities of every (user row, target) pair, shape R×M."""
    n_users, n_targets = users.shape[0], len(targets)
    projected = dm.matmul(Tensor(features.lookup(targets)), params.w4)
    u = dm.reshape(users, (n_users, 1, params.dim))
    v = dm.reshape(projected, (1, n_targets, params.dim))
    joint = dm.concat(
        [dm.mul(u, np.ones((1, n_targets, 1))), dm.mul(np.ones((n_users, 1, 1)), v), dm.mul(u, v)],
        axis=2,
    )
    hidden = dm.relu(dm.add(dm.matmul(joint, params.mlp_w1), params.mlp_b1))
    hidden = dm.relu(dm.add(dm.matmul(hidden, params.mlp_w2), params.mlp_b2))
    logits = dm.add(dm.matmul(hidden, params.mlp_w3), params.mlp_b3)
    return dm.reshape(dm.sigmoid(logits), (n_users, n_targets))


def predict_ctr(
    params: ModelParams,
    user: UserRepresentation,
    targets: Sequence[int],
    features: FeatureTable,
) -> Tensor:
    """Click probabilities for ``targets`` (shape M) from MLP([u, vW4, u*vW4])."""
    return dm.reshape(predict_ctr_many(params, user.vector, targets, features), (len(targets),))


# ============================================================================
# CHECKPOINTS
# ============================================================================

def write_tensor(f: BinaryIO, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    f.write(struct.pack("<I", values.ndim))
    f.write(struct.pack(f"<{values.ndim}I", *values.shape))
    f.write(values.astype("<f8").tobytes())


def _read_exact(f: BinaryIO, size: int) -> bytes:
    chunk = f.read(size)
    if len(chunk) != size:
        raise CheckpointError("checkpoint is truncated")
    return chunk


def read_tensor(f: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    values = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").astype(np.float64)
    return values.reshape(shape)


def write_params(f: BinaryIO, params: ModelParams) -> None:
    f.write(MODEL_MAGIC)
    f.write(struct.pack("<I", params.dim))
    for _, tensor in params.named_tensors():
        write_tensor(f, tensor.values)


def read_params(f: BinaryIO) -> ModelParams:
    magic = f.read(4)
    if magic != MODEL_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MODEL_MAGIC!r}")
    (dim,) = struct.unpack("<I", _read_exact(f, 4))
    arrays = {name: read_tensor(f) for name in PARAM_ORDER}
    try:
        return ModelParams.from_arrays(dim, arrays)
    except ContractError as e:
        raise CheckpointError(str(e)) from e


def save_checkpoint(path: Union[str, Path], params: ModelParams) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        write_params(f, params)
    logger.info(f"Wrote checkpoint {path}")


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    """Read parameters, ignoring any training state appended after them."""
    with open(path, "rb") as f:
        return read_params(f)
