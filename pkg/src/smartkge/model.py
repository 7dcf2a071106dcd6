"""Learnable state, attention over the four EGTs, scoring and EGT selection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from smartkge.errors import ConfigError, DataError
from smartkge.geometry import (
    DEFAULT_ORDER,
    EGT,
    apply_reflection,
    apply_rotation,
    apply_scaling,
    apply_translation,
    egt_distance,
    format_order,
    parse_order,
)

MAGIC = "SMARTKGE1"
SCALE_FLOOR = 0.01


class Mode(str, Enum):
    FIXED = "Fixed"
    ADAPTIVE = "Adaptive"
    FROZEN = "Frozen"


class Variant(str, Enum):
    SMART = "smart"
    SMART_M = "smart-m"
    THRESHOLD = "smart-gt"


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters. Defaults are the best WN18RR setting at d=32."""

    dim: int = 32
    norm: int = 2
    gamma: float = 9.0
    alpha: float = 0.0
    eta: int = 512
    batch: int = 1024
    lr: float = 1e-4
    rho: float = 0.1
    steps_t: int = 120_000
    steps_ta: int = 50_000
    steps_f: int = 90_000
    seed: int = 0
    egt_order: tuple[EGT, ...] = DEFAULT_ORDER
    variant: Variant = Variant.SMART
    epsilon: float | None = None
    valid_every: int = 5000
    patience: int = 1
    cross_phase_stop: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "egt_order", parse_order(self.egt_order))
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.validate()

    def validate(self) -> None:
        positive = ("dim", "eta", "batch", "valid_every", "patience")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        for name in ("steps_t", "steps_ta", "steps_f"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.norm not in (1, 2):
            raise ConfigError(f"norm must be 1 or 2, got {self.norm}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.alpha < 0 or self.rho < 0:
            raise ConfigError("alpha and rho must be non-negative")
        if self.variant is Variant.THRESHOLD:
            if self.epsilon is None or not 0 < self.epsilon < 1:
                raise ConfigError(f"variant smart-gt needs epsilon in (0, 1), got {self.epsilon}")

    @property
    def phase_steps(self) -> dict[str, int]:
        return {"T": self.steps_t, "TA": self.steps_ta, "F": self.steps_f}

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class EmbeddingState:
    entity: np.ndarray  # (|E|, d) complex
    trans_u: np.ndarray  # (|R|, d) complex
    rot_theta: np.ndarray  # (|R|, d) real
    ref_phi: np.ndarray  # (|R|, d) real
    scal_s: np.ndarray  # (|R|, d) real

    BANKS = ("trans_u", "rot_theta", "ref_phi", "scal_s")

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    def bank(self, kind: EGT) -> np.ndarray:
        return getattr(self, self.BANKS[kind])

    def params(self) -> dict[str, np.ndarray]:
        return {"entity": self.entity, **{name: getattr(self, name) for name in self.BANKS}}

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(**{k: v.copy() for k, v in self.params().items()})

    def clamp_scaling(self, sign: np.ndarray | None = None) -> None:
        """Hold ``|s| >= 0.01`` without letting any entry change sign.

        ``sign`` is the sign pattern before the update (default: current).
        """
        s = self.scal_s
        if sign is None:
            sign = np.where(s < 0, -1.0, 1.0)
        np.copyto(s, sign * np.maximum(sign * s, SCALE_FLOOR))


@dataclass
class AttentionState:
    logits: np.ndarray  # (|R|, 4), columns in EGT storage order
    mode: Mode = Mode.FIXED
    frozen_mask: np.ndarray | None = None
    egt_order: tuple[EGT, ...] = DEFAULT_ORDER

    def copy(self) -> "AttentionState":
        mask = None if self.frozen_mask is None else self.frozen_mask.copy()
        return AttentionState(self.logits.copy(), self.mode, mask, self.egt_order)

    @property
    def n_relations(self) -> int:
        return self.logits.shape[0]


def init_state(n_entities: int, n_relations: int, config: ModelConfig, rng: np.random.Generator):
    """Uniform initialisation; attention starts Fixed at 0.25."""
    d = config.dim
    c = 6.0 / np.sqrt(d)
    ent_re = rng.uniform(-c, c, (n_entities, d))
    ent_im = rng.uniform(-c, c, (n_entities, d))
    u_re = rng.uniform(-c, c, (n_relations, d))
    u_im = rng.uniform(-c, c, (n_relations, d))
    # negating [-pi, pi) gives (-pi, pi]
    theta = -rng.uniform(-np.pi, np.pi, (n_relations, d))
    phi = -rng.uniform(-np.pi, np.pi, (n_relations, d))
    s = rng.uniform(0.5, 1.5, (n_relations, d))
    state = EmbeddingState(ent_re + 1j * ent_im, u_re + 1j * u_im, theta, phi, s)
    att = AttentionState(np.zeros((n_relations, 4)), Mode.FIXED, None, config.egt_order)
    return state, att


def init_for_kg(kg, config: ModelConfig, rng: np.random.Generator):
    return init_state(kg.n_entities, kg.n_relations, config, rng)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weight_matrix(att: AttentionState) -> np.ndarray:
    """Effective (|R|, 4) weights for every relation."""
    if att.mode is Mode.FIXED:
        return np.full(att.logits.shape, 0.25)
    if att.mode is Mode.ADAPTIVE:
        return softmax_rows(att.logits)
    mask = att.frozen_mask
    return mask / mask.sum(axis=1, keepdims=True)


def effective_weights(att: AttentionState, r: int) -> np.ndarray:
    return weight_matrix(att)[r]


def relation_params(state: EmbeddingState, r):
    return state.trans_u[r], state.rot_theta[r], state.ref_phi[r], state.scal_s[r]


def transform_heads(state: EmbeddingState, r, h):
    """The four transformed heads, stacked on a new axis -2 in storage order."""
    u, theta, phi, s = relation_params(state, r)
    return np.stack(
        [
            apply_translation(u, h),
            apply_rotation(theta, h),
            apply_reflection(phi, h),
            apply_scaling(s, h),
        ],
        axis=-2,
    )


def egt_distances(state: EmbeddingState, heads, rels, tails, p: int = 2) -> np.ndarray:
    """Per-EGT distances, shape ``(n, 4)``, for index arrays of triples."""
    h = state.entity[heads]
    t = state.entity[tails]
    x = transform_heads(state, rels, h)
    return egt_distance(x, t[..., None, :], p)


def score_triples(state: EmbeddingState, att: AttentionState, heads, rels, tails, p: int = 2) -> np.ndarray:
    w = weight_matrix(att)[rels]
    return -np.sum(w * egt_distances(state, heads, rels, tails, p), axis=-1)


def score_triple(state: EmbeddingState, att: AttentionState, triple, p: int = 2) -> float:
    """Plausibility ``-sum_tau w[r, tau] * ||tau(h) - t||``; never positive."""
    h, r, t = triple
    return float(score_triples(state, att, np.array([h]), np.array([r]), np.array([t]), p)[0])


def select_from_weights(weights: Sequence[float], order: Sequence[EGT] = DEFAULT_ORDER) -> EGT:
    """Argmax over a weight row; exact ties go to the earliest EGT in ``order``."""
    weights = np.asarray(weights, dtype=float)
    best = weights.max()
    for kind in order:
        if weights[kind] == best:
            return kind
    raise AssertionError("unreachable")


def select_egt(att: AttentionState, r: int) -> EGT:
    return select_from_weights(effective_weights(att, r), att.egt_order)


def vote(selections: Iterable[EGT], order: Sequence[EGT] = DEFAULT_ORDER) -> EGT:
    counts = np.zeros(4)
    n = 0
    for kind in selections:
        counts[kind] += 1
        n += 1
    if n == 0:
        raise ValueError("majority vote needs at least one selection")
    return select_from_weights(counts, order)


def majority_vote(att: AttentionState, relations: Iterable[int]) -> EGT:
    return vote((select_egt(att, r) for r in relations), att.egt_order)


def threshold_select(weights: Sequence[float], epsilon: float) -> set[EGT]:
    """EGTs whose weight is strictly above ``epsilon``; may be empty."""
    weights = np.asarray(weights, dtype=float)
    return {kind for kind in EGT if weights[kind] > epsilon}


def freeze_weights(
    weights: np.ndarray,
    variant: Variant,
    epsilon: float | None = None,
    order: Sequence[EGT] = DEFAULT_ORDER,
    relation_labels: Sequence[str] | None = None,
) -> np.ndarray:
    """Binary (|R|, 4) mask from a weight (or adherence) matrix."""
    variant = Variant(variant)
    n = weights.shape[0]
    mask = np.zeros((n, 4))
    if variant is Variant.SMART:
        for r in range(n):
            mask[r, select_from_weights(weights[r], order)] = 1.0
    elif variant is Variant.SMART_M:
        winner = vote((select_from_weights(weights[r], order) for r in range(n)), order)
        mask[:, winner] = 1.0
    else:
        if epsilon is None or not 0 < epsilon < 1:
            raise ConfigError(f"threshold selection needs epsilon in (0, 1), got {epsilon}")
        for r in range(n):
            chosen = threshold_select(weights[r], epsilon)
            if not chosen:
                name = relation_labels[r] if relation_labels is not None else str(r)
                raise ConfigError(
                    f"relation {name}: no EGT weight exceeds epsilon={epsilon} "
                    f"(weights {np.round(weights[r], 4).tolist()})"
                )
            for kind in chosen:
                mask[r, kind] = 1.0
    return mask


def freeze(att: AttentionState, variant: Variant, epsilon: float | None = None, relation_labels=None) -> AttentionState:
    if att.mode is Mode.FROZEN:
        raise ConfigError("attention is already frozen")
    mask = freeze_weights(weight_matrix(att), variant, epsilon, att.egt_order, relation_labels)
    return AttentionState(att.logits.copy(), Mode.FROZEN, mask, att.egt_order)


def frozen_from_mask(mask: np.ndarray, order: Sequence[EGT] = DEFAULT_ORDER) -> AttentionState:
    mask = np.asarray(mask, dtype=float)
    if np.any(mask.sum(axis=1) == 0):
        raise ConfigError("every frozen row needs at least one selected EGT")
    return AttentionState(np.zeros(mask.shape), Mode.FROZEN, mask, tuple(order))


def save_checkpoint(path: str | Path, state: EmbeddingState, att: AttentionState) -> None:
    n_ent, d = state.entity.shape
    n_rel = state.trans_u.shape[0]
    mask = att.frozen_mask if att.frozen_mask is not None else np.zeros((n_rel, 4))
    header = f"{MAGIC} {n_ent} {n_rel} {d} {format_order(att.egt_order)} {att.mode.value}\n"
    arrays = [
        state.entity.real,
        state.entity.imag,
        state.trans_u.real,
        state.trans_u.imag,
        state.rot_theta,
        state.ref_phi,
        state.scal_s,
        att.logits,
        mask,
    ]
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint_header(path: str | Path) -> tuple[int, int, int, tuple[EGT, ...], Mode]:
    with open(path, "rb") as f:
        line = f.readline().decode("ascii", errors="replace").split()
    if len(line) != 6 or line[0] != MAGIC:
        raise DataError(f"{path}: not a {MAGIC} checkpoint")
    try:
        return int(line[1]), int(line[2]), int(line[3]), parse_order(line[4]), Mode(line[5])
    except ValueError as exc:
        raise DataError(f"{path}: bad checkpoint header: {exc}") from None


def load_checkpoint(path: str | Path) -> tuple[EmbeddingState, AttentionState]:
    n_ent, n_rel, d, order, mode = read_checkpoint_header(path)
    with open(path, "rb") as f:
        f.readline()
        raw = f.read()
    shapes = [(n_ent, d)] * 2 + [(n_rel, d)] * 5 + [(n_rel, 4)] * 2
    expected = sum(a * b for a, b in shapes) * 8
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8")
    arrays, offset = [], 0
    for shape in shapes:
        size = shape[0] * shape[1]
        arrays.append(flat[offset : offset + size].reshape(shape).astype(np.float64))
        offset += size
    ent_re, ent_im, u_re, u_im, theta, phi, s, logits, mask = arrays
    entity = np.empty((n_ent, d), dtype=np.complex128)
    entity.real, entity.imag = ent_re, ent_im
    trans_u = np.empty((n_rel, d), dtype=np.complex128)
    trans_u.real, trans_u.imag = u_re, u_im
    state = EmbeddingState(entity, trans_u, theta, phi, s)
    att = AttentionState(logits, mode, mask if mode is Mode.FROZEN else None, order)
    return state, att
