"""Negative sampling, self-adversarial loss, Adam and the three learning phases."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from smartkge.errors import ConfigError, DataError, DivergenceError
from smartkge.evaluation import MetricsReport, evaluate
from smartkge.geometry import EGT, apply_egt, backprop_egt, distance_and_grad, unit_phasor
from smartkge.kgdata import KnowledgeGraph, Triple
from smartkge.model import (
    AttentionState,
    EmbeddingState,
    ModelConfig,
    Mode,
    freeze,
    freeze_weights,
    frozen_from_mask,
    init_for_kg,
    select_egt,
    select_from_weights,
    weight_matrix,
)

log = logging.getLogger(__name__)

PHASES = ("T", "TA", "F")
PHASE_LABELS = {"T": "SMART-T", "TA": "SMART-TA", "F": "SMART"}
_REQUIRED_MODE = {"T": Mode.FIXED, "TA": Mode.ADAPTIVE, "F": Mode.FROZEN}


@dataclass
class Batch:
    positives: np.ndarray  # (beta, 3)
    negatives: np.ndarray  # (beta, eta, 3)
    head_corrupted: np.ndarray  # (beta, eta) bool


def corrupt(positives: np.ndarray, eta: int, n_entities: int, rng: np.random.Generator) -> Batch:
    """Raw (unfiltered) corruption: one side per negative, entity uniform over E minus the original."""
    if n_entities < 2:
        raise DataError("negative sampling needs at least 2 entities")
    if eta < 1:
        raise ConfigError(f"eta must be >= 1, got {eta}")
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    beta = positives.shape[0]
    head_side = rng.random((beta, eta)) < 0.5
    draw = rng.integers(0, n_entities - 1, size=(beta, eta))
    negatives = np.repeat(positives[:, None, :], eta, axis=1)
    original = np.where(head_side, negatives[..., 0], negatives[..., 2])
    replacement = draw + (draw >= original)
    negatives[..., 0] = np.where(head_side, replacement, negatives[..., 0])
    negatives[..., 2] = np.where(head_side, negatives[..., 2], replacement)
    return Batch(positives, negatives, head_side)


def sample_negatives(kg: KnowledgeGraph | int, positive, eta: int, rng: np.random.Generator) -> list[Triple]:
    n_entities = kg if isinstance(kg, int) else kg.n_entities
    batch = corrupt(np.asarray([positive]), eta, n_entities, rng)
    return [Triple(*map(int, row)) for row in batch.negatives[0]]


def adversarial_weights(neg_scores: np.ndarray, alpha: float) -> np.ndarray:
    z = alpha * neg_scores
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def scatter_rows(rows: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``values[i]`` into row ``rows[i]`` of an ``(n_rows, k)`` array."""
    k = values.shape[1]
    flat = (rows[:, None] * k + np.arange(k)).ravel()
    if np.iscomplexobj(values):
        out = np.empty((n_rows, k), dtype=values.dtype)
        out.real = np.bincount(flat, values.real.ravel(), n_rows * k).reshape(n_rows, k)
        out.imag = np.bincount(flat, values.imag.ravel(), n_rows * k).reshape(n_rows, k)
        return out
    return np.bincount(flat, values.ravel(), n_rows * k).reshape(n_rows, k)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def self_adversarial_loss(
    state: EmbeddingState,
    att: AttentionState,
    batch: Batch,
    config: ModelConfig,
    adv_weights: np.ndarray | None = None,
):
    """Loss and dense gradients for one batch.

    ``mean_i[-log sig(gamma + s_pos) - sum_j p_ij log sig(-s_neg_ij - gamma)] + reg``
    with ``p = softmax(alpha * s_neg)`` held constant. ``adv_weights``
    overrides ``p``. The regulariser is ``rho`` times the mean squared
    modulus over touched entity rows and touched, active ``u``/``s`` rows.
    Returns ``(loss, grads)``; ``grads`` also has a ``logits`` entry
    (zero unless the attention is Adaptive).
    """
    p = config.norm
    beta, eta = batch.negatives.shape[:2]
    triples = np.concatenate([batch.positives, batch.negatives.reshape(-1, 3)])
    hi, ri, ti = triples[:, 0], triples[:, 1], triples[:, 2]
    h = state.entity[hi]
    t = state.entity[ti]
    w_all = weight_matrix(att)
    w = w_all[ri]

    # pruned EGTs (zero weight everywhere in the batch) contribute nothing
    active = [kind for kind in EGT if np.any(w[:, kind] != 0)]
    units = {
        kind: unit_phasor(kind, state.bank(kind))[ri] for kind in (EGT.ROT, EGT.REF) if kind in active
    }
    xs, gs, params = {}, {}, {}
    dist = np.zeros((len(triples), 4))
    for kind in active:
        param = state.bank(kind)[ri]
        x = apply_egt(kind, param, h, units.get(kind))
        dist[:, kind], gs[kind] = distance_and_grad(x, t, p)
        xs[kind] = x
        params[kind] = param

    scores = -np.sum(w * dist, axis=1)
    s_pos = scores[:beta]
    s_neg = scores[beta:].reshape(beta, eta)
    if adv_weights is None:
        adv_weights = adversarial_weights(s_neg, config.alpha)
    per_pos = np.logaddexp(0.0, -(config.gamma + s_pos)) + np.sum(
        adv_weights * np.logaddexp(0.0, s_neg + config.gamma), axis=1
    )
    loss = float(np.mean(per_pos))

    dscore = np.empty(len(triples))
    dscore[:beta] = -_sigmoid(-(config.gamma + s_pos)) / beta
    dscore[beta:] = (adv_weights * _sigmoid(s_neg + config.gamma)).reshape(-1) / beta

    grad_h = np.zeros_like(h)
    grad_t = np.zeros_like(t)
    n_rel = state.trans_u.shape[0]
    grads = {name: np.zeros_like(state.bank(kind)) for kind, name in zip(EGT, EmbeddingState.BANKS)}
    for kind in active:
        coef = -dscore * w[:, kind]
        g = coef[:, None] * gs[kind]
        gp, gh = backprop_egt(kind, params[kind], h, xs[kind], g, units.get(kind))
        grad_h += gh
        grad_t -= g
        grads[EmbeddingState.BANKS[kind]] = scatter_rows(ri, gp, n_rel)
    grads["entity"] = scatter_rows(np.concatenate([hi, ti]), np.concatenate([grad_h, grad_t]), state.entity.shape[0])
    grads["logits"] = np.zeros_like(att.logits)

    if att.mode is Mode.ADAPTIVE:
        mixed = np.sum(w * dist, axis=1, keepdims=True)
        dlogits = dscore[:, None] * (-w * (dist - mixed))
        grads["logits"] = scatter_rows(ri, dlogits, n_rel)

    if config.rho > 0:
        loss += _add_regulariser(state, att, hi, ri, ti, config.rho, grads)

    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError(f"non-finite loss or gradient (loss={loss})")
    return loss, grads


def _add_regulariser(state, att, hi, ri, ti, rho, grads) -> float:
    ent_rows = np.unique(np.concatenate([hi, ti]))
    rel_rows = np.unique(ri)
    if att.mode is Mode.FROZEN:
        u_rows = rel_rows[att.frozen_mask[rel_rows, EGT.TRANS] > 0]
        s_rows = rel_rows[att.frozen_mask[rel_rows, EGT.SCAL] > 0]
    else:
        u_rows = s_rows = rel_rows
    d = state.dim
    count = (len(ent_rows) + len(u_rows) + len(s_rows)) * d
    e = state.entity[ent_rows]
    u = state.trans_u[u_rows]
    s = state.scal_s[s_rows]
    total = np.sum(np.abs(e) ** 2) + np.sum(np.abs(u) ** 2) + np.sum(s * s)
    scale = 2.0 * rho / count
    grads["entity"][ent_rows] += scale * e
    grads["trans_u"][u_rows] += scale * u
    grads["scal_s"][s_rows] += scale * s
    return float(rho * total / count)


def _real_view(arr: np.ndarray) -> np.ndarray:
    return arr.view(np.float64) if np.iscomplexobj(arr) else arr


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    moments: dict[str, Moments],
    lr: float,
    step_count: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update; ``step_count`` starts at 1.

    Complex arrays are updated as interleaved (re, im) real pairs.
    """
    bc1 = 1.0 - beta1**step_count
    bc2 = 1.0 - beta2**step_count
    for name, param in params.items():
        if name not in grads:
            continue
        p = _real_view(param)
        g = _real_view(grads[name])
        if name not in moments:
            moments[name] = Moments(np.zeros_like(p), np.zeros_like(p))
        mom = moments[name]
        mom.m *= beta1
        mom.m += (1.0 - beta1) * g
        mom.v *= beta2
        mom.v += (1.0 - beta2) * (g * g)
        p -= lr * (mom.m / bc1) / (np.sqrt(mom.v / bc2) + eps)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.moments: dict[str, Moments] = {}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        adam_step(params, grads, self.moments, self.lr, self.t, self.beta1, self.beta2, self.eps)


@dataclass
class PhaseReport:
    phase: str
    steps_run: int
    best_valid_mrr: float
    best_step: int
    stopped_early: bool
    log: list[tuple[int, float, float]] = field(default_factory=list, repr=False)


def validation_mrr(state, att, kg: KnowledgeGraph, p: int) -> float:
    if not kg.valid:
        return float("nan")
    return evaluate(state, att, kg, "valid", p).mrr


def _trainable(state: EmbeddingState, att: AttentionState, phase: str) -> dict[str, np.ndarray]:
    params = state.params()
    if phase == "TA":
        params["logits"] = att.logits
    return params


def _restore(state: EmbeddingState, att: AttentionState, snapshot) -> None:
    best_state, best_logits = snapshot
    for name, arr in state.params().items():
        np.copyto(arr, getattr(best_state, name))
    np.copyto(att.logits, best_logits)


class _PositiveStream:
    """Cycles through shuffled training triples."""

    def __init__(self, triples: np.ndarray, rng: np.random.Generator):
        self.triples = triples
        self.rng = rng
        self.order = rng.permutation(len(triples))
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(len(self.triples))
                self.pos = 0
            chunk = self.order[self.pos : self.pos + n]
            self.pos += len(chunk)
            n -= len(chunk)
            out.append(chunk)
        return self.triples[np.concatenate(out)]


def run_phase(
    kg: KnowledgeGraph,
    state: EmbeddingState,
    att: AttentionState,
    config: ModelConfig,
    phase: str,
    rng: np.random.Generator,
    validate: Callable[[EmbeddingState, AttentionState], float] | None = None,
) -> PhaseReport:
    """Optimise for up to the phase's step budget with early stopping.

    Validation MRR is measured at step 0, every ``valid_every`` steps and at
    the last step; training stops after ``patience`` evaluations without
    improvement and the best-scoring parameters are restored in place.
    """
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    if att.mode is not _REQUIRED_MODE[phase]:
        raise ConfigError(f"phase {phase} needs attention mode {_REQUIRED_MODE[phase].value}, got {att.mode.value}")
    validate = validate or (lambda s, a: validation_mrr(s, a, kg, config.norm))
    budget = config.phase_steps[phase]
    train = kg.as_array("train")
    stream = _PositiveStream(train, rng)
    optimizer = Adam(config.lr)
    frozen_rows = None
    if phase == "F":
        frozen_rows = {kind: att.frozen_mask[:, kind] == 0 for kind in EGT}

    best = validate(state, att)
    best_step = 0
    snapshot = (state.copy(), att.logits.copy())
    report = PhaseReport(phase, 0, best, 0, False)
    report.log.append((0, float("nan"), best))
    stale = 0
    window = []
    for step in range(1, budget + 1):
        batch = corrupt(stream.take(config.batch), config.eta, kg.n_entities, rng)
        loss, grads = self_adversarial_loss(state, att, batch, config)
        if phase != "TA":
            grads.pop("logits")
        if frozen_rows is not None:
            for kind, pruned in frozen_rows.items():
                grads[EmbeddingState.BANKS[kind]][pruned] = 0.0
        sign = np.where(state.scal_s < 0, -1.0, 1.0)
        optimizer.step(_trainable(state, att, phase), grads)
        state.clamp_scaling(sign)
        window.append(loss)
        report.steps_run = step

        if step % config.valid_every == 0 or step == budget:
            mrr = validate(state, att)
            report.log.append((step, float(np.mean(window)), mrr))
            window = []
            log.debug("phase %s step %d loss %.5f valid MRR %.4f", phase, step, report.log[-1][1], mrr)
            if mrr > best or (np.isnan(best) and not np.isnan(mrr)):
                best, best_step, stale = mrr, step, 0
                snapshot = (state.copy(), att.logits.copy())
            elif np.isnan(mrr):
                best_step = step
                snapshot = (state.copy(), att.logits.copy())
            else:
                stale += 1
                if stale >= config.patience and step < budget:
                    report.stopped_early = True
                    break

    _restore(state, att, snapshot)
    report.best_valid_mrr = best
    report.best_step = best_step
    return report


@dataclass
class PhaseCandidate:
    label: str
    state: EmbeddingState
    att: AttentionState
    valid_mrr: float


def select_best_phase(candidates: list[PhaseCandidate]) -> PhaseCandidate:
    """Highest validation MRR; ties go to the later phase."""
    best = candidates[0]
    for cand in candidates[1:]:
        if not cand.valid_mrr < best.valid_mrr:
            best = cand
    return best


@dataclass
class SmartResult:
    state: EmbeddingState
    att: AttentionState
    reports: list[PhaseReport]
    selections: dict[int, EGT]
    returned_phase: str
    candidates: list[PhaseCandidate]
    test_metrics: MetricsReport | None = None
    phase_test_metrics: dict[str, MetricsReport] = field(default_factory=dict)


def adherence_mask(adherence, kg: KnowledgeGraph, config: ModelConfig) -> np.ndarray:
    """Frozen mask built from an adherence table (rows keyed by relation id)."""
    unknown = [r for r in adherence.rows if not 0 <= r < kg.n_relations]
    if unknown:
        raise ConfigError(f"adherence table references unknown relation ids {unknown}")
    missing = [kg.relations.label(r) for r in range(kg.n_relations) if r not in adherence.rows]
    if missing:
        raise ConfigError(f"adherence table has no row for relation(s) {missing}")
    weights = np.stack([adherence.rows[r] for r in range(kg.n_relations)])
    return freeze_weights(weights, config.variant, config.epsilon, config.egt_order, list(kg.relations))


def run_smart(
    kg: KnowledgeGraph,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    preloaded_adherence=None,
    evaluate_test: bool = True,
    evaluate_phases: bool = False,
) -> SmartResult:
    """Training -> adaptive learning -> freezing, or freezing only from adherence."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    state, att = init_for_kg(kg, config, rng)
    validate = lambda s, a: validation_mrr(s, a, kg, config.norm)
    reports: list[PhaseReport] = []
    candidates: list[PhaseCandidate] = []

    if preloaded_adherence is not None:
        mask = adherence_mask(preloaded_adherence, kg, config)
        for phase in ("T", "TA"):
            reports.append(PhaseReport(phase, 0, float("nan"), 0, False))
        weights = np.stack([preloaded_adherence.rows[r] for r in range(kg.n_relations)])
        selections = {r: select_from_weights(weights[r], config.egt_order) for r in range(kg.n_relations)}
        att = frozen_from_mask(mask, config.egt_order)
    else:
        reports.append(run_phase(kg, state, att, config, "T", rng, validate))
        candidates.append(PhaseCandidate("SMART-T", state.copy(), att.copy(), reports[-1].best_valid_mrr))
        att.mode = Mode.ADAPTIVE
        reports.append(run_phase(kg, state, att, config, "TA", rng, validate))
        candidates.append(PhaseCandidate("SMART-TA", state.copy(), att.copy(), reports[-1].best_valid_mrr))
        selections = {r: select_egt(att, r) for r in range(kg.n_relations)}
        att = freeze(att, config.variant, config.epsilon, list(kg.relations))

    reports.append(run_phase(kg, state, att, config, "F", rng, validate))
    candidates.append(PhaseCandidate("SMART", state.copy(), att.copy(), reports[-1].best_valid_mrr))

    chosen = select_best_phase(candidates) if config.cross_phase_stop else candidates[-1]
    result = SmartResult(chosen.state, chosen.att, reports, selections, chosen.label, candidates)
    if evaluate_test and kg.test:
        result.test_metrics = evaluate(chosen.state, chosen.att, kg, "test", config.norm)
        if evaluate_phases:
            for cand in candidates:
                if cand is chosen:
                    result.phase_test_metrics[cand.label] = result.test_metrics
                else:
                    result.phase_test_metrics[cand.label] = evaluate(cand.state, cand.att, kg, "test", config.norm)
    return result
