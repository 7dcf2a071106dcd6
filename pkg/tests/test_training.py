import numpy as np
import pytest

import smartkge.training as training
from oracles import Dual, dual_loss, scalar_adam
from smartkge.analysis import AdherenceTable
from smartkge.errors import ConfigError, DataError, DivergenceError
from smartkge.geometry import EGT
from smartkge.kgdata import KnowledgeGraph
from smartkge.model import AttentionState, Mode, ModelConfig, Variant, egt_distances, frozen_from_mask, init_state, score_triples
from smartkge.training import (
    Adam,
    Batch,
    PhaseCandidate,
    adam_step,
    adversarial_weights,
    corrupt,
    run_phase,
    run_smart,
    sample_negatives,
    scatter_rows,
    select_best_phase,
    self_adversarial_loss,
)


def test_corrupt_two_entities_forced():
    rng = np.random.default_rng(0)
    for _ in range(20):
        neg = sample_negatives(2, (0, 0, 1), 1, rng)[0]
        assert neg in ((0, 0, 0), (1, 0, 1))
    with pytest.raises(DataError):
        corrupt(np.array([[0, 0, 0]]), 1, 1, rng)


def test_corrupt_structure():
    rng = np.random.default_rng(1)
    pos = np.array([[3, 1, 7], [2, 0, 5]])
    batch = corrupt(pos, 4, 10, rng)
    assert batch.negatives.shape == (2, 4, 3)
    for i in range(2):
        for j in range(4):
            neg = batch.negatives[i, j]
            diff = neg != pos[i]
            assert diff.sum() == 1 and not diff[1]
            assert diff[0] == batch.head_corrupted[i, j]


def test_corrupt_uniform_replacement():
    rng = np.random.default_rng(2)
    n = 100
    batch = corrupt(np.array([[10, 0, 20]]), 200_000, n, rng)
    neg = batch.negatives[0]
    heads = neg[batch.head_corrupted[0], 0]
    tails = neg[~batch.head_corrupted[0], 2]
    assert abs(len(heads) / 200_000 - 0.5) < 0.01
    for values, original in ((heads, 10), (tails, 20)):
        counts = np.bincount(values, minlength=n)
        assert counts[original] == 0
        others = np.delete(counts, original)
        expected = len(values) / (n - 1)
        chi2 = np.sum((others - expected) ** 2 / expected)
        assert chi2 < 148.2  # 99.9% quantile, 98 degrees of freedom
        assert np.mean(np.abs(others - expected)) / expected < 0.05


def test_adversarial_weight_examples():
    s = np.array([[-1.0, -3.0, -0.5]])
    assert np.array_equal(adversarial_weights(s, 0.0), [[1 / 3] * 3])
    assert adversarial_weights(np.array([[-4.2]]), 7.0)[0, 0] == 1.0
    w = adversarial_weights(s, 1.0)
    assert np.allclose(w, np.exp(s) / np.exp(s).sum())


def test_scatter_rows_matches_add_at():
    rng = np.random.default_rng(3)
    rows = rng.integers(0, 5, 30)
    vals = rng.normal(size=(30, 4)) + 1j * rng.normal(size=(30, 4))
    expected = np.zeros((5, 4), complex)
    np.add.at(expected, rows, vals)
    assert np.allclose(scatter_rows(rows, vals, 5), expected)
    assert np.allclose(scatter_rows(rows, vals.real, 5), expected.real)


# loss oracle


def _to_dual_params(state, att):
    def pair(z):
        return (z.real, z.imag)

    return {
        "e": [[list(pair(z)) for z in row] for row in state.entity],
        "u": [[list(pair(z)) for z in row] for row in state.trans_u],
        "theta": [list(row) for row in state.rot_theta],
        "phi": [list(row) for row in state.ref_phi],
        "s": [list(row) for row in state.scal_s],
        "logits": [list(row) for row in att.logits],
    }


def _slots(P):
    """Every scalar slot as (container, index, grad key, array index)."""
    for k, row in enumerate(P["e"]):
        for j, pair in enumerate(row):
            yield pair, 0, "entity", (k, j, 0)
            yield pair, 1, "entity", (k, j, 1)
    for r, row in enumerate(P["u"]):
        for j, pair in enumerate(row):
            yield pair, 0, "trans_u", (r, j, 0)
            yield pair, 1, "trans_u", (r, j, 1)
    for key, name in (("theta", "rot_theta"), ("phi", "ref_phi"), ("s", "scal_s"), ("logits", "logits")):
        for r, row in enumerate(P[key]):
            for j in range(len(row)):
                yield row, j, name, (r, j)


def dual_oracle(state, att, batch, config, adv=None):
    P = _to_dual_params(state, att)
    pos = [tuple(map(int, t)) for t in batch.positives]
    negs = [[tuple(map(int, t)) for t in row] for row in batch.negatives]
    mode = att.mode.value
    mask = None if att.frozen_mask is None else att.frozen_mask.tolist()
    args = (pos, negs, mode, mask, config.gamma, config.alpha, config.rho, config.norm, adv)
    loss = dual_loss(P, *args)
    grads = {
        "entity": np.zeros(state.entity.shape + (2,)),
        "trans_u": np.zeros(state.trans_u.shape + (2,)),
        "rot_theta": np.zeros(state.rot_theta.shape),
        "ref_phi": np.zeros(state.ref_phi.shape),
        "scal_s": np.zeros(state.scal_s.shape),
        "logits": np.zeros(att.logits.shape),
    }
    for container, idx, name, where in _slots(P):
        old = container[idx]
        container[idx] = Dual(old, 1.0)
        grads[name][where] = dual_loss(P, *args).d
        container[idx] = old
    for name in ("entity", "trans_u"):
        grads[name] = grads[name][..., 0] + 1j * grads[name][..., 1]
    return float(loss.v if isinstance(loss, Dual) else loss), grads


def _instance(seed, mode, p, rho, alpha):
    rng = np.random.default_rng(seed)
    config = ModelConfig(dim=4, norm=p, gamma=2.0, alpha=alpha, rho=rho)
    state, att = init_state(5, 2, config, rng)
    att.logits[:] = rng.normal(size=att.logits.shape)
    if mode is Mode.ADAPTIVE:
        att.mode = mode
    elif mode is Mode.FROZEN:
        att = AttentionState(att.logits, mode, np.array([[1.0, 0, 1, 0], [0, 1, 0, 1]]))
    pos = np.array([[0, 0, 1], [2, 1, 3]])
    batch = corrupt(pos, 2, 5, rng)
    return state, att, batch, config


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("p", [1, 2])
def test_loss_and_gradients_match_scalar_oracle(mode, p):
    state, att, batch, config = _instance(int(p) + 7 * len(mode.value), mode, p, rho=0.1, alpha=0.7)
    loss, grads = self_adversarial_loss(state, att, batch, config)
    ref_loss, ref = dual_oracle(state, att, batch, config)
    assert abs(loss - ref_loss) < 1e-8
    for name, expected in ref.items():
        if name == "logits" and mode is not Mode.ADAPTIVE:
            assert np.all(grads[name] == 0)
            continue
        assert np.allclose(grads[name], expected, rtol=0, atol=1e-8), name


def test_gradients_match_finite_differences_with_frozen_adversary():
    state, att, batch, config = _instance(5, Mode.ADAPTIVE, 2, rho=0.05, alpha=1.3)
    s_neg = score_triples(state, att, *batch.negatives.reshape(-1, 3).T, p=2).reshape(2, 2)
    adv = adversarial_weights(s_neg, config.alpha)
    _, grads = self_adversarial_loss(state, att, batch, config, adv_weights=adv)
    step = 1e-6
    params = {**state.params(), "logits": att.logits}
    for name, arr in params.items():
        flat = arr.view(np.float64) if np.iscomplexobj(arr) else arr
        g = grads[name].view(np.float64) if np.iscomplexobj(grads[name]) else grads[name]
        for i in range(0, flat.size, 3):
            old = flat.flat[i]
            flat.flat[i] = old + step
            up = self_adversarial_loss(state, att, batch, config, adv_weights=adv)[0]
            flat.flat[i] = old - step
            down = self_adversarial_loss(state, att, batch, config, adv_weights=adv)[0]
            flat.flat[i] = old
            fd = (up - down) / (2 * step)
            assert abs(fd - g.flat[i]) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9, (name, i)


def test_pruned_banks_get_exact_zero_gradients():
    state, att, batch, config = _instance(9, Mode.FROZEN, 2, rho=0.1, alpha=0.5)
    _, grads = self_adversarial_loss(state, att, batch, config)
    mask = att.frozen_mask
    for kind, name in zip(EGT, ("trans_u", "rot_theta", "ref_phi", "scal_s")):
        pruned = mask[:, kind] == 0
        assert np.all(grads[name][pruned] == 0)


def test_divergence_detected():
    state, att, batch, config = _instance(1, Mode.FIXED, 2, rho=0.0, alpha=0.0)
    state.entity[0, 0] = np.inf
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        self_adversarial_loss(state, att, batch, config)


# optimiser


def test_adam_matches_scalar_oracle():
    grads = [1.0, -0.5, 2.0, 0.25]
    param = np.array([1.0])
    opt = Adam(0.1)
    for g in grads:
        opt.step({"x": param}, {"x": np.array([g])})
    assert abs(param[0] - scalar_adam(1.0, grads, 0.1)) < 1e-12
    first = np.array([1.0])
    adam_step({"x": first}, {"x": np.array([1.0])}, {}, 0.1, 1)
    assert abs(first[0] - scalar_adam(1.0, [1.0], 0.1)) < 1e-12


def test_adam_complex_is_componentwise():
    z = np.array([1 + 2j])
    re, im = np.array([1.0]), np.array([2.0])
    grads = [(0.3 - 1j), (-2 + 0.5j)]
    opt, opt_re, opt_im = Adam(0.05), Adam(0.05), Adam(0.05)
    for g in grads:
        opt.step({"z": z}, {"z": np.array([g])})
        opt_re.step({"x": re}, {"x": np.array([g.real])})
        opt_im.step({"x": im}, {"x": np.array([g.imag])})
    assert z[0] == re[0] + 1j * im[0]


def test_adam_zero_gradient_and_determinism():
    a = np.array([0.3, -1.2])
    Adam(0.1).step({"a": a}, {"a": np.zeros(2)})
    assert np.array_equal(a, [0.3, -1.2])
    b, c = np.array([0.5]), np.array([0.5])
    Adam(0.1).step({"x": b}, {"x": np.array([0.7])})
    Adam(0.1).step({"x": c}, {"x": np.array([0.7])})
    assert b[0] == c[0]


# phases


def _tiny_kg():
    return KnowledgeGraph.from_labels([("a", "r", "b"), ("b", "r", "c")], [("a", "r", "c")], [("c", "r", "a")])


def _fit_config(**kw):
    base = dict(dim=4, gamma=1.0, eta=2, batch=2, lr=0.05, rho=0.0, steps_t=0, steps_ta=0, steps_f=0, valid_every=10, patience=100)
    base.update(kw)
    return ModelConfig(**base)


def _rising():
    """A validator that always improves, so the last state is kept."""
    calls = iter(range(10**6))
    return lambda s, a: float(next(calls))


def test_empty_phase_echoes_initial_mrr():
    kg = _tiny_kg()
    config = _fit_config()
    state, att = init_state(kg.n_entities, kg.n_relations, config, np.random.default_rng(0))
    before = state.copy()
    report = run_phase(kg, state, att, config, "T", np.random.default_rng(1), validate=lambda s, a: 0.42)
    assert report.steps_run == 0 and report.best_valid_mrr == 0.42
    assert np.array_equal(before.entity, state.entity)


def test_phase_t_fits_translation_and_keeps_logits():
    kg = KnowledgeGraph.from_labels([("a", "r", "b")], [], [("a", "r", "c")])
    config = _fit_config(steps_t=300, lr=0.05, gamma=1.0)
    rng = np.random.default_rng(0)
    state, att = init_state(kg.n_entities, kg.n_relations, config, rng)
    att.logits[:] = rng.normal(size=att.logits.shape)
    logits_before = att.logits.copy()
    score_before = score_triples(state, att, [0], [0], [1])[0]
    losses = []
    original = training.self_adversarial_loss

    def spy(*a, **k):
        out = original(*a, **k)
        losses.append(out[0])
        assert np.array_equal(a[1].logits, logits_before)
        return out

    training.self_adversarial_loss = spy
    try:
        run_phase(kg, state, att, config, "T", rng, validate=_rising())
    finally:
        training.self_adversarial_loss = original
    assert att.logits.tobytes() == logits_before.tobytes()
    assert np.mean(losses[80:100]) < np.mean(losses[:20])
    # translation (and both isometries) fit the positive; a positive scale
    # cannot, so the uniform mixture score plateaus below zero
    dist = egt_distances(state, np.array([0]), np.array([0]), np.array([1]))[0]
    assert dist[EGT.TRANS] < 0.1
    assert score_triples(state, att, [0], [0], [1])[0] > score_before + 5


def test_phase_mode_contract():
    kg = _tiny_kg()
    config = _fit_config()
    state, att = init_state(kg.n_entities, kg.n_relations, config, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        run_phase(kg, state, att, config, "TA", np.random.default_rng(0))
    with pytest.raises(ConfigError):
        run_phase(kg, state, att, config, "X", np.random.default_rng(0))


def test_early_stopping_restores_best(monkeypatch):
    kg = _tiny_kg()
    config = _fit_config(steps_t=100, valid_every=10, patience=2)
    state, att = init_state(kg.n_entities, kg.n_relations, config, np.random.default_rng(0))
    scores = iter([0.1, 0.5, 0.3, 0.2, 0.9])
    snapshots = []

    def validate(s, a):
        snapshots.append(s.entity.copy())
        return next(scores)

    report = run_phase(kg, state, att, config, "T", np.random.default_rng(0), validate)
    assert report.stopped_early and report.steps_run == 30
    assert report.best_step == 10 and report.best_valid_mrr == 0.5
    assert np.array_equal(state.entity, snapshots[1])
    assert [row[0] for row in report.log] == [0, 10, 20, 30]


def test_select_best_phase_ties_go_later():
    cands = [PhaseCandidate(n, None, None, v) for n, v in (("SMART-T", 0.3), ("SMART-TA", 0.5), ("SMART", 0.5))]
    assert select_best_phase(cands).label == "SMART"
    cands[2].valid_mrr = 0.4
    assert select_best_phase(cands).label == "SMART-TA"


def test_cross_phase_returns_ta_checkpoint(monkeypatch):
    kg = _tiny_kg()
    config = _fit_config(steps_t=10, steps_ta=10, steps_f=10, valid_every=5, patience=5, cross_phase_stop=True)
    fake = {Mode.FIXED: 0.3, Mode.ADAPTIVE: 0.6, Mode.FROZEN: 0.4}
    monkeypatch.setattr(training, "validation_mrr", lambda s, a, kg, p: fake[a.mode])
    result = run_smart(kg, config, evaluate_test=False)
    assert result.returned_phase == "SMART-TA"
    ta = next(c for c in result.candidates if c.label == "SMART-TA")
    assert result.att.mode is Mode.ADAPTIVE
    assert np.array_equal(result.state.entity, ta.state.entity)


def test_preloaded_adherence_skips_to_freezing():
    kg = _tiny_kg()
    config = _fit_config(steps_f=5, valid_every=5)
    table = AdherenceTable({0: np.array([0.0, 1.0, 0.0, 0.0])}, 3)
    result = run_smart(kg, config, preloaded_adherence=table)
    assert [r.steps_run for r in result.reports] == [0, 0, 5]
    assert np.array_equal(result.att.frozen_mask, [[0, 1, 0, 0]])
    assert result.selections == {0: EGT.ROT}
    with pytest.raises(ConfigError):
        run_smart(kg, config, preloaded_adherence=AdherenceTable({}, 1))


def test_run_smart_deterministic_and_frozen_banks_untouched():
    kg = _tiny_kg()
    config = _fit_config(steps_t=10, steps_ta=10, steps_f=10, valid_every=5, patience=5)
    a = run_smart(kg, config)
    b = run_smart(kg, config)
    assert np.array_equal(a.state.entity, b.state.entity) and a.test_metrics == b.test_metrics
    assert a.att.mode is Mode.FROZEN
    assert [r.phase for r in a.reports] == ["T", "TA", "F"]


def test_phase_f_leaves_pruned_rows_untouched():
    kg = KnowledgeGraph.from_labels([("a", "r", "b"), ("b", "s", "c"), ("c", "r", "a")], [("a", "s", "c")])
    config = _fit_config(steps_f=15, rho=0.1)
    state, _ = init_state(kg.n_entities, kg.n_relations, config, np.random.default_rng(4))
    att = frozen_from_mask(np.array([[0, 1, 0, 0], [1, 0, 0, 1]]))
    before = state.copy()
    run_phase(kg, state, att, config, "F", np.random.default_rng(4), validate=_rising())
    assert np.array_equal(state.trans_u[0], before.trans_u[0])
    assert np.array_equal(state.ref_phi, before.ref_phi)
    assert np.array_equal(state.scal_s[0], before.scal_s[0])
    assert np.array_equal(state.rot_theta[1], before.rot_theta[1])
    assert not np.array_equal(state.rot_theta[0], before.rot_theta[0])


def test_batch_dataclass():
    batch = Batch(np.zeros((1, 3), int), np.zeros((1, 2, 3), int), np.zeros((1, 2), bool))
    assert batch.negatives.shape == (1, 2, 3)


def test_threshold_variant_runs():
    kg = _tiny_kg()
    config = _fit_config(steps_t=5, steps_ta=5, steps_f=5, valid_every=5, variant=Variant.THRESHOLD, epsilon=0.2)
    result = run_smart(kg, config)
    assert result.att.frozen_mask.sum() >= 1
