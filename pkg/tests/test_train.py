import json
import math
from pathlib import Path

import numpy as np
import pytest

from regiongraph.train import (ABLATIONS, NumericError, TrainConfig, TrainState, backward, finite_difference,
                               fit, gradient_check, init_model, loss, randomize_parameters, relative_error,
                               train_step)

from helpers import random_input


def fd_loss_grad(z, target, mode, h=1e-6):
    z = np.array(z, dtype=float)
    return finite_difference(lambda: loss(z, target, mode)[0], z, h)


def test_init_model_determinism_and_zeros():
    a, b = init_model(8, 3, 4, seed=11), init_model(8, 3, 4, seed=11)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa, pb)
    for w in a.sim_weights:
        assert not w.any()
    for wf, wb in a.st_weights:
        assert not wf.any() and not wb.any()
    assert all(np.array_equal(n.gain, np.ones(8)) for n in a.norm_params["sim"])
    assert not a.classifier_bias.any()


def test_init_gaussian_std():
    m = init_model(512, 1, 2, seed=3)
    for block in (m.transforms.w, m.transforms.w_prime, m.g_weight):
        assert abs(block.std() - 0.01) < 0.001
        assert abs(block.mean()) < 0.001


def test_loss_special_values():
    assert loss(np.zeros(5), 2, "softmax_ce")[0] == pytest.approx(math.log(5), abs=1e-15)
    assert loss(np.zeros(1), np.array([1.0]), "per_class_sigmoid_bce")[0] == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        loss(np.zeros(3), 3, "softmax_ce")
    with pytest.raises(ValueError):
        loss(np.zeros(3), np.array([1.0, 0.5, 0.0]), "per_class_sigmoid_bce")
    with pytest.raises(ValueError):
        loss(np.zeros(3), 0, "hinge")


@pytest.mark.parametrize("mode,target", [("softmax_ce", 1), ("per_class_sigmoid_bce", np.array([1.0, 0.0, 1.0, 0.0]))])
def test_loss_gradient_vs_finite_differences(rng, mode, target):
    for _ in range(5):
        z = rng.normal(size=4) * 3
        _, g = loss(z, target, mode)
        assert np.max(relative_error(g, fd_loss_grad(z, target, mode))) < 1e-6


def test_loss_stable_for_extreme_logits():
    v, g = loss(np.array([1e4, -1e4]), 1, "softmax_ce")
    assert v == pytest.approx(2e4) and np.all(np.isfinite(g))
    v, g = loss(np.array([800.0, -800.0]), np.array([0.0, 1.0]), "per_class_sigmoid_bce")
    assert v == pytest.approx(800.0) and np.all(np.isfinite(g))


def test_loss_nonnegative(rng):
    for _ in range(50):
        z = rng.normal(size=3) * 10
        assert loss(z, int(rng.integers(3)), "softmax_ce")[0] >= 0
        assert loss(z, rng.integers(0, 2, 3).astype(float), "per_class_sigmoid_bce")[0] >= 0


@pytest.mark.parametrize("mode,target", [("softmax_ce", 2), ("per_class_sigmoid_bce", np.array([0.0, 1.0, 1.0]))])
def test_full_gradient_check(rng, mode, target):
    model = randomize_parameters(init_model(8, 2, 3, 0, dropout_rate=0.0), 1)
    inp = random_input(rng, 6, 8)
    results = gradient_check(model, inp, target, mode, h=1e-5, tol=1e-4)
    assert {r.name for r in results} == set(model.parameter_dict())
    worst = max(results, key=lambda r: r.max_rel_error)
    assert worst.passed, worst


def test_zero_learning_signal(rng):
    model = randomize_parameters(init_model(4, 2, 2, 0), 1)
    inp = random_input(rng, 5, 4)
    # a zero classifier cuts every upstream path to the loss
    model.classifier[...] = 0
    model.classifier_bias[...] = 0
    _, grads = backward(model, inp, 0, "softmax_ce")
    for name, g in grads.items():
        if not name.startswith("classifier"):
            assert not g.any(), name


def test_frozen_branch_gradients_match_fd(rng):
    model = randomize_parameters(init_model(4, 2, 3, 0, dropout_rate=0.0), 7)
    for wf, wb in model.st_weights:
        wf[...] = 0
        wb[...] = 0
    inp = random_input(rng, 6, 4)
    names = [n for n in model.parameter_dict() if n.startswith("st.")]
    for r in gradient_check(model, inp, 1, "softmax_ce", names=names):
        assert r.passed, r


def test_sgd_step_semantics(rng):
    model = randomize_parameters(init_model(4, 2, 3, 0, dropout_rate=0.0), 1)
    inp = random_input(rng, 5, 4)
    before = {n: p.copy() for n, p in model.named_parameters()}
    _, grads = backward(model, inp, 1, "softmax_ce")
    cfg = TrainConfig(learning_rate=0.1, schedule=[])
    train_step(model, TrainState.from_seed(0), [(inp, 1)], cfg)
    for n, p in model.named_parameters():
        assert np.allclose(p - before[n], -0.1 * grads[n], atol=1e-15, rtol=0)

    frozen = model.copy()
    snapshot = {n: p.copy() for n, p in frozen.named_parameters()}
    train_step(frozen, TrainState.from_seed(0), [(inp, 1)], TrainConfig(learning_rate=0.0, schedule=[]))
    for n, p in frozen.named_parameters():
        assert np.array_equal(p, snapshot[n])


def test_frozen_prefixes_hold(rng):
    model = randomize_parameters(init_model(4, 2, 3, 0, dropout_rate=0.0), 1)
    inp = random_input(rng, 5, 4)
    before = {n: p.copy() for n, p in model.named_parameters()}
    train_step(model, TrainState.from_seed(0), [(inp, 0)],
               TrainConfig(learning_rate=0.5, schedule=[], frozen=ABLATIONS["baseline"]))
    for n, p in model.named_parameters():
        if n.startswith(("sim.", "st.")):
            assert np.array_equal(p, before[n]), n
    assert not np.array_equal(model.classifier, before["classifier.w"])


def test_batch_gradient_is_mean(rng):
    model = randomize_parameters(init_model(4, 1, 2, 0, dropout_rate=0.0), 1)
    batch = [(random_input(rng, 4, 4), 0), (random_input(rng, 6, 4), 1)]
    grads = [backward(model, inp, y, "softmax_ce")[1] for inp, y in batch]
    before = model.classifier.copy()
    train_step(model, TrainState.from_seed(0), batch, TrainConfig(learning_rate=1.0, schedule=[]))
    assert np.allclose(before - model.classifier, (grads[0]["classifier.w"] + grads[1]["classifier.w"]) / 2,
                       atol=1e-14)


def test_schedule_and_config_validation():
    cfg = TrainConfig(learning_rate=1.0, schedule=[(10, 0.1), (20, 0.01)])
    assert [cfg.lr_at(i) for i in (0, 9, 10, 19, 20, 99)] == [1.0, 1.0, 0.1, 0.1, 0.01, 0.01]
    with pytest.raises(ValueError):
        TrainConfig(schedule=[(10, 0.1), (10, 0.5)])
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="mse")


def test_non_finite_loss_aborts(rng):
    model = init_model(4, 1, 2, 0, dropout_rate=0.0)
    inp = random_input(rng, 4, 4)
    model.classifier[...] = np.nan
    with pytest.raises(NumericError) as err:
        train_step(model, TrainState.from_seed(0), [(inp, 0)], TrainConfig(schedule=[]))
    assert err.value.snapshot["iteration"] == 0


def test_fit_is_deterministic(rng):
    data = [(random_input(rng, 5, 4), int(rng.integers(3))) for _ in range(6)]
    cfg = TrainConfig(learning_rate=0.05, total_iters=15, batch_size=2, seed=5, schedule=[(10, 0.1)])
    m1, log1 = fit(init_model(4, 2, 3, 1), data, cfg)
    m2, log2 = fit(init_model(4, 2, 3, 1), data, cfg)
    assert log1.to_ndjson() == log2.to_ndjson()
    for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
        assert np.array_equal(a, b)
    assert len(log1.records) == 15 and log1.records[12]["lr"] == pytest.approx(0.005)


FIXTURE = Path(__file__).parent / "fixtures" / "loss_curve_synth_seed0.json"


def seeded_synth_curve():
    from regiongraph.data import SynthSpec, assemble, synth_generate
    records = synth_generate(SynthSpec(num_videos=32, frames=8, proposals_per_frame=4, d=16, seed=5, map_size=48))
    data = [(assemble(r), r.target()) for r in records]
    cfg = TrainConfig(learning_rate=0.05, momentum=0.9, batch_size=8, total_iters=200, schedule=[], seed=0)
    return fit(init_model(16, 2, 4, seed=0), data, cfg)[1].losses()


@pytest.mark.slow
def test_synthetic_loss_halves_and_matches_fixture():
    losses = seeded_synth_curve()
    assert losses[-10:].mean() <= 0.5 * losses[:10].mean()
    want = json.loads(FIXTURE.read_text())["losses"]
    np.testing.assert_allclose(losses, want, rtol=1e-9, atol=1e-12)


if __name__ == "__main__":
    # regenerate the loss-curve fixture: python tests/test_train.py
    FIXTURE.write_text(json.dumps({"losses": seeded_synth_curve().tolist()}) + "\n")
