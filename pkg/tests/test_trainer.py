import numpy as np
import pytest

from rainstream.model import TwoStreamNet, ablate
from rainstream.storage import load_checkpoint
from rainstream.tensor import ShapeError, Tape, Tensor, backward
from rainstream.trainer import (
    LOG_COLUMNS,
    AdamState,
    LossWeights,
    TrainPhasePlan,
    adam_step,
    clip_by_global_norm,
    crop_cubes,
    loss,
    train,
)


def tiny_dataset(n=3, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        c = r.uniform(0.1, 0.6, (2, 1, 8, 8)).astype(np.float32)
        s = (r.uniform(0, 1, c.shape) > 0.9).astype(np.float32) * 0.3
        out.append((c + s, s, c))
    return out


def test_loss_is_weighted_sum_of_frame_averaged_mse(rng):
    s_hat, s, c_hat, c = (rng.standard_normal((3, 2, 4, 4)) for _ in range(4))
    res = loss([Tensor(f) for f in s_hat], list(s), [Tensor(f) for f in c_hat], list(c), LossWeights(0.7, 0.2))
    ld = np.mean([np.mean((a - b) ** 2) for a, b in zip(s_hat, s)])
    lr = np.mean([np.mean((a - b) ** 2) for a, b in zip(c_hat, c)])
    assert np.isclose(res.loss_d, ld) and np.isclose(res.loss_r, lr)
    assert np.isclose(res.total.item(), 0.7 * ld + 0.2 * lr)


def test_zero_weight_drops_term_from_graph(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    with Tape() as tape:
        res = loss(a, np.zeros((2, 3)), b, np.zeros((2, 3)), LossWeights(0.0, 1.0))
    g = backward(tape, res.total)
    assert not np.any(g[a])
    assert res.loss_d > 0  # still reported


@pytest.mark.parametrize("alpha,beta", [(-1, 1), (0, 0)])
def test_loss_weight_validation(alpha, beta):
    with pytest.raises(ValueError):
        LossWeights(alpha, beta)


def test_adam_first_steps_closed_form():
    """With a constant gradient g, bias correction makes every update lr * g / (|g| + eps)."""
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    g = np.array([0.3, -4.0, 1e-3])
    st = AdamState(lr=0.1)
    expected = p["w"].data.copy()
    for _ in range(3):
        adam_step(p, {"w": g.copy()}, st)
        expected -= 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"].data, expected, rtol=1e-10)
    assert st.step == 3


def test_adam_two_step_oracle():
    p = {"w": Tensor(np.array([0.0]))}
    st = AdamState(lr=1.0, eps=0.0)
    adam_step(p, {"w": np.array([1.0])}, st)
    adam_step(p, {"w": np.array([3.0])}, st)
    m = (0.1 * 0.9 * 1 + 0.1 * 3) / (1 - 0.81)
    v = (0.001 * 0.999 * 1 + 0.001 * 9) / (1 - 0.999 ** 2)
    assert np.isclose(p["w"].data[0], -1.0 - m / np.sqrt(v), rtol=1e-12)


def test_adam_reset_clears_moments_keeps_hyperparameters():
    st = AdamState(lr=0.5, beta1=0.8)
    adam_step({"w": Tensor(np.ones(2))}, {"w": np.ones(2)}, st)
    fresh = st.reset()
    assert fresh.step == 0 and not fresh.m and not fresh.v
    assert fresh.lr == 0.5 and fresh.beta1 == 0.8


def test_adam_rejects_non_finite_gradient():
    p = {"w": Tensor(np.ones(2))}
    st = AdamState()
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, st)
    assert st.step == 0 and np.all(p["w"].data == 1)


def test_global_norm_clip():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([0.1])}
    clip_by_global_norm(g, 1.0)
    assert g["a"][0] == 0.1


def test_plan_validation_and_plateau():
    with pytest.raises(ValueError):
        TrainPhasePlan(phase1=LossWeights(0.01, 1.0))
    with pytest.raises(ValueError):
        TrainPhasePlan(phase2=LossWeights(1.0, 0.01))
    with pytest.raises(ValueError):
        TrainPhasePlan(phase1_steps=-1)
    plan = TrainPhasePlan(plateau_window=2, plateau_tol=0.1)
    assert not plan.plateaued([4, 3, 2])
    assert not plan.plateaued([4, 4, 2, 2])
    assert plan.plateaued([2, 2, 1.95, 1.95])
    assert not TrainPhasePlan().plateaued([1.0] * 50)


def test_crop_cubes_tiles_without_overlap(rng):
    x = rng.uniform(0, 1, (9, 1, 20, 20)).astype(np.float32)
    cubes = crop_cubes(x, x * 0, x, cube=(9, 8, 8), seed=0)
    assert len(cubes) == 4
    for cx, cs, cc in cubes:
        assert cx.shape == (9, 1, 8, 8)
        np.testing.assert_array_equal(cx, cc)
    a = crop_cubes(x, x, x, cube=(9, 8, 8), seed=5)
    b = crop_cubes(x, x, x, cube=(9, 8, 8), seed=5)
    assert all(np.array_equal(p[0], q[0]) for p, q in zip(a, b))
    assert len(crop_cubes(x, x, x, cube=(3, 8, 8), stride=4)) == 3 * 4 * 4
    with pytest.raises(ShapeError):
        crop_cubes(x, x, x, cube=(10, 8, 8))
    with pytest.raises(ShapeError):
        crop_cubes(x, x[:, :, :10], x)


def test_train_rejects_mismatched_cubes():
    net = TwoStreamNet(1, 2, seed=0)
    with pytest.raises(ValueError):
        train([], net)
    bad = [(np.zeros((3, 1, 8, 8)),) * 3]
    with pytest.raises(ShapeError):
        train(bad, net)


def test_training_log_phases_and_determinism(tmp_path):
    plan = TrainPhasePlan(phase1_steps=3, phase2_steps=2)
    logs, finals = [], []
    for k in range(2):
        net = TwoStreamNet(1, 2, seed=1)
        res = train(tiny_dataset(), net, plan, batch_size=2, seed=7, lr=1e-3,
                    log_path=tmp_path / f"log{k}.csv", checkpoint_dir=tmp_path / f"ck{k}", checkpoint_every=2)
        logs.append((tmp_path / f"log{k}.csv").read_bytes())
        finals.append((tmp_path / f"ck{k}" / "final" / "params.bin").read_bytes())
    assert logs[0] == logs[1] and finals[0] == finals[1]
    lines = logs[0].decode().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS)
    assert len(lines) == 6
    assert [r["phase"] for r in res.log] == [1, 1, 1, 2, 2]
    assert res.phase1_end == 3
    assert res.adam.step == 2  # moments reset at the phase switch
    assert res.column("alpha", 2).tolist() == [0.01, 0.01]
    assert sorted(p.name for p in (tmp_path / "ck0").iterdir()) == ["final", "step_000002", "step_000004"]
    net2, adam2, meta = load_checkpoint(tmp_path / "ck0" / "final")
    assert meta["step"] == 5 and adam2.step == 2
    for name, p in res.net.parameters().items():
        np.testing.assert_array_equal(net2.parameters()[name].data, p.data)


def test_training_reduces_detection_loss():
    net = TwoStreamNet(1, 2, seed=2)
    res = train(tiny_dataset(1), net, TrainPhasePlan(phase1_steps=25, phase2_steps=0), batch_size=1, lr=1e-3)
    d = res.column("loss_D")
    assert d[-1] < 0.5 * d[0]
    assert res.phase1_end == 25


def test_no_detection_training_leaves_detection_weights_untouched():
    net = ablate(TwoStreamNet(1, 2, seed=3), "no_detection")
    before = {n: net.parameters()[n].data.copy() for n in net.detection_parameter_names()}
    res = train(tiny_dataset(), net, TrainPhasePlan(phase1_steps=2, phase2_steps=1), batch_size=2, lr=1e-3)
    assert set(res.column("alpha")) == {0.0}
    for n, w in before.items():
        np.testing.assert_array_equal(net.parameters()[n].data, w)


def test_plateau_ends_phase_one_early():
    net = TwoStreamNet(1, 2, seed=4)
    plan = TrainPhasePlan(phase1_steps=50, phase2_steps=1, plateau_window=1, plateau_tol=10.0)
    res = train(tiny_dataset(1), net, plan, batch_size=1)
    assert res.phase1_end == 2
