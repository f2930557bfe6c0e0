import numpy as np
import pytest

from conftest import rand_params
from fpgrow.errors import PlanError, StructureError
from fpgrow.growth import (
    DUPLICATE, GFREEZE, GTRAIN, ZERO_INIT, FreezeMask, GrowthPlan, default_tolerance,
    expand_mlp, expected_added_params, grow_model, verify_preservation,
)
from fpgrow.linalg import Rng
from fpgrow.transformer import MlpWeights, ModelConfig, forward, loss_and_grads, mlp_forward
from fpgrow.training import Adam
from test_transformer import _batch


def rand_mlp(h, p, seed=0):
    r = Rng(seed)
    return MlpWeights(r.child(1).normal((h, p)), r.child(2).normal(p), r.child(3).normal((p, h)), r.child(4).normal(h))


def test_duplicate_hand_example():
    w = MlpWeights(np.array([[1.0]]), np.array([0.0]), np.array([[2.0]]), np.array([0.0]))
    e = expand_mlp(w, 2)
    assert e.w1.tolist() == [[1.0, 1.0]]
    assert e.w2.tolist() == [[1.0], [1.0]]
    assert e.b1.tolist() == [0.0, 0.0]


def test_k_below_two_rejected():
    w = rand_mlp(2, 3)
    for k in (0, 1):
        with pytest.raises(PlanError):
            expand_mlp(w, k)
        with pytest.raises(PlanError):
            GrowthPlan(k=k)
    with pytest.raises(PlanError):
        GrowthPlan(layers=())
    with pytest.raises(PlanError):
        GrowthPlan(strategy="both")


@pytest.mark.parametrize("k", [2, 3, 4])
def test_duplicate_preserves_mlp(k):
    w = rand_mlp(4, 8, seed=k)
    e = expand_mlp(w, k)
    assert e.w1.shape == (4, 8 * k) and e.w2.shape == (8 * k, 4)
    x = Rng(99).normal((100, 4))
    assert np.abs(mlp_forward(e, x) - mlp_forward(w, x)).max() <= 1e-12
    assert np.array_equal(e.b2, w.b2)
    for t in range(k):
        assert np.array_equal(e.b1[8 * t:8 * (t + 1)], w.b1)


def test_zero_init_exact():
    w = rand_mlp(6, 5, seed=1)
    e = expand_mlp(w, 2, ZERO_INIT, rng=Rng(3))
    assert not np.any(e.w2[5:])
    assert np.array_equal(e.w2[:5], w.w2)
    assert np.array_equal(e.w1[:, :5], w.w1)
    assert not np.any(e.b1[5:])
    assert np.std(e.w1[:, 5:]) == pytest.approx(0.02 / np.sqrt(6), rel=0.5)
    x = Rng(4).normal((50, 6))
    assert np.array_equal(mlp_forward(e, x), mlp_forward(w, x))


def test_noise_only_touches_new_copies():
    w = rand_mlp(3, 4)
    e = expand_mlp(w, 3, noise_scale=0.1, rng=Rng(0))
    assert np.array_equal(e.w1[:, :4], w.w1)
    assert not np.array_equal(e.w1[:, 4:8], w.w1)
    with pytest.raises(PlanError):
        expand_mlp(w, 2, noise_scale=0.1)


def test_expand_does_not_mutate():
    w = rand_mlp(3, 4)
    before = w.w1.copy()
    expand_mlp(w, 2)
    assert np.array_equal(w.w1, before)


@pytest.fixture
def model4():
    cfg = ModelConfig.uniform(4, 32, 128, 4, 20, 12, seed=1)
    return rand_params(cfg, 1)


@pytest.mark.parametrize("initializer", [DUPLICATE, ZERO_INIT])
@pytest.mark.parametrize("layers", [(2,), (0, 3), "all"])
def test_model_preservation_float64(model4, initializer, layers):
    for k in (2, 3):
        g, _, _ = grow_model(model4, GrowthPlan(k, layers, initializer=initializer), Rng(k))
        rep = verify_preservation(model4, g, 40, 12, Rng(0))
        assert rep.passed and rep.max_abs_dev <= 1e-12, rep.to_dict()


def test_model_preservation_float32(model4):
    m = model4.astype(np.float32)
    g, _, _ = grow_model(m, GrowthPlan(2), Rng(0))
    rep = verify_preservation(m, g, 40, 12, Rng(0))
    assert rep.tol == 1e-5 and rep.passed


def test_self_verification_is_exact(model4):
    rep = verify_preservation(model4, model4, 10, 6, Rng(0))
    assert rep.max_abs_dev == 0.0 and rep.passed
    assert default_tolerance(np.float64) == 1e-12


def test_verify_rejects_structural_changes(model4):
    other = rand_params(ModelConfig.uniform(4, 32, 128, 4, 21, 12), 1)
    with pytest.raises(StructureError):
        verify_preservation(model4, other, 2, 3, Rng(0))


def test_composition(model4):
    g1, _, _ = grow_model(model4, GrowthPlan(2, (1,)), Rng(0))
    g2, _, _ = grow_model(g1, GrowthPlan(2, (1,)), Rng(1))
    assert g2.config.mlp_dims == (128, 512, 128, 128)
    assert verify_preservation(model4, g2, 40, 12, Rng(0), tol=2e-12).passed


def hand_count(cfg, k, layers):
    h = cfg.hidden_dim
    return sum((k - 1) * (h * cfg.mlp_dims[i] + cfg.mlp_dims[i] + cfg.mlp_dims[i] * h) for i in layers)


@pytest.mark.parametrize("k,layers", [(2, "all"), (3, (1, 2)), (4, (0,))])
def test_receipt_arithmetic(model4, k, layers):
    g, mask, rc = grow_model(model4, GrowthPlan(k, layers), Rng(0))
    idx = range(4) if layers == "all" else layers
    assert rc.added_params == hand_count(model4.config, k, idx) == expected_added_params(model4.config, GrowthPlan(k, layers))
    assert rc.original_params + rc.added_params == g.num_params()
    assert mask.trainable_count(g) == rc.added_params == rc.trainable_params
    assert rc.trainable_fraction == rc.added_params / rc.original_params


def test_gfreeze_mask_layout(model4):
    g, mask, _ = grow_model(model4, GrowthPlan(2, (1,)), Rng(0))
    w1 = mask.boolean("layers.1.mlp.w1", (32, 256))
    assert not w1[:, :128].any() and w1[:, 128:].all()
    assert mask.boolean("layers.1.mlp.b1", (256,)).tolist() == [False] * 128 + [True] * 128
    w2 = mask.boolean("layers.1.mlp.w2", (256, 32))
    assert not w2[:128].any() and w2[128:].all()
    for name in g:
        if not name.startswith("layers.1.mlp.") or name.endswith("b2"):
            assert not mask.boolean(name, g[name].shape).any(), name


def test_gtrain_mask_layout(model4):
    g, mask, rc = grow_model(model4, GrowthPlan(2, (0, 2), strategy=GTRAIN), Rng(0))
    for i in (0, 2):
        assert mask.boolean(f"layers.{i}.mlp.w1", (32, 256)).all()
        assert mask.boolean(f"layers.{i}.mlp.b1", (256,)).all()
        assert not mask.boolean(f"layers.{i}.mlp.w2", (256, 32)).any()
        assert not mask.boolean(f"layers.{i}.mlp.b2", (32,)).any()
    assert rc.trainable_params == 2 * (32 * 256 + 256)


def test_mask_round_trip_and_validation(model4):
    g, mask, _ = grow_model(model4, GrowthPlan(2), Rng(0))
    again = FreezeMask.from_dict(mask.to_dict())
    assert again.to_json() == mask.to_json()
    with pytest.raises(StructureError):
        mask.validate(model4)


@pytest.mark.parametrize("strategy", [GFREEZE, GTRAIN])
def test_frozen_bit_identical_after_updates(strategy):
    cfg = ModelConfig.uniform(2, 16, 32, 4, 12, 10)
    base = rand_params(cfg, 2, dtype=np.float32)
    g, mask, _ = grow_model(base, GrowthPlan(2, (1,), strategy=strategy), Rng(0))
    start = g.copy()
    digest = mask.frozen_digest(g)
    opt = Adam(g, lr=1e-2, mask=mask)
    for s in range(30):
        _, grads = loss_and_grads(g, _batch(cfg, s))
        opt.step(g, grads)
    assert mask.frozen_digest(g) == digest
    assert mask.frozen_values(g) == mask.frozen_values(start)
    assert not g.bit_equal(start)


def test_grow_never_mutates_input(model4):
    snap = model4.copy()
    grow_model(model4, GrowthPlan(3), Rng(0))
    assert model4.bit_equal(snap)


def test_plan_round_trip():
    p = GrowthPlan(3, (2, 0), GTRAIN, ZERO_INIT, 0.0)
    assert p.layers == (0, 2)
    assert GrowthPlan.from_dict(p.to_dict()) == p
    with pytest.raises(PlanError):
        GrowthPlan(2, (9,)).layer_indices(4)
