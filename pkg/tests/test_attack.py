import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from patchfool import diffengine as de
from patchfool.attack import (
    AttackConfig,
    AttackError,
    PatchSpec,
    attack_full_image,
    attack_nontargeted,
    attack_targeted,
    attack_uniform,
    attack_universal,
    chance_margin,
    compose,
    load_patch,
    pgd_step,
    run_attack_batch,
    save_patch,
    select_target,
)
from patchfool.interpret import gradcam_batch


def _checker(h=64, w=64):
    return ((np.indices((h, w)).sum(axis=0) % 2)[None].repeat(3, axis=0)).astype(np.float32)


# ---------------------------------------------------------------- compose


def test_zero_width_patch_is_identity():
    x = _checker()
    np.testing.assert_array_equal(compose(x, PatchSpec(5, 5, 0, 7, np.zeros((3, 7, 0)))), x)


def test_full_image_patch_replaces_everything():
    x = _checker(8, 8)
    z = np.random.default_rng(0).uniform(size=(3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(compose(x, PatchSpec(0, 0, 8, 8, z)), z)


def test_constant_patch_on_checker():
    x = _checker()
    out = compose(x, PatchSpec(0, 0, 18, 18, np.full((3, 18, 18), 0.5, dtype=np.float32)))
    assert np.all(out[:, :18, :18] == 0.5)
    mask = np.ones((64, 64), bool)
    mask[:18, :18] = False
    np.testing.assert_array_equal(out[:, mask], x[:, mask])


@settings(max_examples=40, deadline=None)
@given(x0=st.integers(0, 10), y0=st.integers(0, 10), w=st.integers(0, 6), h=st.integers(0, 6),
       seed=st.integers(0, 1000))
def test_compose_is_pure_and_local(x0, y0, w, h, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    keep = x.copy()
    out = compose(x, PatchSpec(x0, y0, w, h, rng.uniform(size=(3, h, w)).astype(np.float32)))
    np.testing.assert_array_equal(x, keep)
    outside = np.ones((16, 16), bool)
    outside[y0 : y0 + h, x0 : x0 + w] = False
    assert out[:, outside].tobytes() == x[:, outside].tobytes()


def test_patch_outside_image_rejected():
    with pytest.raises(AttackError):
        compose(_checker(8, 8), PatchSpec(5, 0, 4, 4, np.zeros((3, 4, 4))))


# ---------------------------------------------------------------- pgd_step


def test_pgd_examples():
    one = lambda v: np.array([v], dtype=np.float32)
    np.testing.assert_allclose(pgd_step(one(0.5), one(3.7), 0.005, 0.0, 1.0), [0.495], rtol=1e-6)
    assert pgd_step(one(0.001), one(1.0), 0.005, 0.0, 1.0)[0] == 0.0
    assert pgd_step(one(0.3), one(0.0), 0.005, 0.0, 1.0)[0] == np.float32(0.3)


@settings(max_examples=50, deadline=None)
@given(
    z=hnp.arrays(np.float32, 12, elements=st.floats(0, 1, width=32)),
    g=hnp.arrays(np.float32, 12, elements=st.floats(-1e3, 1e3, width=32)),
    eta=st.floats(1e-4, 0.5),
    eps=st.floats(1e-3, 0.5),
)
def test_pgd_respects_bounds(z, g, eta, eps):
    x = z.copy()
    lo, hi = np.clip(x - eps, 0, 1), np.clip(x + eps, 0, 1)
    out = pgd_step(z, g, eta, lo, hi)
    assert np.all(out >= lo) and np.all(out <= hi)


def test_pgd_rejects_inverted_bounds():
    with pytest.raises(AttackError):
        pgd_step(np.zeros(2), np.ones(2), 0.1, 1.0, 0.0)


# ---------------------------------------------------------------- targets and margins


def test_two_class_step_rnd_is_forced():
    rng = np.random.default_rng(0)
    assert {select_target(np.zeros(2), "step-rnd", 0, rng) for _ in range(20)} == {1}


def test_least_likely():
    assert select_target(np.array([5, 1, -2, 0]), "least-likely", 0, np.random.default_rng(0)) == 2


def test_step_rnd_repeatable_and_never_original():
    picks = [select_target(np.zeros(1000), "step-rnd", 17, np.random.default_rng(9)) for _ in range(2)]
    assert picks[0] == picks[1]
    rng = np.random.default_rng(1)
    draws = [select_target(np.zeros(4), "step-rnd", 2, rng) for _ in range(3000)]
    counts = np.bincount(draws, minlength=4)
    assert counts[2] == 0
    assert np.all(np.abs(counts[[0, 1, 3]] - 1000) < 120)


def test_fixed_target_validation():
    rng = np.random.default_rng(0)
    assert select_target(np.zeros(4), "fixed", 0, rng, fixed=3) == 3
    with pytest.raises(AttackError):
        select_target(np.zeros(4), "fixed", 3, rng, fixed=3)
    with pytest.raises(AttackError):
        select_target(np.zeros(4), "fixed", 0, rng, fixed=4)
    with pytest.raises(AttackError):
        select_target(np.zeros(1), "step-rnd", 0, rng)


def test_chance_margins():
    assert chance_margin(4) == pytest.approx(1.3863, abs=1e-4)
    assert chance_margin(1000) == pytest.approx(6.9078, abs=1e-4)


def test_hinge_is_flat_above_margin():
    logits = de.Tensor(np.array([[-3.0, 2.0, 1.0, 0.5]]), requires_grad=True)
    ce = de.softmax_cross_entropy(logits, [0])
    assert ce.item() > chance_margin(4)
    hinge = de.relu(chance_margin(4) - ce)
    assert hinge.item() == 0.0
    np.testing.assert_array_equal(de.grad(de.sum(hinge), logits).data, np.zeros((1, 4)))


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kwargs",
    [dict(mode="bogus"), dict(lam=-1), dict(eta=0), dict(iterations=0), dict(eps=0.0),
     dict(eps=1.5), dict(mode="full-image"), dict(target_policy="fixed"), dict(target_policy="x")],
)
def test_invalid_configs(kwargs):
    with pytest.raises(AttackError):
        AttackConfig(**kwargs)


def test_mode_defaults():
    assert (AttackConfig.for_mode("targeted").iterations, AttackConfig.for_mode("targeted").eta) == (750, 0.005)
    u = AttackConfig.for_mode("uniform")
    assert (u.iterations, u.eta, u.lam) == (1000, 0.007, 0.75)
    f = AttackConfig.for_mode("full-image")
    assert (f.iterations, f.eta, f.lam, f.eps) == (150, 0.001, 0.05, 8 / 255)
    v = AttackConfig.for_mode("universal", target=1)
    assert (v.eta, v.lam) == (0.05, 0.09)


# ---------------------------------------------------------------- attacks on a small model


def _image(seed=0):
    return np.random.default_rng(seed).uniform(size=(3, 16, 16)).astype(np.float32)


def _cfg(mode="targeted", **kw):
    base = dict(iterations=12, eta=0.02, patch=(0, 0, 6, 6), seed=3)
    base.update(kw)
    return AttackConfig.for_mode(mode, **base)


def test_targeted_attack_contract(small_model):
    x = _image()
    res = attack_targeted(small_model, x, _cfg())
    assert len(res.trace) == 12
    assert all(math.isfinite(r.total) and math.isfinite(r.heat) for r in res.trace)
    assert res.target != res.original
    assert np.all((res.patch.z >= 0) & (res.patch.z <= 1))
    outside = np.ones((16, 16), bool)
    outside[:6, :6] = False
    assert res.adv_image[:, outside].tobytes() == x[:, outside].tobytes()
    assert res.success == (res.final == res.target)


def test_attack_is_deterministic(small_model):
    a = attack_targeted(small_model, _image(), _cfg())
    b = attack_targeted(small_model, _image(), _cfg())
    assert a.to_dict() == b.to_dict()
    assert a.patch.z.tobytes() == b.patch.z.tobytes()


def test_batched_equals_single(small_model):
    xs = np.stack([_image(s) for s in range(3)])
    batch = run_attack_batch(small_model, xs, _cfg(), [10, 11, 12])
    for k in range(3):
        single = attack_targeted(small_model, xs[k], _cfg(), image_id=10 + k)
        assert single.target == batch[k].target
        np.testing.assert_allclose(single.patch.z, batch[k].patch.z, atol=1e-6)


def test_lambda_zero_is_plain_patch_objective(small_model):
    res = attack_targeted(small_model, _image(), _cfg(lam=0.0))
    assert all(r.total == r.ce for r in res.trace)


def test_heat_term_matches_gradcam(small_model):
    x = _image(4)
    res = attack_targeted(small_model, x, _cfg(iterations=1))
    # the first trace entry is evaluated at the initial patch
    z0 = np.random.default_rng([3, 0]).uniform(size=(3, 6, 6)).astype(np.float32)
    x0 = compose(x, PatchSpec(0, 0, 6, 6, z0))
    maps, _, _ = gradcam_batch(small_model, x0[None], [res.target])
    assert res.trace[0].heat == pytest.approx(float(maps.data[0, :6, :6].sum()), abs=1e-6)


def test_nontargeted_attack(small_model):
    res = attack_nontargeted(small_model, _image(), _cfg("nontargeted"))
    assert res.target is None
    assert res.success == (res.final != res.original)
    assert all(r.ce >= 0 for r in res.trace)


def test_uniform_attack_and_overlap(small_model):
    res = attack_uniform(small_model, _image(), _cfg("uniform", decoy=(10, 0, 6, 6)))
    assert all(r.total == pytest.approx(r.ce - 0.75 * r.heat, abs=1e-5) for r in res.trace)
    assert all(-1e-6 <= r.heat <= 1 + 1e-6 for r in res.trace)
    with pytest.raises(AttackError):
        attack_uniform(small_model, _image(), _cfg("uniform", decoy=(4, 0, 6, 6)))


def test_full_image_stays_in_ball(small_model):
    x = _image(7)
    eps = 8 / 255
    res = attack_full_image(small_model, x, _cfg("full-image", iterations=20, eta=0.01, eps=eps))
    assert np.max(np.abs(res.adv_image - x)) <= eps + 1e-7
    assert np.all((res.adv_image >= 0) & (res.adv_image <= 1))
    assert res.patch is None


def test_wrong_mode_rejected(small_model):
    with pytest.raises(AttackError):
        attack_uniform(small_model, _image(), _cfg())
    with pytest.raises(AttackError):
        run_attack_batch(small_model, _image()[None], AttackConfig.for_mode("universal", target=1))


def test_universal_single_batch_is_full_batch_step(small_model):
    imgs = np.stack([_image(s) for s in range(5)])
    cfg = AttackConfig.for_mode("universal", target=1, patch=(0, 0, 6, 6), epochs=1, batch_size=5, seed=2)
    with de.precision(np.float64):
        res = attack_universal(small_model, imgs, cfg)
        z0 = np.random.default_rng(2).uniform(size=(3, 6, 6))
        mask = np.zeros((16, 16))
        mask[:6, :6] = 1
        total = np.zeros_like(z0)
        for k in range(5):
            zt = de.Tensor(z0, requires_grad=True)
            x = de.Tensor(imgs[k : k + 1] * (1 - mask)) + de.embed(zt, 0, 0, 16, 16)
            feats_logits = gradcam_batch(small_model, x, [1], as_graph=True)
            maps, logits, _ = feats_logits
            loss = de.sum(de.softmax_cross_entropy(logits, [1])) + de.sum(maps * de.Tensor(mask)) * cfg.lam
            total += de.grad(loss, zt).data
        expected = pgd_step(z0, total, cfg.eta, 0.0, 1.0)
    np.testing.assert_allclose(res.patch.z, expected, atol=1e-6)
    assert len(res.trace) == 1
    assert 0 <= res.target_rate <= 1


def test_universal_needs_target_and_data(small_model):
    with pytest.raises(AttackError):
        attack_universal(small_model, np.zeros((0, 3, 16, 16)), AttackConfig.for_mode("universal", target=1))


def test_patch_round_trip(tmp_path):
    z = (np.random.default_rng(0).integers(0, 256, size=(3, 5, 4)) / 255).astype(np.float32)
    patch = PatchSpec(2, 3, 4, 5, z)
    ppm, sidecar = save_patch(tmp_path / "p", patch, 1, 9, _cfg())
    back, meta = load_patch(sidecar)
    assert back.rect == patch.rect and meta["target"] == 1 and meta["seed"] == 9
    np.testing.assert_array_equal(back.z, z)
    assert {"x0", "y0", "w", "h", "target", "seed", "cfg"} <= set(meta)
