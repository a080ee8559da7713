"""Watermark generation checks: projection, PGD, alternating optimisation, budget, persistence.

Run with: python -m engine.test_watermark
"""

import sys
import tempfile

import numpy as np
import torch

from engine.diffusion import ImageBatch, build_model, clone_model, finetune_step, grad_ldm, ldm_loss
from engine.errors import BudgetViolation, DataError
from engine.finetune import default_method, finetune
from engine.seeds import derive_seed
from engine.test_support import AffineDenoiser, stub_model
from engine.watermark import (
    WatermarkConfig,
    WatermarkSet,
    apply_watermarks,
    load_watermark_set,
    optimize_watermarks,
    pgd_step,
    project_linf,
    quantize_8bit,
    random_watermarks,
    save_watermark_set,
    verify_budget,
)

ETA = 4 / 255


def _toy_dataset(n=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    # 8-bit originals, as loaded from PNG
    pixels = torch.randint(0, 256, (n, 3, 8, 8), generator=gen).float() / 255.0
    prompts = torch.tensor([[2, 3]] * n, dtype=torch.long)
    ids = [f"img{i:03d}" for i in range(n)]
    return pixels, prompts, ids


def _tiny_model(seed=0):
    return build_model(seed=seed, image_shape=(3, 8, 8), base_channels=8)


# --- project_linf / pgd_step ---

def test_projection_identity_and_clamp():
    inside = torch.tensor([0.001, -0.01, 0.0])
    assert torch.equal(project_linf(inside, ETA), inside)
    assert torch.equal(project_linf(torch.zeros(3), ETA), torch.zeros(3))
    out = project_linf(torch.tensor([0.05]), ETA)
    assert abs(float(out) - ETA) < 1e-7 and abs(float(out) - 0.015686) < 1e-6


def test_projection_idempotent_and_nonexpansive():
    gen = torch.Generator().manual_seed(1)
    for _ in range(50):
        a = torch.randn(20, generator=gen) * 0.05
        b = torch.randn(20, generator=gen) * 0.05
        pa, pb = project_linf(a, ETA), project_linf(b, ETA)
        assert torch.equal(project_linf(pa, ETA), pa)
        assert float((pa - pb).abs().max()) <= float((a - b).abs().max()) + 1e-9


def test_pgd_zero_grad_leaves_delta():
    delta = torch.tensor([0.001, -0.002, 0.0])
    assert torch.equal(pgd_step(delta, torch.zeros(3), ETA / 10, ETA), delta)


def test_pgd_single_step_closed_form():
    out = pgd_step(torch.zeros(5), torch.ones(5), ETA / 10, ETA)
    assert torch.allclose(out, torch.full((5,), -ETA / 10))


def test_pgd_two_steps_clamped_at_budget():
    d = pgd_step(torch.zeros(4), torch.ones(4), ETA, ETA)
    d = pgd_step(d, torch.ones(4), ETA, ETA)
    assert torch.allclose(d, torch.full((4,), -ETA))


def test_pgd_shape_mismatch():
    try:
        pgd_step(torch.zeros(3), torch.zeros(4), 0.1, ETA)
    except ValueError:
        return
    raise AssertionError("shape mismatch accepted")


# --- config and set invariants ---

def test_config_validation_and_default_step():
    cfg = WatermarkConfig(eta=ETA)
    assert abs(cfg.pgd_step - ETA / 10) < 1e-12
    for bad in ({"eta": 0.0}, {"eta": 40 / 255}, {"inner_steps": (5, 0, 5)}, {"pgd_step": -1.0}):
        try:
            WatermarkConfig(**bad)
            raise AssertionError(f"{bad} accepted")
        except ValueError:
            pass


def test_watermark_set_rejects_budget_violation():
    try:
        WatermarkSet(torch.full((1, 3, 2, 2), 2 * ETA), ("a",), ETA)
    except BudgetViolation:
        return
    raise AssertionError("over-budget delta accepted")


# --- optimize_watermarks ---

def test_zero_epochs_returns_zero_deltas():
    pixels, prompts, ids = _toy_dataset()
    cfg = WatermarkConfig(eta=ETA, epochs=0, inner_steps=(1, 1, 1))
    result = optimize_watermarks(pixels, prompts, ids, _tiny_model(), cfg)
    wm = result["watermarks"]
    assert torch.count_nonzero(wm.deltas) == 0
    assert wm.image_ids == tuple(ids)
    assert result["trace"] == []


def test_budget_holds_and_deterministic():
    pixels, prompts, ids = _toy_dataset()
    cfg = WatermarkConfig(eta=ETA, epochs=1, batch_size=2, inner_steps=(1, 3, 1), seed=5)
    a = optimize_watermarks(pixels, prompts, ids, _tiny_model(), cfg)
    b = optimize_watermarks(pixels, prompts, ids, _tiny_model(), cfg)
    assert float(a["watermarks"].deltas.abs().max()) <= np.nextafter(np.float32(ETA), np.float32(1))
    assert torch.count_nonzero(a["watermarks"].deltas) > 0
    assert torch.equal(a["watermarks"].deltas, b["watermarks"].deltas)
    assert len(a["trace"]) == 2


def test_base_model_not_modified():
    pixels, prompts, ids = _toy_dataset()
    base = _tiny_model()
    before = [p.detach().clone() for p in base.parameters()]
    optimize_watermarks(pixels, prompts, ids, base, WatermarkConfig(eta=ETA, epochs=1, inner_steps=(1, 1, 1)))
    assert all(torch.equal(x, y) for x, y in zip(before, base.parameters()))


def test_optimised_loss_not_worse_than_control():
    pixels, prompts, ids = _toy_dataset(seed=3)
    cfg = WatermarkConfig(eta=8 / 255, epochs=1, batch_size=4, inner_steps=(2, 10, 2), seed=1)
    base = _tiny_model(seed=2)
    opt = optimize_watermarks(pixels, prompts, ids, base, cfg)
    ctrl = optimize_watermarks(pixels, prompts, ids, base, cfg, update_watermarks=False)
    wm_x = ImageBatch.unchecked(pixels + opt["watermarks"].deltas, prompts)
    ctrl_x = ImageBatch.unchecked(pixels + ctrl["watermarks"].deltas, prompts)
    with torch.no_grad():
        opt_loss = np.mean([float(ldm_loss(opt["model"], wm_x, s)) for s in range(16)])
        ctrl_loss = np.mean([float(ldm_loss(ctrl["model"], ctrl_x, s)) for s in range(16)])
    assert opt_loss <= ctrl_loss, (opt_loss, ctrl_loss)


def test_optimised_watermarks_are_learned_faster_than_random():
    for seed in range(3):
        pixels, prompts, ids = _toy_dataset(seed=seed)
        base = _tiny_model(seed=seed)
        cfg = WatermarkConfig(eta=8 / 255, epochs=1, batch_size=4, inner_steps=(2, 10, 2), seed=seed)
        optimised = optimize_watermarks(pixels, prompts, ids, base, cfg)["watermarks"]
        control = random_watermarks(pixels.shape, cfg.eta, seed=seed, image_ids=ids)
        method = default_method("FULL_FT", max_steps=20, batch_size=4)
        losses = {}
        for name, wm in (("optimised", optimised), ("random", control)):
            protected = apply_watermarks(pixels, ids, wm)
            tuned = finetune(base, protected, prompts, method, seed=seed).model
            with torch.no_grad():
                losses[name] = np.mean([float(ldm_loss(tuned, ImageBatch(protected, prompts), 100 + s))
                                        for s in range(16)])
        assert losses["optimised"] <= losses["random"], (seed, losses)


def test_single_step_matches_hand_trace():
    x = torch.tensor([[[[0.2, 0.7], [0.5, 0.9]]]], dtype=torch.float64)
    c = torch.tensor([[1, 2]], dtype=torch.long)
    base = stub_model(AffineDenoiser())
    cfg = WatermarkConfig(eta=ETA, epochs=1, inner_steps=(1, 1, 1), batch_size=1, model_lr=0.05, seed=11)
    out = optimize_watermarks(x, c, ["only"], base, cfg)

    warm = clone_model(base)
    finetune_step(warm, ImageBatch(x, c), cfg.model_lr, "theta1", derive_seed(cfg.seed, "clean", 0, 0, 0))
    g = grad_ldm(warm, ImageBatch(x, c), "input", derive_seed(cfg.seed, "pgd", 0, 0, 0))
    expected = project_linf(-cfg.pgd_step * torch.sign(g), cfg.eta)
    assert torch.equal(out["watermarks"].delta_for("only"), expected[0].float())

    persistent = clone_model(base)
    finetune_step(persistent, ImageBatch.unchecked(x + expected, c), cfg.model_lr, "theta1",
                  derive_seed(cfg.seed, "wm", 0, 0, 0))
    for a, b in zip(persistent.parameters(), out["model"].parameters()):
        assert torch.equal(a, b)


# --- apply / random / quantisation ---

def test_apply_zero_delta_is_bitwise_identity():
    pixels, _, ids = _toy_dataset()
    wm = WatermarkSet(torch.zeros_like(pixels), tuple(ids), ETA)
    assert torch.equal(apply_watermarks(pixels, ids, wm), pixels)


def test_apply_respects_budget_and_clamp():
    pixels, _, ids = _toy_dataset()
    pixels[0, 0, 0, 0] = 1.0
    wm = WatermarkSet(torch.full_like(pixels, ETA), tuple(ids), ETA)
    out = apply_watermarks(pixels, ids, wm)
    assert float(out[0, 0, 0, 0]) == 1.0
    assert float((out - pixels).abs().max()) <= ETA + 1e-6


def test_apply_id_mismatch_raises():
    pixels, _, ids = _toy_dataset()
    wm = WatermarkSet(torch.zeros_like(pixels), tuple(ids), ETA)
    try:
        apply_watermarks(pixels, ["x"] + ids[1:], wm)
    except DataError:
        return
    raise AssertionError("id mismatch accepted")


def test_apply_partial_passes_uncovered_images_through():
    pixels, _, ids = _toy_dataset()
    wm = random_watermarks((2, 3, 8, 8), ETA, seed=0, image_ids=ids[:2])
    out = apply_watermarks(pixels, ids, wm, allow_partial=True)
    assert torch.equal(out[2:], pixels[2:])


def test_random_watermarks_moments_and_budget():
    assert torch.count_nonzero(random_watermarks((2, 3, 4, 4), 0.0, seed=0).deltas) == 0
    wm = random_watermarks((1, 1, 100, 1000), ETA, seed=7)
    d = wm.deltas.double()
    sigma = ETA / np.sqrt(3.0)
    assert abs(float(d.mean())) <= 3 * sigma / np.sqrt(d.numel())
    assert float(d.abs().max()) <= ETA + 1e-7


def test_quantised_budget_survives():
    pixels, prompts, ids = _toy_dataset()
    wm = random_watermarks(pixels.shape, ETA, seed=3, image_ids=ids)
    report = verify_budget(pixels, apply_watermarks(pixels, ids, wm), ETA)
    assert report["ok"], report
    assert report["max_abs_8bit"] <= 4
    assert quantize_8bit(torch.tensor([0.0, 1.0, 127.4 / 255, 1.2])).tolist() == [0, 255, 127, 255]


def test_watermark_set_persistence():
    pixels, _, ids = _toy_dataset()
    wm = random_watermarks(pixels.shape, ETA, seed=1, image_ids=ids)
    with tempfile.TemporaryDirectory() as tmp:
        save_watermark_set(wm, tmp)
        loaded = load_watermark_set(tmp)
    assert loaded.image_ids == wm.image_ids and loaded.kind == "random"
    assert torch.equal(loaded.deltas, wm.deltas)


def main() -> int:
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    passed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"[PASS] {name}")
            passed += 1
        except Exception as exc:
            print(f"[FAIL] {name}: {type(exc).__name__}: {exc}")
    print(f"\n{passed}/{len(tests)} checks passed")
    return 0 if passed == len(tests) else 1


if __name__ == "__main__":
    sys.exit(main())
