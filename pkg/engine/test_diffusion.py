"""Diffusion core checks: noising, loss, gradients, SGD steps, sampling, checkpoints.

Run with: python -m engine.test_diffusion
"""

import math
import os
import sys
import tempfile

import numpy as np
import torch
from scipy import integrate, stats

from engine.diffusion import (
    ImageBatch,
    NoiseSchedule,
    build_model,
    clone_model,
    diffuse_closed_form,
    draw_noise,
    finetune_step,
    forward_diffuse,
    grad_ldm,
    ldm_loss,
    linear_schedule,
    load_model,
    make_prompt,
    parameter_groups,
    sample,
    sampling_timesteps,
    save_model,
)
from engine.errors import NumericError
from engine.test_support import (
    AffineDenoiser,
    ConstantDenoiser,
    NullEmbedder,
    OracleDenoiser,
    SmoothDenoiser,
    ZeroDenoiser,
    stub_model,
)


def _batch(n=2, shape=(1, 2, 2), seed=0, lo=0.2, hi=0.8):
    gen = torch.Generator().manual_seed(seed)
    pixels = lo + (hi - lo) * torch.rand((n,) + shape, generator=gen, dtype=torch.float64)
    prompts = torch.tensor([[2, 3, 0], [4, 0, 0], [1, 2, 3], [3, 3, 0]][:n], dtype=torch.long)
    return ImageBatch(pixels, prompts)


# --- Schedule and prompts ---

def test_linear_schedule_invariants():
    s = linear_schedule(200)
    assert s.T == 200
    assert bool(((s.betas > 0) & (s.betas < 1)).all())
    ab = s.alpha_bars
    assert bool((ab[1:] < ab[:-1]).all())
    assert 0 < float(ab[0]) <= 1


def test_schedule_rejects_bad_betas():
    for betas in ([0.1, 1.0], [0.0, 0.1], []):
        try:
            NoiseSchedule(torch.tensor(betas, dtype=torch.float64))
        except ValueError:
            continue
        raise AssertionError(f"betas {betas} accepted")


def test_prompt_range_checked():
    assert make_prompt([1, 4], vocab_size=5, length=4) == (1, 4, 0, 0)
    try:
        make_prompt([5], vocab_size=5)
    except ValueError:
        return
    raise AssertionError("out-of-range token accepted")


def test_image_batch_validation():
    try:
        ImageBatch(torch.full((1, 1, 2, 2), 1.5), torch.zeros((1, 3), dtype=torch.long))
        raise AssertionError("pixel above 1 accepted")
    except ValueError:
        pass
    try:
        ImageBatch(torch.zeros((2, 1, 2, 2)), torch.zeros((3, 3), dtype=torch.long))
        raise AssertionError("batch mismatch accepted")
    except ValueError:
        pass
    unchecked = ImageBatch.unchecked(torch.full((1, 1, 2, 2), 1.01), torch.zeros((1, 3), dtype=torch.long))
    assert len(unchecked) == 1


# --- forward_diffuse ---

def test_forward_diffuse_limits():
    x0 = torch.rand(3, 1, 2, 2, dtype=torch.float64)
    eps = torch.randn(3, 1, 2, 2, dtype=torch.float64)
    assert torch.equal(diffuse_closed_form(x0, torch.ones(3, dtype=torch.float64), eps), x0)
    assert torch.equal(diffuse_closed_form(x0, torch.zeros(3, dtype=torch.float64), eps), eps)


def test_forward_diffuse_hand_value():
    x0 = torch.full((1, 3, 2, 2), 0.5, dtype=torch.float64)
    eps = torch.ones_like(x0)
    out = diffuse_closed_form(x0, torch.tensor([0.25], dtype=torch.float64), eps)
    assert torch.allclose(out, torch.full_like(out, 0.25 + math.sqrt(0.75)))
    assert abs(float(out[0, 0, 0, 0]) - 1.1160254) < 1e-6


def test_forward_diffuse_linear_in_inputs():
    s = linear_schedule()
    gen = torch.Generator().manual_seed(3)
    x0 = torch.rand(4, 1, 3, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 1, 3, 3, generator=gen, dtype=torch.float64)
    t = torch.tensor([0, 50, 120, 199])
    for a in (-2.0, 0.3, 7.5):
        lhs = forward_diffuse(a * x0, t, a * eps, s)
        rhs = a * forward_diffuse(x0, t, eps, s)
        assert torch.allclose(lhs, rhs, atol=1e-12)


def test_forward_diffuse_errors():
    s = linear_schedule(10)
    x0 = torch.zeros(2, 1, 2, 2)
    try:
        forward_diffuse(x0, torch.tensor([0, 1]), torch.zeros(2, 1, 2, 3), s)
        raise AssertionError("shape mismatch accepted")
    except ValueError:
        pass
    try:
        forward_diffuse(x0, torch.tensor([0, 10]), torch.zeros_like(x0), s)
        raise AssertionError("t = T accepted")
    except ValueError:
        pass


# --- ldm_loss ---

def test_loss_zero_for_oracle_predictor():
    batch = _batch()
    _, eps = draw_noise(11, batch.pixels.shape, 200, torch.float64)
    model = stub_model(OracleDenoiser(eps))
    assert float(ldm_loss(model, batch, seed=11)) == 0.0


def test_loss_for_zero_predictor_is_mean_noise_norm():
    batch = _batch()
    _, eps = draw_noise(5, batch.pixels.shape, 200, torch.float64)
    model = stub_model(ZeroDenoiser())
    expected = eps.flatten(1).norm(dim=1).mean()
    assert torch.allclose(ldm_loss(model, batch, seed=5), expected)


def test_loss_hand_evaluation_affine_stub():
    batch = _batch(n=1)
    model = stub_model(AffineDenoiser(a=0.3, b=-0.1))
    t, eps = draw_noise(9, batch.pixels.shape, 200, torch.float64)
    ab = float(linear_schedule().alpha_bars[int(t[0])])
    x = batch.pixels[0, 0].flatten().tolist()
    e = eps[0, 0].flatten().tolist()
    total = 0.0
    for xi, ei in zip(x, e):
        xt = math.sqrt(ab) * xi + math.sqrt(1 - ab) * ei
        total += (ei - (0.3 * xt - 0.1)) ** 2
    assert abs(float(ldm_loss(model, batch, seed=9)) - math.sqrt(total)) < 1e-10


def test_loss_deterministic_and_nonnegative():
    model = build_model(seed=0, image_shape=(3, 8, 8), base_channels=8)
    batch = ImageBatch(torch.rand(2, 3, 8, 8), torch.tensor([[2, 3], [4, 5]]))
    a = ldm_loss(model, batch, seed=4)
    b = ldm_loss(model, batch, seed=4)
    assert float(a) == float(b)
    assert float(a) >= 0


def test_non_finite_reports_group():
    model = stub_model(AffineDenoiser())
    with torch.no_grad():
        model.denoiser.a.fill_(float("nan"))
    try:
        ldm_loss(model, _batch(), seed=0)
    except NumericError as exc:
        assert exc.context["group"] == "theta1"
        return
    raise AssertionError("NaN parameter did not raise NumericError")


# --- grad_ldm ---

def _central_difference(fn, tensor, index, h=1e-6):
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = fn()
        tensor[index] = orig - h
        down = fn()
        tensor[index] = orig
    return (up - down) / (2 * h)


def test_input_gradient_zero_when_input_ignored():
    model = stub_model(ConstantDenoiser((1, 1, 2, 2)))
    batch = _batch()
    g = grad_ldm(model, batch, "input", seed=2)
    assert g.shape == batch.pixels.shape
    assert torch.count_nonzero(g) == 0


def test_theta2_gradient_zero_when_embedding_detached():
    model = stub_model(SmoothDenoiser(), embedder=NullEmbedder())
    g = grad_ldm(model, _batch(), "theta2", seed=1)
    assert set(g) == {"table.weight"}
    assert torch.count_nonzero(g["table.weight"]) == 0


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = stub_model(SmoothDenoiser())
    batch = _batch(n=3, seed=7)
    seed = 13
    rng = np.random.default_rng(0)

    def loss_value(b=batch):
        return float(ldm_loss(model, b, seed))

    for group in ("theta1", "theta2"):
        grads = grad_ldm(model, batch, group, seed)
        params = parameter_groups(model)[group]
        names = sorted(params)
        for _ in range(5):
            name = names[rng.integers(len(names))]
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            fd = _central_difference(loss_value, p.data, idx)
            an = float(grads[name][idx])
            assert math.isclose(an, fd, rel_tol=1e-3, abs_tol=1e-5), (group, name, idx, an, fd)

    pixels = batch.pixels.clone()
    g_in = grad_ldm(model, batch, "input", seed)
    for _ in range(5):
        idx = tuple(int(rng.integers(s)) for s in pixels.shape)
        fd = _central_difference(lambda: float(ldm_loss(model, ImageBatch.unchecked(pixels, batch.prompts), seed)), pixels, idx)
        assert math.isclose(float(g_in[idx]), fd, rel_tol=1e-3, abs_tol=1e-5)


# --- finetune_step ---

def test_zero_lr_leaves_parameters_identical():
    model = stub_model(SmoothDenoiser())
    before = [p.detach().clone() for p in model.parameters()]
    finetune_step(model, _batch(), lr=0.0, wrt="theta1", seed=0)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_selection_purity_both_ways():
    for wrt, frozen in (("theta1", "theta2"), ("theta2", "theta1")):
        model = stub_model(SmoothDenoiser())
        frozen_before = {n: p.detach().clone() for n, p in parameter_groups(model)[frozen].items()}
        moved_before = {n: p.detach().clone() for n, p in parameter_groups(model)[wrt].items()}
        finetune_step(model, _batch(), lr=0.1, wrt=wrt, seed=3)
        after = parameter_groups(model)
        assert all(torch.equal(frozen_before[n], after[frozen][n]) for n in frozen_before)
        assert any(not torch.equal(moved_before[n], after[wrt][n]) for n in moved_before)


def test_scalar_step_matches_hand_arithmetic():
    model = stub_model(AffineDenoiser(a=0.3, b=-0.1))
    batch = _batch()
    g = grad_ldm(model, batch, "theta1", seed=6)
    old_a = float(model.denoiser.a)
    finetune_step(model, batch, lr=0.05, wrt="theta1", seed=6)
    assert abs(float(model.denoiser.a) - (old_a - 0.05 * float(g["a"]))) < 1e-12


def test_small_step_decreases_convex_loss():
    rng = np.random.default_rng(1)
    for trial in range(100):
        a = float(rng.uniform(-1.0, 1.0))
        model = stub_model(AffineDenoiser(a=a, b=0.0))
        batch = _batch(n=2, seed=trial)
        before = float(ldm_loss(model, batch, seed=trial))
        finetune_step(model, batch, lr=1e-4, wrt="theta1", seed=trial)
        after = float(ldm_loss(model, batch, seed=trial))
        assert after <= before + 1e-12, (trial, before, after)


def test_negative_lr_rejected():
    try:
        finetune_step(stub_model(AffineDenoiser()), _batch(), lr=-1.0, wrt="theta1", seed=0)
    except ValueError:
        return
    raise AssertionError("negative lr accepted")


# --- sample ---

def test_sample_empty_and_range_errors():
    model = build_model(seed=0, image_shape=(3, 8, 8), base_channels=8)
    empty = sample(model, (2, 3), n=0, steps=5, seed=0)
    assert len(empty) == 0 and tuple(empty.pixels.shape[1:]) == (3, 8, 8)
    try:
        sample(model, (2, 3), n=1, steps=201, seed=0)
        raise AssertionError("steps > T accepted")
    except ValueError:
        pass


def test_sample_deterministic_and_bounded():
    model = build_model(seed=1, image_shape=(3, 8, 8), base_channels=8)
    a = sample(model, (2, 3), n=3, steps=10, seed=42)
    b = sample(model, (2, 3), n=3, steps=10, seed=42)
    assert torch.equal(a.pixels, b.pixels)
    assert float(a.pixels.min()) >= 0.0 and float(a.pixels.max()) <= 1.0


def test_sample_restores_training_mode_after_failure():
    model = stub_model(AffineDenoiser())
    with torch.no_grad():
        model.denoiser.a.fill_(float("nan"))
    assert model.training
    try:
        sample(model, (2, 3), n=2, steps=5, seed=0)
        raise AssertionError("NaN denoiser sampled without error")
    except NumericError:
        pass
    assert model.training and model.denoiser.training


def test_sample_mean_matches_clamped_chain():
    model = stub_model(ZeroDenoiser(), image_shape=(1, 2, 2))
    T = model.schedule.T
    n = 1000
    out = sample(model, (2,), n=n, steps=T, seed=0).pixels

    # With a zero predictor the chain is linear Gaussian: track its variance
    ab = model.schedule.alpha_bars.numpy()
    seq = sampling_timesteps(T, T)
    var = 1.0
    for k, t in enumerate(seq):
        ab_prev = ab[seq[k + 1]] if k + 1 < len(seq) else 1.0
        beta = 1.0 - ab[t] / ab_prev
        var = var / (1.0 - beta)
        if k + 1 < len(seq):
            var += beta * (1.0 - ab_prev) / (1.0 - ab[t])
    sd = math.sqrt(var)
    dist = stats.norm(0.0, sd)
    mean = integrate.quad(lambda x: x * dist.pdf(x), 0.0, 1.0)[0] + dist.sf(1.0)
    second = integrate.quad(lambda x: x * x * dist.pdf(x), 0.0, 1.0)[0] + dist.sf(1.0)
    se = math.sqrt(second - mean ** 2) / math.sqrt(n)
    pixel_means = out.mean(dim=0).flatten().tolist()
    assert all(abs(m - mean) <= 3 * se for m in pixel_means), (pixel_means, mean, se)


# --- checkpoints ---

def test_checkpoint_roundtrip_preserves_parameters():
    model = build_model(seed=3, image_shape=(3, 8, 8), base_channels=8)
    with tempfile.TemporaryDirectory() as tmp:
        save_model(model, os.path.join(tmp, "ckpt"))
        loaded = load_model(os.path.join(tmp, "ckpt"))
    for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    assert torch.equal(model.schedule.betas, loaded.schedule.betas)


def test_clone_is_independent():
    model = build_model(seed=0, image_shape=(3, 8, 8), base_channels=8)
    copy = clone_model(model)
    with torch.no_grad():
        next(copy.parameters()).add_(1.0)
    assert not torch.equal(next(copy.parameters()), next(model.parameters()))


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
