"""Detector checks: expert and gating training, mixture algebra, modularity, persistence.

Run with: python -m engine.test_detector
"""

import math
import sys
import tempfile

import numpy as np
import torch
import torch.nn as nn

from engine.corruptions import AugmentationPolicy
from engine.detector import (
    ConvClassifier,
    DetectorHyper,
    ExpertDetector,
    GatingModel,
    MoEDetector,
    add_expert,
    detect,
    detect_details,
    detect_specific,
    load_moe,
    save_moe,
    train_expert,
    train_gating,
)
from engine.errors import DataError

SHAPE = (3, 8, 8)
HYPER = DetectorHyper(lr=3e-3, weight_decay=0.01, steps=300, batch_size=32, channels=(8, 16), holdout_fraction=0.25)


class ConstantLogit(nn.Module):
    def __init__(self, prob: float):
        super().__init__()
        self.logit = math.log(prob / (1 - prob))

    def forward(self, x):
        return torch.full((x.shape[0],), self.logit)


class FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.register_buffer("values", torch.tensor(logits, dtype=torch.float32))

    def forward(self, x):
        return self.values.expand(x.shape[0], -1)


def _expert(prob, method):
    return ExpertDetector(ConstantLogit(prob), method, SHAPE)


def _flat_images(n, seed, lo=0.2, hi=0.8):
    gen = torch.Generator().manual_seed(seed)
    colours = lo + (hi - lo) * torch.rand(n, 3, 1, 1, generator=gen)
    return colours.expand(n, *SHAPE).clone()


def _checkerboard(eta):
    r = torch.arange(SHAPE[1]).view(-1, 1)
    c = torch.arange(SHAPE[2]).view(1, -1)
    return (((r + c) % 2) * 2 - 1).float().expand(SHAPE) * eta


def _separable(n, seed, eta=16 / 255):
    clean = _flat_images(n, seed)
    wm = (_flat_images(n, seed + 1000) + _checkerboard(eta)).clamp(0, 1)
    return clean, wm


# --- expert ---

def test_expert_learns_separable_checkerboard():
    clean, wm = _separable(64, 0)
    gen_clean, gen_wm = _separable(64, 1)
    expert = train_expert(clean, wm, gen_clean, gen_wm, AugmentationPolicy.disabled(), HYPER, seed=0)
    test_clean, test_wm = _separable(100, 7)
    pos = detect_specific(expert, test_wm)
    neg = detect_specific(expert, test_clean)
    assert float((pos > 0.5).float().mean()) >= 0.95
    accuracy = 0.5 * (float((pos >= 0.5).float().mean()) + float((neg < 0.5).float().mean()))
    assert accuracy >= 0.95, accuracy
    assert expert.report["holdout_accuracy"] is not None


def test_expert_scores_are_probabilities_and_deterministic():
    expert = ExpertDetector(ConvClassifier(3, (8, 16)), "FULL_FT", SHAPE)
    x = torch.rand(1000, *SHAPE, generator=torch.Generator().manual_seed(0))
    scores = expert.score(x)
    assert float(scores.min()) >= 0.0 and float(scores.max()) <= 1.0
    assert detect_specific(expert, x[0]) == detect_specific(expert, x[0])


def test_expert_requires_generated_sets_unless_ablation():
    clean, wm = _separable(8, 0)
    empty = torch.zeros((0, *SHAPE))
    try:
        train_expert(clean, wm, empty, empty, AugmentationPolicy.disabled(), HYPER, seed=0)
        raise AssertionError("missing generated sets accepted")
    except DataError:
        pass
    quick = DetectorHyper(steps=2, batch_size=8, channels=(4,))
    expert = train_expert(clean, wm, empty, empty, AugmentationPolicy.disabled(), quick, seed=0, ablation=True)
    assert expert.report["ablation"] is True


def test_expert_reports_class_imbalance():
    clean, _ = _separable(40, 0)
    _, wm = _separable(2, 1)
    _, gen_wm = _separable(1, 2)
    gen_clean, _ = _separable(40, 3)
    quick = DetectorHyper(steps=2, batch_size=8, channels=(4,))
    expert = train_expert(clean, wm, gen_clean, gen_wm, AugmentationPolicy.disabled(), quick, seed=0)
    assert expert.report["warnings"]


# --- gating ---

def _method_styles(n, seed):
    return {
        "FULL_FT": _flat_images(n, seed, 0.65, 0.95),
        "LORA_LIKE": _flat_images(n, seed + 1, 0.05, 0.35),
    }


def test_gating_separates_method_styles():
    gating = train_gating(_method_styles(48, 0), HYPER, seed=0)
    held = _method_styles(50, 100)
    for i, method in enumerate(gating.methods):
        w = gating.weights(held[method])
        assert float((w.argmax(1) == i).float().mean()) >= 0.95
    w_any = gating.weights(torch.rand(50, *SHAPE))
    assert torch.allclose(w_any.sum(1), torch.ones(50, dtype=torch.float64), atol=1e-6)


def test_gating_order_permutes_outputs():
    sets = _method_styles(16, 3)
    quick = DetectorHyper(steps=5, batch_size=8, channels=(4,))
    a = train_gating(sets, quick, seed=1)
    b = train_gating({"LORA_LIKE": sets["LORA_LIKE"], "FULL_FT": sets["FULL_FT"]}, quick, seed=1)
    x = torch.rand(10, *SHAPE)
    assert torch.equal(a.logits(x), b.logits(x)[:, [1, 0]])


def test_gating_rejects_single_method():
    try:
        train_gating({"FULL_FT": _flat_images(4, 0)}, HYPER, seed=0)
    except ValueError:
        return
    raise AssertionError("single-method gating accepted")


# --- mixture algebra ---

def test_single_expert_mixture_is_exact():
    expert = _expert(0.37, "FULL_FT")
    moe = MoEDetector((expert,))
    x = torch.rand(4, *SHAPE)
    assert torch.equal(detect(moe, x), expert.score(x).to(torch.float64))


def test_equal_experts_give_their_score():
    gating = GatingModel(FixedLogits([3.0, -1.0]), ("A", "B"), SHAPE)
    moe = MoEDetector((_expert(0.6, "A"), _expert(0.6, "B")), gating)
    assert abs(detect(moe, torch.rand(SHAPE)) - 0.6) < 1e-6


def test_uniform_gating_averages_experts():
    gating = GatingModel(FixedLogits([0.0, 0.0]), ("A", "B"), SHAPE)
    moe = MoEDetector((_expert(0.2, "A"), _expert(0.8, "B")), gating)
    assert abs(detect(moe, torch.rand(SHAPE)) - 0.5) < 1e-6


def test_mixture_matches_hand_formula_and_bounds():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(2, 5))
        probs = rng.uniform(0.01, 0.99, m)
        logits = rng.normal(0, 2, m)
        methods = tuple(f"M{i}" for i in range(m))
        gating = GatingModel(FixedLogits(logits.tolist()), methods, SHAPE)
        experts = tuple(_expert(float(p), name) for p, name in zip(probs, methods))
        moe = MoEDetector(experts, gating)
        details = detect_details(moe, torch.rand(1, *SHAPE))
        es = details["expert_scores"][0].numpy()
        logits32 = np.float32(logits).astype(np.float64)
        w = np.exp(logits32 - logits32.max())
        w /= w.sum()
        expected = float((w * es).sum())
        got = float(details["score"][0])
        assert abs(got - expected) <= 1e-6
        assert es.min() - 1e-12 <= got <= es.max() + 1e-12


def test_resolution_mismatch_raises():
    moe = MoEDetector((_expert(0.5, "A"),))
    try:
        detect(moe, torch.rand(3, 16, 16))
    except ValueError:
        return
    raise AssertionError("resolution mismatch accepted")


def test_gating_order_must_match_experts():
    gating = GatingModel(FixedLogits([0.0, 0.0]), ("B", "A"), SHAPE)
    try:
        MoEDetector((_expert(0.2, "A"), _expert(0.8, "B")), gating)
    except ValueError:
        return
    raise AssertionError("mismatched gating order accepted")


# --- modularity ---

def test_add_expert_keeps_old_experts():
    quick = DetectorHyper(steps=3, batch_size=8, channels=(4,))
    clean, wm = _separable(8, 0)
    old = tuple(
        train_expert(clean, wm, clean, wm, AugmentationPolicy.disabled(), quick, seed=i, method_kind=k)
        for i, k in enumerate(("FULL_FT", "LORA_LIKE"))
    )
    moe = MoEDetector(old, GatingModel(FixedLogits([0.0, 0.0]), ("FULL_FT", "LORA_LIKE"), SHAPE))
    before = [[p.clone() for p in e.network.parameters()] for e in old]
    new = train_expert(clean, wm, clean, wm, AugmentationPolicy.disabled(), quick, seed=9, method_kind="DREAMBOOTH_LIKE")
    grown = add_expert(moe, new, GatingModel(FixedLogits([0.0, -1000.0, -1000.0]),
                                             ("FULL_FT", "LORA_LIKE", "DREAMBOOTH_LIKE"), SHAPE))
    assert len(grown.experts) == len(moe.experts) + 1
    for expert, params in zip(grown.experts[:2], before):
        assert all(torch.equal(a, b) for a, b in zip(params, expert.network.parameters()))
    x = torch.rand(SHAPE)
    assert detect(grown, x) == float(old[0].score(x)[0].double())
    try:
        add_expert(grown, new, grown.gating)
        raise AssertionError("duplicate method accepted")
    except ValueError:
        pass


def test_moe_persistence_roundtrip():
    quick = DetectorHyper(steps=3, batch_size=8, channels=(4, 8))
    clean, wm = _separable(8, 0)
    experts = tuple(
        train_expert(clean, wm, clean, wm, AugmentationPolicy(), quick, seed=i, method_kind=k)
        for i, k in enumerate(("FULL_FT", "LORA_LIKE"))
    )
    gating = train_gating({"FULL_FT": clean, "LORA_LIKE": wm}, quick, seed=0)
    moe = MoEDetector(experts, gating, threshold=0.4)
    x = torch.rand(5, *SHAPE)
    with tempfile.TemporaryDirectory() as tmp:
        save_moe(moe, tmp)
        loaded = load_moe(tmp)
    assert loaded.methods == moe.methods and loaded.threshold == 0.4
    assert torch.equal(detect(loaded, x), detect(moe, x))


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
