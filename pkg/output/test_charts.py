"""Chart builder checks (figure structure only; PNG export needs kaleido).

Run with: python -m output.test_charts
"""

import os
import sys
import tempfile

import pandas as pd

from output.charts import (
    create_rate_sweep_chart,
    create_robustness_chart,
    create_step_sweep_chart,
    create_transfer_heatmap,
    save_figure,
)


def _steps_frame() -> pd.DataFrame:
    rows = []
    for watermark, tpr in (("optimized", 0.9), ("random", 0.4)):
        for steps in (1, 2):
            rows.append({"steps": steps, "seed": 0, "column": "expert", "tpr": tpr, "method": "FULL_FT",
                         "watermark": watermark, "fid_to_final": 0.0 if steps == 2 else 3.5, "error": None})
    return pd.DataFrame(rows)


def test_step_chart_has_line_per_watermark_and_fid_bars():
    fig = create_step_sweep_chart(_steps_frame())
    kinds = [t.type for t in fig.data]
    assert kinds.count("scatter") == 2 and kinds.count("bar") == 1
    assert "random" in fig.data[1].name


def test_failed_points_are_left_out_of_means():
    frame = pd.concat([_steps_frame(), pd.DataFrame([{"steps": 1, "seed": 1, "column": "expert", "tpr": 0.0,
                                                      "method": "FULL_FT", "watermark": "optimized",
                                                      "error": "ValueError: boom"}])], ignore_index=True)
    fig = create_step_sweep_chart(frame)
    assert list(fig.data[0].y) == [0.9, 0.9]


def test_rate_chart_uses_percent_axis():
    frame = pd.DataFrame([{"rate": r, "column": c, "tpr": r, "method": "LORA_LIKE", "error": None}
                          for r in (0.5, 1.0) for c in ("expert", "moe")])
    fig = create_rate_sweep_chart(frame)
    assert len(fig.data) == 2 and list(fig.data[0].x) == [50.0, 100.0]


def test_robustness_and_heatmap():
    table = pd.DataFrame([{"method": "FULL_FT", "corruption": c, "expert_aug": 0.9, "expert_plain": 0.6}
                          for c in ("clean", "JPEG")])
    assert len(create_robustness_chart(table).data) == 2
    matrix = pd.DataFrame([[0.9, 0.6], [0.5, 0.8]], index=["FULL_FT", "LORA_LIKE"], columns=["FULL_FT", "LORA_LIKE"])
    heat = create_transfer_heatmap(matrix)
    assert heat.data[0].type == "heatmap" and heat.data[0].text[0][1] == "0.60"


def test_empty_inputs_give_placeholder_figures():
    for fig in (create_step_sweep_chart(pd.DataFrame()), create_rate_sweep_chart(pd.DataFrame()),
                create_robustness_chart(pd.DataFrame()), create_transfer_heatmap(pd.DataFrame())):
        assert len(fig.data) == 0 and fig.layout.annotations


def test_save_figure_returns_path_or_none():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "charts", "steps.png")
        out = save_figure(create_step_sweep_chart(_steps_frame()), path)
        assert out is None or (out == path and os.path.isfile(path))


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
