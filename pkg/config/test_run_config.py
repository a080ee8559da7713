"""Run-config checks: merging, unknown keys, validation, environment, hashing.

Run with: python -m config.test_run_config
"""

import json
import os
import sys
import tempfile

from config.parameters import ENV_JOBS, ENV_OUTPUT_ROOT
from config.run_config import DEFAULT_RUN_CONFIG, config_hash, load_run_config
from engine.errors import ConfigError


def _write(cfg: dict) -> str:
    fd, path = tempfile.mkstemp(suffix=".json")
    with os.fdopen(fd, "w") as f:
        json.dump(cfg, f)
    return path


def _expect_config_error(fn, fragment: str):
    try:
        fn()
    except ConfigError as exc:
        assert fragment in str(exc), str(exc)
        return
    raise AssertionError(f"no ConfigError mentioning {fragment!r}")


def test_defaults_load_and_validate():
    cfg = load_run_config()
    assert cfg["watermark"]["eta"] == DEFAULT_RUN_CONFIG["watermark"]["eta"]
    assert cfg["finetune"]["methods"] == DEFAULT_RUN_CONFIG["finetune"]["methods"]


def test_file_is_deep_merged():
    path = _write({"seed": 7, "watermark": {"eta": 2 / 255}, "finetune": {"per_method": {"LORA_LIKE": {"lr": 0.01}}}})
    try:
        cfg = load_run_config(path)
    finally:
        os.remove(path)
    assert cfg["seed"] == 7 and cfg["watermark"]["eta"] == 2 / 255
    assert cfg["watermark"]["epochs"] == DEFAULT_RUN_CONFIG["watermark"]["epochs"]
    assert cfg["finetune"]["per_method"]["LORA_LIKE"]["lr"] == 0.01
    assert cfg["finetune"]["per_method"]["LORA_LIKE"]["batch_size"] == \
        DEFAULT_RUN_CONFIG["finetune"]["per_method"]["LORA_LIKE"]["batch_size"]


def test_unknown_keys_name_the_dotted_path():
    path = _write({"detector": {"augmentation": {"rotate": True}}})
    try:
        _expect_config_error(lambda: load_run_config(path), "detector.augmentation.rotate")
    finally:
        os.remove(path)
    _expect_config_error(lambda: load_run_config(overrides={"colour": 1}), "colour")


def test_range_errors_are_config_errors():
    bad = [
        ({"watermark": {"eta": 0.0}}, "watermark.eta"),
        ({"watermark": {"eta": 0.5}}, "watermark.eta"),
        ({"finetune": {"methods": ["FULL_FT", "NOPE"]}}, "finetune.methods"),
        ({"experiments": {"rates": [0.0, 0.5]}}, "experiments.rates"),
        ({"dataset": {"image_shape": [3, 30, 30]}}, "dataset.image_shape"),
        ({"detector": {"augmentation": {"probability": 3.0}}}, "detector.augmentation"),
        ({"experiments": {"corruptions": {"JPEG": {"quality": 0}}}}, "experiments.corruptions"),
    ]
    for override, key in bad:
        _expect_config_error(lambda: load_run_config(overrides=override), key)


def test_missing_or_broken_file():
    _expect_config_error(lambda: load_run_config("/nonexistent/run.json"), "not found")
    fd, path = tempfile.mkstemp(suffix=".json")
    with os.fdopen(fd, "w") as f:
        f.write("{not json")
    try:
        _expect_config_error(lambda: load_run_config(path), "not valid JSON")
    finally:
        os.remove(path)


def test_environment_sits_between_file_and_flags():
    saved = {k: os.environ.get(k) for k in (ENV_OUTPUT_ROOT, ENV_JOBS)}
    os.environ[ENV_OUTPUT_ROOT] = "/tmp/seal-env-root"
    os.environ[ENV_JOBS] = "3"
    path = _write({"output_root": "from-file", "jobs": 2})
    try:
        cfg = load_run_config(path)
        assert cfg["output_root"] == "/tmp/seal-env-root" and cfg["jobs"] == 3
        cfg = load_run_config(path, overrides={"jobs": 5, "output_root": None})
        assert cfg["jobs"] == 5 and cfg["output_root"] == "/tmp/seal-env-root"
        os.environ[ENV_JOBS] = "many"
        _expect_config_error(lambda: load_run_config(path), ENV_JOBS)
    finally:
        os.remove(path)
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def test_config_hash_stable_and_ignores_runtime_keys():
    a = load_run_config(overrides={"seed": 1})
    b = load_run_config(overrides={"seed": 1, "jobs": 4, "output_root": "elsewhere"})
    c = load_run_config(overrides={"seed": 2})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 64


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
