"""Smoke test for the tactile_bci extension module.

    maturin build --release -m crates/python/Cargo.toml
    pip install --force-reinstall target/wheels/tactile_bci-*.whl
    python python/smoke_test.py
"""

import json
import sys
import tempfile

import tactile_bci as tb

TINY = """
seed = 3
days = [2]

[protocol]
calibration_runs_per_target = 1
trials_per_vibrator = 1
continuous_runs_per_vibrator = 1
n_taps = 301
"""


def check_config():
    h = tb.config_hash(TINY)
    assert len(h) == 64 and h == tb.config_hash(TINY)
    assert h != tb.config_hash()
    assert "seed = 3" in tb.effective_config(TINY)
    try:
        tb.config_hash("seed = 'x'")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")


def check_schedule():
    s = tb.schedule(2, 20, 7)
    assert len(s) == 80
    assert s == tb.schedule(2, 20, 7)
    for r in range(20):
        assert sorted(v for rr, v, _ in s if rr == r) == [1, 2, 3, 4]
    assert [t for _, _, t in s] == [400 * i for i in range(80)]
    assert all(a[1] != b[1] for a, b in zip(s, s[1:]))
    try:
        tb.schedule(5, 20, 7)
    except ValueError:
        pass
    else:
        raise AssertionError("vibrator 5 accepted")


def check_runs():
    online = json.loads(tb.run_online(TINY, "single", 2))
    assert online["n_trials"] == 4
    assert 0.0 <= online["success_rate_pct"] <= 100.0
    cont = json.loads(tb.run_continuous(TINY, "dual", 2))
    assert cont["condition"] == "dual" and cont["config_hash"] == tb.config_hash(TINY)


def check_archive():
    with tempfile.TemporaryDirectory() as d:
        n = tb.archive_runs(TINY, d, [("online", "single", 2)])
        assert n > 0
        assert tb.archive_runs(TINY, d, [("calibration", "dual", 2)]) > n
        identical, compared, differing = tb.replay_archive(d)
        assert identical and compared > n and not differing, differing
        try:
            tb.archive_runs(TINY.replace("seed = 3", "seed = 4"), d, [("calibration", "dual", 2)])
        except RuntimeError as e:
            assert "mixed-config" in str(e)
        else:
            raise AssertionError("mixed-config archive accepted")


if __name__ == "__main__":
    for check in (check_config, check_schedule, check_runs, check_archive):
        check()
        print(f"ok {check.__name__}")
    sys.exit(0)
