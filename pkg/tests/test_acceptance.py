"""Acceptance gate: one test per criterion, each at its stated tolerance and runtime limit.

A pass/fail line per criterion is printed in the terminal summary (see
conftest.py). Criterion 10 re-runs every suite in a fresh process and compares
the JSON reports byte for byte.
"""
import json
import subprocess
import sys
import time

import pytest

from snfkit.verify import SUITES, load_reference, report_json

CRITERIA = {
    1: ("MH detailed balance < 1e-12 on a 200x200 grid, 3 proposals", "detailed-balance", 10),
    2: ("MH stationarity interval error < 1e-4 with convergence guard", "stationarity", 30),
    3: ("coupling-stack pushforward: mass 1 +- 1e-4, chi2 < 0.999 quantile", "pushforward", 60),
    4: ("NF loss = SNF loss per sample < 1e-10 (deterministic chain)", "nf-snf", 10),
    5: ("VAE = one-layer SNF per sample < 1e-10; MC-ELBO within 3 CLT bands", "vae-snf", 60),
    6: ("identity-chain loss = 0.806853 +- 3 standard errors", "identity-kl", 60),
    7: ("full SNF gradient vs central differences, relative error < 1e-4", "gradient", 120),
    8: ("diffusion variance 1.0 within 4 CLT standard errors", "diffusion-variance", 30),
    9: ("8-mode mixture: energy distance < 1.5x reference, every mode >= 2%", "generative", 900),
}

RESULTS = {}  # criterion -> (passed, detail); read by the terminal-summary hook
_RECORDS = {}


def _run(criterion):
    title, suite, limit = CRITERIA[criterion]
    start = time.perf_counter()
    records = SUITES[suite](0)
    elapsed = time.perf_counter() - start
    _RECORDS[suite] = records
    failed = [r for r in records if not r["pass"]]
    ok = not failed and elapsed < limit
    shown = failed[0] if failed else records[0]
    detail = (f"{title}: {len(records)} checks, {'all pass' if not failed else 'FAILED ' + shown['check']}"
              f"; {shown['check']} observed {shown['observed']:.3g} vs tolerance {shown['tolerance']:.3g}"
              f"; {elapsed:.1f}s (limit {limit}s)")
    RESULTS[criterion] = (ok, detail)
    assert not failed, json.dumps(failed, indent=2)
    assert elapsed < limit, f"runtime {elapsed:.1f}s exceeds {limit}s"
    return records


@pytest.mark.parametrize("criterion", range(1, 9))
def test_criterion(criterion):
    _run(criterion)


@pytest.mark.slow
def test_criterion_9_generative():
    ref = load_reference()
    assert ref["gmm8_energy_distance"] > 0  # reference recorded before the gate is enabled
    _run(9)


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    missing = [s for s in SUITES if s not in _RECORDS]
    if missing:
        RESULTS[10] = (False, f"criteria for {missing} did not run in this session")
        pytest.fail(RESULTS[10][1])
    first = report_json([r for s in SUITES for r in _RECORDS[s]])
    out = tmp_path / "rerun.json"
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "snfkit.cli", "verify", "--suite", "all", "--seed", "0",
                           "--out", str(out)], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    same = out.exists() and out.read_text() == first
    RESULTS[10] = (same, f"re-run of criteria 1-9 in a fresh process: reports "
                         f"{'bit-identical' if same else 'DIFFER'} ({elapsed:.1f}s)")
    assert out.exists(), proc.stderr
    assert same
