"""Acceptance gate: every criterion of the ledger on the default scenario suite.

Each test prints one line ``criterion k  PASS|FAIL  <name>  <per-scenario status>``.
"""
import functools

import pytest

from localtb.harness import CRITERIA, KINDS, generate_scenario, run_pipeline


@functools.lru_cache(maxsize=None)
def full_report(kind: str):
    return run_pipeline(generate_scenario(kind))


@pytest.fixture(scope="module")
def reports():
    return {kind: full_report(kind) for kind in KINDS}


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, reports, capsys):
    rows = {kind: rep.ledger[k] for kind, rep in reports.items()}
    ok = all(r.ok for r in rows.values())
    status = " ".join(f"{kind}={'ok' if r.ok else 'FAIL'}" for kind, r in rows.items())
    with capsys.disabled():
        print(f"\ncriterion {k:>2}  {'PASS' if ok else 'FAIL'}  {CRITERIA[k]}  [{status}]")
    failing = {kind: r.detail for kind, r in rows.items() if not r.ok}
    assert ok, failing
