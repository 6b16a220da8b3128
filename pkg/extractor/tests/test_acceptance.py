"""Extractor acceptance: the emitted file must behave as a drop-in kernel
for the valuation engine, reachable only through the file format and CLI."""

import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from entk_extractor import ExtractionConfig, ModelSpec, extract


def report(ok: bool, detail: str):
    line = f"ACCEPTANCE 11 {'PASS' if ok else 'FAIL'}: extractor contract ({detail})"
    print(line, flush=True)
    assert ok, line


def engine_header(path) -> str:
    exe = shutil.which("kernval")
    if exe:
        out = subprocess.run([exe, "kernel-info", str(path)], capture_output=True, text=True)
    else:  # same environment, module invocation
        out = subprocess.run(
            [sys.executable, "-m", "kernval.cli", "kernel-info", str(path)],
            capture_output=True,
            text=True,
        )
    assert out.returncode == 0, out.stderr
    return out.stdout.strip()


def test_criterion_11_extractor_contract(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(7)
    xt = rng.standard_normal((24, 8))
    xq = rng.standard_normal((10, 8))
    xq[4] = xt[9]  # duplicated input across train/test

    # nonlinear model for the structural checks
    cfg = ExtractionConfig(
        model=ModelSpec("mlp", in_dim=8, out_dim=3, hidden=(12,), seed=2),
        logit_indices=(0, 1),
        batch_size=5,
    )
    path = tmp_path / "mlp.entk"
    extract(cfg, xt, xq, path)

    header = engine_header(path)
    loads = header == "n_train=24 n_test=10 n_classes=2 layout=0"

    block = np.fromfile(path, dtype="<f8", offset=28).reshape(34, 24)
    tt = block[:24]
    sym = float(np.abs(tt - tt.T).max()) / max(float(np.abs(tt).max()), 1e-30) < 1e-5
    eigs = np.linalg.eigvalsh((tt + tt.T) / 2)
    psd = eigs.min() >= -1e-6 * np.trace(tt) / 24
    dup = float(np.abs(block[24 + 4] - block[9]).max()) < 1e-6

    # linear model against the hand-derived Jacobian product
    lin = ExtractionConfig(
        model=ModelSpec("linear", in_dim=8, out_dim=3, bias=False, seed=4),
        logit_indices=(0, 2),
    )
    lin_path = tmp_path / "lin.entk"
    extract(lin, xt, xq, lin_path)
    lin_block = np.fromfile(lin_path, dtype="<f8", offset=28).reshape(34, 24)
    closed_form = np.vstack([xt, xq]) @ xt.T
    lin_ok = float(np.abs(lin_block - closed_form).max()) < 1e-8

    ok = loads and sym and psd and dup and lin_ok
    report(ok, f"loads={loads} sym={sym} psd={psd} dup={dup} linear={lin_ok} "
               f"{time.time()-t0:.1f}s")
