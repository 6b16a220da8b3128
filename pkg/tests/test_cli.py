import json

import numpy as np
import pytest

from kernval.cli import main
from kernval.datasets import LabeledDataset
from kernval.kernelstore import KernelStore, Layout, write_kernel


@pytest.fixture()
def workdir(tmp_path):
    rc = main([
        "synth-kernel", "--n-train", "16", "--n-test", "12", "--seed", "3",
        "--out", str(tmp_path),
    ])
    assert rc == 0
    return tmp_path


def run(args):
    return main([str(a) for a in args])


def valuate_args(workdir, method, out, **extra):
    args = [
        "valuate",
        "--kernel", workdir / "kernel.entk",
        "--train-labels", workdir / "train_labels.csv",
        "--test-labels", workdir / "test_labels.csv",
        "--method", method,
        "--out", out,
    ]
    for key, val in extra.items():
        args += [f"--{key}", val]
    return args


class TestValuate:
    def test_tmc_zero_tolerance_matches_freeshap_byte_for_byte(self, workdir, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert run(valuate_args(workdir, "freeshap", out_a, seed="7", iters="15")) == 0
        assert run(valuate_args(workdir, "tmc", out_b, seed="7", iters="15", tolerance="0")) == 0
        a = (out_a / "scores_freeshap.csv").read_bytes()
        b = (out_b / "scores_tmc.csv").read_bytes()
        assert a == b

    def test_manifest_written(self, workdir, tmp_path):
        out = tmp_path / "m"
        assert run(valuate_args(workdir, "loo", out)) == 0
        manifest = json.loads((out / "valuate_loo_manifest.json").read_text())
        assert manifest["command"] == "valuate"
        assert manifest["empty_policy"] == "constant:0"
        assert "kernel_sha256" in manifest

    def test_exact_respects_cap(self, workdir, tmp_path):
        rc = run(valuate_args(workdir, "exact", tmp_path / "e", cap="8"))
        assert rc == 1  # n=16 over the cap -> validation error

    def test_single_target(self, workdir, tmp_path):
        out = tmp_path / "t"
        assert run(valuate_args(workdir, "loo", out, target="te-00003")) == 0
        text = (out / "scores_loo.csv").read_text()
        assert "te-00003" in text

    def test_unknown_target_fails_validation(self, workdir, tmp_path):
        rc = run(valuate_args(workdir, "loo", tmp_path / "x", target="nope"))
        assert rc == 1


class TestDeterminism:
    def test_reruns_and_worker_counts_byte_identical(self, workdir, tmp_path):
        outputs = []
        for tag, workers in (("w1", "1"), ("w4", "4"), ("w1b", "1")):
            out = tmp_path / tag
            assert run(
                valuate_args(workdir, "tmc", out, seed="11", iters="12", workers=workers)
            ) == 0
            outputs.append((out / "scores_tmc.csv").read_bytes())
        assert outputs[0] == outputs[1] == outputs[2]


class TestCorr:
    def test_self_correlation_line(self, workdir, tmp_path, capsys):
        out = tmp_path / "c"
        assert run(valuate_args(workdir, "loo", out)) == 0
        capsys.readouterr()
        rc = run(["corr", out / "scores_loo.csv", out / "scores_loo.csv"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "pearson=1.000000 spearman=1.000000"


class TestKernelInfo:
    def test_header_echo(self, workdir, capsys):
        rc = run(["kernel-info", workdir / "kernel.entk"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "n_train=16 n_test=12 n_classes=2 layout=0"

    def test_bad_file_exit_one(self, tmp_path, capsys):
        path = tmp_path / "junk.entk"
        path.write_bytes(b"XXXXXXXX" + b"\x00" * 32)
        assert run(["kernel-info", path]) == 1


class TestErrorPaths:
    def test_unknown_flag_exits_one(self, capsys):
        assert main(["valuate", "--bogus", "1"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err

    def test_missing_required_flag(self, workdir):
        assert main(["valuate", "--method", "loo"]) == 1

    def test_singular_kernel_exits_two(self, tmp_path):
        # all-zero kernel: jitter scales off the zero diagonal, so the solve
        # can never be rescued -> numerical-failure exit code
        store = KernelStore(4, 2, 2, Layout.SHARED0, np.zeros((6, 4)))
        write_kernel(store, tmp_path / "zero.entk")
        train = "id,label\n" + "".join(f"a{i},{i % 2}\n" for i in range(4))
        test = "id,label\n" + "".join(f"t{i},{i % 2}\n" for i in range(2))
        (tmp_path / "train.csv").write_text(train)
        (tmp_path / "test.csv").write_text(test)
        rc = main([
            "valuate", "--kernel", str(tmp_path / "zero.entk"),
            "--train-labels", str(tmp_path / "train.csv"),
            "--test-labels", str(tmp_path / "test.csv"),
            "--method", "loo", "--out", str(tmp_path / "o"),
        ])
        assert rc == 2


class TestPipelines:
    def test_removal_select_mislabel_end_to_end(self, tmp_path):
        rc = main([
            "synth-kernel", "--n-train", "20", "--n-test", "10", "--n-heldout", "8",
            "--seed", "5", "--out", str(tmp_path),
        ])
        assert rc == 0
        base = [
            "--kernel", str(tmp_path / "kernel.entk"),
            "--train-labels", str(tmp_path / "train_labels.csv"),
            "--test-labels", str(tmp_path / "test_labels.csv"),
        ]
        out = tmp_path / "scores"
        assert main(["valuate", *base, "--method", "freeshap", "--iters", "10",
                     "--seed", "2", "--out", str(out)]) == 0
        scores = out / "scores_freeshap.csv"

        rem = tmp_path / "removal"
        assert main(["removal", *base, "--scores", str(scores), "--step", "0.2",
                     "--out", str(rem)]) == 0
        assert (rem / "removal_high-first.csv").exists()
        assert (rem / "removal_low-first.csv").exists()
        header = (rem / "removal_high-first.csv").read_text().splitlines()[0]
        assert header == "level,fraction,accuracy"

        sel = tmp_path / "select"
        assert main(["select", *base, "--heldout-labels", str(tmp_path / "heldout_labels.csv"),
                     "--scores", str(scores), "--steps", "0.25,0.5,1.0",
                     "--out", str(sel)]) == 0
        assert (sel / "selection.csv").exists()

        mis = tmp_path / "mislabel"
        assert main(["mislabel", *base, "--flip", "0.2", "--method", "loo",
                     "--seed", "3", "--out", str(mis)]) == 0
        text = (mis / "detection.csv").read_text().splitlines()
        assert text[0] == "inspected_fraction,found_fraction,baseline"
        assert len(text) == 22  # 0..1 in 5% steps

    def test_robustness_smoke(self, tmp_path):
        rc = main([
            "robustness", "--pool", "3", "--resamples", "3", "--n-others", "12",
            "--test-size", "24", "--iters", "6", "--seed", "1",
            "--out", str(tmp_path), "--workers", "2",
        ])
        assert rc == 0
        assert (tmp_path / "robustness_shapley.csv").exists()
        assert (tmp_path / "robustness_loo.csv").exists()
        diag = json.loads((tmp_path / "remark_diagnostics.json").read_text())
        assert set(diag["pool_average"]) == {"shapley", "loo"}
        manifest = json.loads((tmp_path / "robustness_manifest.json").read_text())
        assert manifest["methods"] == ["shapley", "loo"]


class TestConfigPrecedence:
    def test_config_file_then_flag_override(self, workdir, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"iters": 5, "seed": 9}))
        out_a = tmp_path / "a"
        rc = main([
            "valuate",
            "--kernel", str(workdir / "kernel.entk"),
            "--train-labels", str(workdir / "train_labels.csv"),
            "--test-labels", str(workdir / "test_labels.csv"),
            "--method", "freeshap", "--config", str(config), "--out", str(out_a),
        ])
        assert rc == 0
        manifest = json.loads((out_a / "valuate_freeshap_manifest.json").read_text())
        assert manifest["iters"] == 5 and manifest["seed"] == 9
        out_b = tmp_path / "b"
        rc = main([
            "valuate",
            "--kernel", str(workdir / "kernel.entk"),
            "--train-labels", str(workdir / "train_labels.csv"),
            "--test-labels", str(workdir / "test_labels.csv"),
            "--method", "freeshap", "--config", str(config),
            "--iters", "3", "--out", str(out_b),
        ])
        assert rc == 0
        manifest = json.loads((out_b / "valuate_freeshap_manifest.json").read_text())
        assert manifest["iters"] == 3 and manifest["seed"] == 9

    def test_env_out_dir(self, workdir, tmp_path, monkeypatch):
        target = tmp_path / "envout"
        monkeypatch.setenv("KERNVAL_OUT_DIR", str(target))
        rc = main([
            "valuate",
            "--kernel", str(workdir / "kernel.entk"),
            "--train-labels", str(workdir / "train_labels.csv"),
            "--test-labels", str(workdir / "test_labels.csv"),
            "--method", "loo",
        ])
        assert rc == 0
        assert (target / "scores_loo.csv").exists()
