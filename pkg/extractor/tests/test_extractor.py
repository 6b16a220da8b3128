import json

import numpy as np
import pytest
import torch

from entk_extractor import (
    ConfigError,
    ExtractionConfig,
    ModelSpec,
    ParamSelector,
    build_model,
    extract,
    jacobian_features,
    kernel_blocks,
)


def linear_config(d=6, out=4, bias=False, **kw):
    defaults = dict(
        model=ModelSpec("linear", in_dim=d, out_dim=out, bias=bias, seed=3),
        logit_indices=(0, 1),
    )
    defaults.update(kw)
    return ExtractionConfig(**defaults)


def mlp_config(d=6, **kw):
    defaults = dict(
        model=ModelSpec("mlp", in_dim=d, out_dim=3, hidden=(16, 8), seed=5),
        logit_indices=(0, 2),
    )
    defaults.update(kw)
    return ExtractionConfig(**defaults)


@pytest.fixture()
def data():
    rng = np.random.default_rng(11)
    return rng.standard_normal((20, 6)), rng.standard_normal((7, 6))


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        raw = {
            "model": {"kind": "mlp", "in_dim": 4, "out_dim": 3, "hidden": [8], "seed": 2},
            "logit_indices": [0, 2],
            "selector": {"kind": "last_k", "k": 2},
            "layout": 1,
            "batch_size": 16,
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(raw))
        cfg = ExtractionConfig.from_json(path)
        assert cfg.model.hidden == (8,)
        assert cfg.selector.kind == "last_k" and cfg.selector.k == 2
        assert cfg.layout == 1 and cfg.n_classes == 2

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelSpec("resnet", in_dim=3, out_dim=2)
        with pytest.raises(ConfigError):
            ModelSpec("pickled")
        with pytest.raises(ConfigError):
            linear_config(logit_indices=(0,))
        with pytest.raises(ConfigError):
            linear_config(logit_indices=(0, 0))
        with pytest.raises(ConfigError):
            linear_config(layout=2)
        with pytest.raises(ConfigError):
            ParamSelector("last_k", k=0)

    def test_selector_pick(self):
        names = ["net.0.weight", "net.0.bias", "head.weight", "head.bias"]
        assert ParamSelector("all").pick(names) == names
        assert ParamSelector("last_k", k=2).pick(names) == ["head.weight", "head.bias"]
        assert ParamSelector("patterns", patterns=("head.*",)).pick(names) == [
            "head.weight", "head.bias",
        ]
        with pytest.raises(ConfigError):
            ParamSelector("patterns", patterns=("nope.*",)).pick(names)

    def test_logit_index_out_of_range(self, data):
        xt, xq = data
        cfg = linear_config(out=2, logit_indices=(0, 5))
        with pytest.raises(ConfigError, match="out of range"):
            jacobian_features(build_model(cfg.model, torch.float64), cfg, xt)


class TestLinearClosedForm:
    def test_shared_layout_equals_gram(self, data, tmp_path):
        xt, xq = data
        cfg = linear_config()
        path = tmp_path / "k.entk"
        extract(cfg, xt, xq, path)
        payload = np.fromfile(path, dtype="<f8", offset=28).reshape(27, 20)
        gram = np.vstack([xt, xq]) @ xt.T
        np.testing.assert_allclose(payload, gram, atol=1e-8)

    def test_per_class_layout_equals_gram_per_class(self, data, tmp_path):
        xt, xq = data
        cfg = linear_config(layout=1)
        path = tmp_path / "k.entk"
        extract(cfg, xt, xq, path)
        payload = np.fromfile(path, dtype="<f8", offset=28).reshape(2, 27, 20)
        gram = np.vstack([xt, xq]) @ xt.T
        for c in range(2):
            np.testing.assert_allclose(payload[c], gram, atol=1e-8)

    def test_bias_adds_constant(self, data, tmp_path):
        xt, xq = data
        cfg = linear_config(bias=True)
        path = tmp_path / "k.entk"
        extract(cfg, xt, xq, path)
        payload = np.fromfile(path, dtype="<f8", offset=28).reshape(27, 20)
        gram = np.vstack([xt, xq]) @ xt.T + 1.0
        np.testing.assert_allclose(payload, gram, atol=1e-8)

    def test_param_subset_restricts_features(self, data, tmp_path):
        # selecting only the weight of a biased linear model drops the +1 term
        xt, xq = data
        cfg = linear_config(bias=True, selector=ParamSelector("patterns", patterns=("weight",)))
        path = tmp_path / "k.entk"
        extract(cfg, xt, xq, path)
        payload = np.fromfile(path, dtype="<f8", offset=28).reshape(27, 20)
        np.testing.assert_allclose(payload, np.vstack([xt, xq]) @ xt.T, atol=1e-8)


class TestInvariants:
    def test_train_block_symmetric_and_psd(self, data, tmp_path):
        xt, xq = data
        for cfg in (linear_config(), mlp_config()):
            path = tmp_path / "k.entk"
            extract(cfg, xt, xq, path)
            payload = np.fromfile(path, dtype="<f8", offset=28)
            if cfg.layout == 0:
                blocks = [payload.reshape(27, 20)[:20]]
            else:
                blocks = list(payload.reshape(2, 27, 20)[:, :20])
            for tt in blocks:
                denom = max(float(np.abs(tt).max()), 1e-30)
                assert float(np.abs(tt - tt.T).max()) / denom < 1e-5
                eigs = np.linalg.eigvalsh((tt + tt.T) / 2)
                assert eigs.min() >= -1e-6 * np.trace(tt) / tt.shape[0]

    def test_duplicate_input_rows_equal(self, data, tmp_path):
        xt, xq = data
        xq = xq.copy()
        xq[3] = xt[5]  # test row 3 duplicates train row 5
        cfg = mlp_config()
        path = tmp_path / "k.entk"
        extract(cfg, xt, xq, path)
        payload = np.fromfile(path, dtype="<f8", offset=28).reshape(27, 20)
        np.testing.assert_allclose(payload[20 + 3], payload[5], atol=1e-6)

    def test_chunked_matches_unchunked(self, data, tmp_path):
        xt, xq = data
        a = tmp_path / "a.entk"
        b = tmp_path / "b.entk"
        extract(mlp_config(batch_size=64), xt, xq, a)
        extract(mlp_config(batch_size=3), xt, xq, b)
        pa = np.fromfile(a, dtype="<f8", offset=28)
        pb = np.fromfile(b, dtype="<f8", offset=28)
        assert float(np.abs(pa - pb).max()) < 1e-10

    def test_seeded_model_is_deterministic(self, data, tmp_path):
        xt, xq = data
        a = tmp_path / "a.entk"
        b = tmp_path / "b.entk"
        extract(mlp_config(), xt, xq, a)
        extract(mlp_config(), xt, xq, b)
        assert a.read_bytes() == b.read_bytes()

    def test_pickled_model_round_trip(self, data, tmp_path):
        xt, xq = data
        torch.manual_seed(0)
        net = torch.nn.Linear(6, 3, bias=False).double()
        saved = tmp_path / "model.pt"
        torch.save(net, saved)
        cfg = ExtractionConfig(
            model=ModelSpec("pickled", path=str(saved)),
            logit_indices=(0, 1),
        )
        path = tmp_path / "k.entk"
        extract(cfg, xt, xq, path)
        payload = np.fromfile(path, dtype="<f8", offset=28).reshape(27, 20)
        np.testing.assert_allclose(payload, np.vstack([xt, xq]) @ xt.T, atol=1e-8)


class TestCli:
    def test_end_to_end(self, data, tmp_path, capsys):
        from entk_extractor.cli import main

        xt, xq = data
        np.save(tmp_path / "xt.npy", xt)
        np.save(tmp_path / "xq.npy", xq)
        cfg = {
            "model": {"kind": "linear", "in_dim": 6, "out_dim": 3, "bias": False, "seed": 1},
            "logit_indices": [0, 1],
        }
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        rc = main([
            "--config", str(tmp_path / "cfg.json"),
            "--train-features", str(tmp_path / "xt.npy"),
            "--test-features", str(tmp_path / "xq.npy"),
            "--out", str(tmp_path / "k.entk"),
        ])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["n_train"] == 20 and summary["layout"] == 0

    def test_bad_config_exit_one(self, tmp_path, capsys):
        from entk_extractor.cli import main

        (tmp_path / "cfg.json").write_text(json.dumps({"logit_indices": [0, 1]}))
        rc = main([
            "--config", str(tmp_path / "cfg.json"),
            "--train-features", "x", "--test-features", "y", "--out", "z",
        ])
        assert rc == 1
