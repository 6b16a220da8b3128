"""Per-example Jacobians and their inner products, written as kernel files.

For a classifier f(x; theta) and a selected parameter subset, the feature map
is psi(x) = d f(x)[logits] / d theta_sel, one row per selected output.  The
kernel entry between two examples is the inner product of those rows.  The
whole (train+test) x train block is assembled in row chunks so memory stays
bounded; chunked and unchunked runs agree entrywise.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.func import functional_call, jacrev, vmap

from .config import ConfigError, ExtractionConfig, ModelSpec
from .kernelfile import write_kernel_file


def build_model(spec: ModelSpec, dtype: torch.dtype) -> nn.Module:
    if spec.kind == "pickled":
        # full eager module saved with torch.save; trusted input only
        model = torch.load(spec.path, weights_only=False)
        if not isinstance(model, nn.Module):
            raise ConfigError(f"{spec.path} does not contain an nn.Module")
    elif spec.kind == "linear":
        torch.manual_seed(spec.seed)
        model = nn.Linear(spec.in_dim, spec.out_dim, bias=spec.bias)
    else:
        torch.manual_seed(spec.seed)
        layers: list[nn.Module] = []
        width = spec.in_dim
        for h in spec.hidden:
            layers += [nn.Linear(width, h, bias=spec.bias), nn.Tanh()]
            width = h
        layers.append(nn.Linear(width, spec.out_dim, bias=spec.bias))
        model = nn.Sequential(*layers)
    model = model.to(dtype)
    model.eval()
    return model


def _selected_params(model: nn.Module, config: ExtractionConfig):
    named = dict(model.named_parameters())
    if not named:
        raise ConfigError("model exposes no parameters")
    chosen = config.selector.pick(list(named))
    return {name: named[name] for name in chosen}


def jacobian_features(
    model: nn.Module, config: ExtractionConfig, x: np.ndarray
) -> np.ndarray:
    """psi for every example: array (n, C, P) over the selected parameters."""
    dtype = torch.float64 if config.precision == "float64" else torch.float32
    params = _selected_params(model, config)
    fixed = {
        name: tensor
        for name, tensor in dict(model.named_parameters()).items()
        if name not in params
    }
    buffers = dict(model.named_buffers())
    logit_idx = torch.tensor(config.logit_indices, dtype=torch.long)

    def outputs(sel, example):
        merged = {**fixed, **buffers, **sel}
        out = functional_call(model, merged, (example.unsqueeze(0),)).squeeze(0)
        if out.shape[-1] <= int(logit_idx.max()):
            raise ConfigError(
                f"logit index {int(logit_idx.max())} out of range for "
                f"{out.shape[-1]} model outputs"
            )
        return out[logit_idx]

    per_example = vmap(jacrev(outputs), in_dims=(None, 0))
    chunks = []
    inputs = torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)
    for start in range(0, inputs.shape[0], config.batch_size):
        batch = inputs[start : start + config.batch_size]
        with torch.no_grad():
            jac = per_example(params, batch)
        flat = torch.cat([j.reshape(batch.shape[0], config.n_classes, -1) for j in jac.values()], dim=-1)
        chunks.append(flat.to(torch.float64).numpy())
    return np.concatenate(chunks, axis=0)


def kernel_blocks(features_all: np.ndarray, n_train: int, config: ExtractionConfig) -> np.ndarray:
    """Kernel block(s) from the (n+m, C, P) feature tensor."""
    train = features_all[:n_train]
    if config.layout == 0:
        c0 = config.shared_logit
        return features_all[:, c0, :] @ train[:, c0, :].T
    blocks = [features_all[:, c, :] @ train[:, c, :].T for c in range(config.n_classes)]
    return np.stack(blocks)


def extract(
    config: ExtractionConfig,
    train_features: np.ndarray,
    test_features: np.ndarray,
    out_path,
) -> dict:
    """Compute the kernel of train+test against train and write it to disk.

    Returns a small summary dict (dims, layout, parameter count).
    """
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    if train_features.ndim != 2 or test_features.ndim != 2:
        raise ConfigError("feature arrays must be 2-d (examples x input dim)")
    if train_features.shape[1] != test_features.shape[1]:
        raise ConfigError("train/test input dims differ")
    n, m = train_features.shape[0], test_features.shape[0]

    dtype = torch.float64 if config.precision == "float64" else torch.float32
    model = build_model(config.model, dtype)
    feats = jacobian_features(model, config, np.vstack([train_features, test_features]))
    block = kernel_blocks(feats, n, config)
    write_kernel_file(out_path, n, m, config.n_classes, config.layout, block)
    return {
        "n_train": n,
        "n_test": m,
        "n_classes": config.n_classes,
        "layout": config.layout,
        "selected_parameters": int(feats.shape[-1]),
    }
