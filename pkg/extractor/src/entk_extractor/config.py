"""Extraction configuration: model, parameter subset, logits, layout."""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


_MODEL_KINDS = ("linear", "mlp", "pickled")
_SELECTOR_KINDS = ("all", "last_k", "patterns")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    hidden: tuple[int, ...] = ()
    bias: bool = True
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in _MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {_MODEL_KINDS}, got {self.kind!r}")
        if self.kind == "pickled":
            if not self.path:
                raise ConfigError("pickled model needs a path")
        elif self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError("built-in models need in_dim >= 1 and out_dim >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class ParamSelector:
    """Which parameters the Jacobian runs over.

    ``all`` takes every parameter; ``last_k`` the final k parameter tensors in
    registration order (the usual "unfreeze the top blocks plus head" setup);
    ``patterns`` matches parameter names with fnmatch globs.
    """

    kind: str = "all"
    k: int = 0
    patterns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in _SELECTOR_KINDS:
            raise ConfigError(f"selector kind must be one of {_SELECTOR_KINDS}")
        if self.kind == "last_k" and self.k < 1:
            raise ConfigError("last_k selector needs k >= 1")
        if self.kind == "patterns" and not self.patterns:
            raise ConfigError("patterns selector needs at least one pattern")
        object.__setattr__(self, "patterns", tuple(self.patterns))

    def pick(self, names: list[str]) -> list[str]:
        if self.kind == "all":
            chosen = list(names)
        elif self.kind == "last_k":
            chosen = names[-self.k:]
        else:
            chosen = [n for n in names if any(fnmatch.fnmatch(n, p) for p in self.patterns)]
        if not chosen:
            raise ConfigError(f"selector {self.kind!r} matched no parameters")
        return chosen


@dataclass(frozen=True)
class ExtractionConfig:
    """Everything `extract` needs besides the feature arrays."""

    model: ModelSpec
    logit_indices: tuple[int, ...]
    selector: ParamSelector = field(default_factory=ParamSelector)
    layout: int = 0
    shared_logit: int = 0
    batch_size: int = 32
    precision: str = "float64"

    def __post_init__(self):
        idx = tuple(int(i) for i in self.logit_indices)
        if len(idx) < 2:
            raise ConfigError("logit_indices must select at least 2 class outputs")
        if len(set(idx)) != len(idx):
            raise ConfigError("logit_indices must be distinct")
        object.__setattr__(self, "logit_indices", idx)
        if self.layout not in (0, 1):
            raise ConfigError("layout must be 0 (shared) or 1 (per-class)")
        if not (0 <= self.shared_logit < len(idx)):
            raise ConfigError("shared_logit must index into logit_indices")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    @property
    def n_classes(self) -> int:
        return len(self.logit_indices)

    @classmethod
    def from_dict(cls, data: dict) -> "ExtractionConfig":
        known = {"model", "logit_indices", "selector", "layout", "shared_logit",
                 "batch_size", "precision"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "model" not in data or "logit_indices" not in data:
            raise ConfigError("config needs 'model' and 'logit_indices'")
        model = ModelSpec(**data["model"])
        selector = ParamSelector(**data.get("selector", {}))
        return cls(
            model=model,
            logit_indices=tuple(data["logit_indices"]),
            selector=selector,
            layout=int(data.get("layout", 0)),
            shared_logit=int(data.get("shared_logit", 0)),
            batch_size=int(data.get("batch_size", 32)),
            precision=str(data.get("precision", "float64")),
        )

    @classmethod
    def from_json(cls, path) -> "ExtractionConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
