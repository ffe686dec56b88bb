"""Run configuration: TOML file + flag overrides, and provenance manifests."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .gateway import DEFAULT_MAX_DOC_CHARS, EndpointConfig, HttpModel, Model, ModelGateway, ScriptedModel
from .retriever import BM25Params
from .search import SearchBudget

ROLES = ("decomposer", "target")


@dataclass
class ModelConfig:
    scripted: str | None = None
    base_url: str | None = None
    model: str | None = None
    # name of the environment variable holding the token; tokens never live in config
    api_key_env: str | None = None
    timeout: float = 60.0
    retries: int = 3

    def __post_init__(self) -> None:
        if (self.scripted is None) == (self.base_url is None):
            raise ValueError("a model role needs exactly one of 'scripted' or 'base_url'")
        if self.base_url is not None and not self.model:
            raise ValueError("an endpoint model role needs 'model'")


@dataclass
class RunConfig:
    corpus: str | None = None
    index: str | None = None
    dataset: str | None = None
    output: str = "out"
    models: dict[str, ModelConfig] = field(default_factory=dict)
    max_depth: int = 8
    max_expansions: int = 64
    max_model_calls: int = 256
    k: int = 3
    max_doc_chars: int = DEFAULT_MAX_DOC_CHARS
    k1: float = 1.2
    b: float = 0.75
    remove_stopwords: bool = False
    concurrency: int = 8
    max_calls: int | None = None
    generation_seed: int = 0
    sample_seed: int = 0

    @property
    def budget(self) -> SearchBudget:
        return SearchBudget(self.max_depth, self.max_expansions, self.max_model_calls)

    @property
    def bm25(self) -> BM25Params:
        return BM25Params(self.k1, self.b, self.remove_stopwords)

    @property
    def seeds(self) -> dict[str, int]:
        return {"generation": self.generation_seed, "sample": self.sample_seed}

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        """Hash of everything that affects outputs (the output directory excluded)."""
        data = self.to_json()
        data.pop("output")
        blob = json.dumps(data, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def gateway(self) -> ModelGateway:
        loaded: dict[str, Model] = {}
        roles: dict[str, Model] = {}
        for role in ROLES:
            mc = self.models.get(role)
            if mc is None:
                raise ValueError(f"no model configured for role {role!r}")
            if mc.scripted is not None:
                if mc.scripted not in loaded:
                    loaded[mc.scripted] = ScriptedModel.load(mc.scripted)
                roles[role] = loaded[mc.scripted]
            else:
                endpoint = EndpointConfig(mc.base_url, mc.model, mc.api_key_env, mc.timeout, mc.retries)
                roles[role] = HttpModel(endpoint)
        return ModelGateway(roles, max_calls=self.max_calls, concurrency=self.concurrency)


# TOML section/key -> RunConfig field
_KEYS = {
    ("paths", "corpus"): "corpus",
    ("paths", "index"): "index",
    ("paths", "dataset"): "dataset",
    ("paths", "output"): "output",
    ("search", "max_depth"): "max_depth",
    ("search", "max_expansions"): "max_expansions",
    ("search", "max_model_calls"): "max_model_calls",
    ("search", "k"): "k",
    ("search", "max_doc_chars"): "max_doc_chars",
    ("bm25", "k1"): "k1",
    ("bm25", "b"): "b",
    ("bm25", "remove_stopwords"): "remove_stopwords",
    ("gateway", "concurrency"): "concurrency",
    ("gateway", "max_calls"): "max_calls",
    ("seeds", "generation"): "generation_seed",
    ("seeds", "sample"): "sample_seed",
}
_PATH_FIELDS = {"corpus", "index", "dataset", "output"}


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file, then non-None ``overrides``.

    Relative paths in the file are resolved against the file's directory.
    """
    values: dict[str, Any] = {}
    models: dict[str, ModelConfig] = {}
    if path is not None:
        path = Path(path)
        base = path.parent
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        known_sections = {s for s, _ in _KEYS} | {"models"}
        unknown = set(raw) - known_sections
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        for (section, key), name in _KEYS.items():
            if key in raw.get(section, {}):
                v = raw[section][key]
                values[name] = str(base / v) if name in _PATH_FIELDS else v
        for role, spec in raw.get("models", {}).items():
            spec = dict(spec)
            if "scripted" in spec:
                spec["scripted"] = str(base / spec["scripted"])
            models[role] = ModelConfig(**spec)
    for name, v in (overrides or {}).items():
        if v is None:
            continue
        if name == "scripted":
            models = {role: ModelConfig(scripted=str(v)) for role in ROLES}
        elif name in {f.name for f in fields(RunConfig)}:
            values[name] = v
        else:
            raise ValueError(f"unknown override {name!r}")
    return RunConfig(models=models, **values)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: str | Path, command: str, config: RunConfig, outputs: list[Path], **extra: Any) -> dict[str, Any]:
    """Provenance record next to an output. Contains no timestamps, so equal
    manifests mean equal inputs and, for scripted backends, equal outputs."""
    manifest = {
        "command": command,
        "config_hash": config.hash(),
        "seeds": config.seeds,
        "model_roles": {r: asdict(m) for r, m in sorted(config.models.items())},
        "outputs": {Path(p).name: file_sha256(p) for p in outputs},
        **extra,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
