"""Pipeline configuration and the flat ``key = value`` config file format.

Lines look like ``pretrain_lr = 5e-4``; ``#`` starts a comment. Relative
paths resolve against ``data_dir``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import DataError
from .llm import COST_UNITS, EmbeddingEndpointConfig, LlmEndpointConfig
from .reasoner import TrainConfig
from .router import RouterConfig


@dataclass
class PipelineConfig:
    data_dir: str = "."
    queries: str = "queries.jsonl"
    corpus: str = "corpus.jsonl"
    qrels: str = "qrels.txt"
    pairs: str = "pairs.jsonl"
    out_dir: str = "out"
    cache_dir: str = "cache"
    rewrites: str = ""

    seed: int = 0
    k: int = 10
    train_fraction: float = 0.7

    pretrain_lr: float = 5e-4
    pretrain_epochs: int = 50
    pretrain_batch_size: int = 64
    finetune_lr: float = 1e-5
    finetune_epochs: int = 3
    finetune_batch_size: int = 16
    optimizer: str = "adam"
    normalize_inputs: bool = False
    normalize_targets: bool = False
    output_tanh: bool = False

    tau: str = "0.7"
    similarity: str = "cosine"
    epsilon: float = 0.0
    cost_unit: str = "completion_tokens"

    llm_base_url: str = ""
    llm_model: str = ""
    llm_api_key_env: str = "OPENAI_API_KEY"
    llm_timeout: float = 60.0
    llm_max_retries: int = 3
    llm_temperature: float = 0.0
    embed_base_url: str = ""
    embed_model: str = ""
    embed_store: str = ""
    max_in_flight: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise DataError("k must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train_fraction must lie strictly between 0 and 1")
        if self.cost_unit not in COST_UNITS:
            raise DataError(f"cost_unit must be one of {COST_UNITS}")
        self.router_config()  # validates tau / similarity

    def path(self, name: str) -> Path:
        """Resolve a path-valued field against ``data_dir``."""
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.data_dir) / p

    def out(self, filename: str) -> Path:
        d = self.path("out_dir")
        d.mkdir(parents=True, exist_ok=True)
        return d / filename

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig.pretrain(
            learning_rate=self.pretrain_lr, epochs=self.pretrain_epochs,
            batch_size=self.pretrain_batch_size, seed=self.seed, optimizer=self.optimizer,
            normalize_inputs=self.normalize_inputs, normalize_targets=self.normalize_targets,
        )

    def finetune_config(self) -> TrainConfig:
        return TrainConfig.finetune(
            learning_rate=self.finetune_lr, epochs=self.finetune_epochs,
            batch_size=self.finetune_batch_size, seed=self.seed + 1, optimizer=self.optimizer,
            normalize_inputs=self.normalize_inputs, normalize_targets=self.normalize_targets,
        )

    def router_config(self, tau: str | float | None = None) -> RouterConfig:
        return RouterConfig.parse(self.tau if tau is None else tau, self.similarity)

    def llm_config(self) -> LlmEndpointConfig | None:
        if not self.llm_base_url:
            return None
        return LlmEndpointConfig(
            self.llm_base_url, self.llm_model or "default", self.llm_api_key_env,
            self.llm_timeout, self.llm_max_retries, self.llm_temperature,
        )

    def embed_config(self, dim: int | None = None) -> EmbeddingEndpointConfig | None:
        if not (self.embed_base_url or self.embed_store):
            return None
        store = str(self.path("embed_store")) if self.embed_store else None
        return EmbeddingEndpointConfig(
            self.embed_model or "default", self.embed_base_url or None, dim, store,
            self.llm_api_key_env, self.llm_timeout, self.llm_max_retries,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise DataError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{line_no}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise DataError(f"{source}:{line_no}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError:
            raise DataError(f"{source}:{line_no}: bad value for {key}: {raw!r}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """File values first, then ``overrides`` (command-line flags) on top."""
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return PipelineConfig(**values)


def render_config(cfg: PipelineConfig) -> str:
    lines = ["# pipeline configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
