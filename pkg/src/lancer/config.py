"""Run configuration: a flat key=value file with flag overrides.

Every artifact embeds the hash of the identity-relevant fields so that
downstream commands can refuse stale inputs (override with --force).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    # paths
    interactions: str = ""
    catalog: str = ""
    workdir: str = "."
    # backbone
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_context: int = 512
    # prompts
    knowledge_tokens: int = 16  # theta, 0..64
    knowledge_dim: int = 0  # d_e; 0 means d_model
    reasoning_tokens: int = 8  # rho
    memory_rows: int = 32
    history_len: int = 10
    item_max_tokens: int = 32
    # vocabulary
    min_freq: int = 1
    # training
    stage1_epochs: int = 30
    stage1_lr: float = 1e-3
    stage2_epochs: int = 20
    stage2_lr: float = 1e-3
    batch_size: int = 16
    train_pairs: str = "all"  # or "last"
    # decoding / evaluation
    beam_width: int = 0  # 0 means k + 5
    eval_ks: str = "5,10"
    max_gen_steps: int = 34
    decoder: str = "beam"  # beam | greedy | sample (debug decoders)
    # run identity
    seed: int = 1234
    precision: str = "float64"  # float64 (test) or float32 (train)

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 <= self.knowledge_tokens <= 64:
            raise ConfigError("knowledge_tokens must lie in 0..64")
        if self.reasoning_tokens < 1:
            raise ConfigError("reasoning_tokens must be >= 1")
        if self.memory_rows < 1:
            raise ConfigError("memory_rows must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.history_len < 1:
            raise ConfigError("history_len must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.train_pairs not in ("all", "last"):
            raise ConfigError("train_pairs must be 'all' or 'last'")
        if self.decoder not in ("beam", "greedy", "sample"):
            raise ConfigError("decoder must be beam, greedy, or sample")
        if self.stage1_lr < 0 or self.stage2_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        try:
            self.ks()
        except ValueError:
            raise ConfigError(f"eval_ks must be comma-separated integers, got {self.eval_ks!r}")

    def ks(self) -> list[int]:
        return [int(x) for x in self.eval_ks.split(",") if x.strip()]

    # fields that determine artifact identity across the pipeline
    _IDENTITY = (
        "n_layers", "d_model", "n_heads", "d_ff", "max_context",
        "knowledge_tokens", "knowledge_dim", "reasoning_tokens", "memory_rows",
        "history_len", "item_max_tokens", "min_freq", "seed", "precision",
    )

    def config_hash(self) -> str:
        payload = {name: getattr(self, name) for name in self._IDENTITY}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).hexdigest()

    def apply_overrides(self, overrides: dict) -> None:
        typemap = {f.name: f.type for f in fields(self)}
        for key, raw in overrides.items():
            if key not in typemap:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, key)
            try:
                if isinstance(current, bool):
                    value = raw in ("1", "true", "yes")
                elif isinstance(current, int):
                    value = int(raw)
                elif isinstance(current, float):
                    value = float(raw)
                else:
                    value = str(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r}")
            setattr(self, key, value)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in fields(self):
                fh.write(f"{f.name}={getattr(self, f.name)}\n")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        overrides = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, _, value = line.partition("=")
                overrides[key.strip()] = value.strip()
        cfg.apply_overrides(overrides)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)
