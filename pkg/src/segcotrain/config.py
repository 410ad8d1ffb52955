"""Run configuration: every hyper-parameter keyed by its conventional symbol.

Configs are canonical JSON; loading fills defaults and validates, so
load -> print -> load is a fixed point. The shipped defaults follow the
GTAV+Synscapes -> Cityscapes setting; the curriculum fractions of the
co-training loop (ct_p_m / ct_p_M) may differ from the self-training
stage's, as some source datasets require.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from segcotrain.core import CoTrainParams, CurriculumParams, MixParams, SelfTrainParams
from segcotrain.errors import ConfigError
from segcotrain import recordio
from segcotrain.trainer import TrainerConfig, default_passthrough

_W_CODES = {0: "ensemble", 1: "branch1", 2: "branch2"}

ENV_TRAINER = "SEGCOTRAIN_TRAINER"
ENV_RUN_ROOT = "SEGCOTRAIN_RUN_ROOT"


@dataclass
class RunConfig:
    # candidate pool and per-cycle keep count
    N: int = 500
    n: int = 100
    # curriculum / clamp
    delta_p: float = 0.05
    C_m: float = 0.5
    C_M: float = 0.9
    p_m: float = 0.5
    p_M: float = 0.6
    K_m: int = 1
    K_M: int = 10
    # mini-batch mixing
    N_MB: int = 4
    p_MB: float = 0.75
    p_CM: float = 0.5
    # co-training loop
    ct_p_m: float = 0.5
    ct_p_M: float = 0.6
    K: int = 5
    w: int = 1
    lam: float = 0.8
    # run plumbing
    seed: int = 0
    trainer: str = "toy"
    trainer_command: list[str] | None = None
    collab_source: str = "cross"
    class_balance: bool = False
    lab_align: bool = True
    lab_sample_size: int = 500
    cycle_batches: int = 64
    final_batches: int = 128
    source_manifest: str | None = None
    unlabeled_manifest: str | None = None
    eval_manifest: str | None = None
    run_root: str = "runs"
    trainer_passthrough: dict = field(default_factory=default_passthrough)

    # config keys use the paper-style symbol "lambda", which Python reserves
    _KEY_ALIASES = {"lambda": "lam"}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls) if not f.name.startswith("_")}
        kwargs = {}
        for key, value in data.items():
            name = cls._KEY_ALIASES.get(key, key)
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        reverse = {v: k for k, v in self._KEY_ALIASES.items()}
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            out[reverse.get(f.name, f.name)] = getattr(self, f.name)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = recordio.read_record(path)
        except Exception as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(data)

    def dumps(self) -> str:
        return recordio.canonical_dumps(self.to_dict())

    def validate(self) -> None:
        try:
            self.self_train_params()
            self.co_train_params()
            self.trainer_config()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.trainer not in ("toy", "external"):
            raise ConfigError(f"trainer must be toy|external, got {self.trainer!r}")
        if self.collab_source not in ("cross", "listing"):
            raise ConfigError(f"collab_source must be cross|listing, got {self.collab_source!r}")
        if self.trainer == "external" and not (self.trainer_command or os.environ.get(ENV_TRAINER)):
            raise ConfigError("external trainer requires trainer_command or $" + ENV_TRAINER)

    # --- materialized parameter objects ---------------------------------

    def curriculum(self) -> CurriculumParams:
        return CurriculumParams(p_m=self.p_m, p_M=self.p_M, delta_p=self.delta_p,
                                C_m=self.C_m, C_M=self.C_M)

    def ct_curriculum(self) -> CurriculumParams:
        return CurriculumParams(p_m=self.ct_p_m, p_M=self.ct_p_M, delta_p=self.delta_p,
                                C_m=self.C_m, C_M=self.C_M)

    def mix_params(self) -> MixParams:
        return MixParams(p_MB=self.p_MB, p_CM=self.p_CM)

    def self_train_params(self) -> SelfTrainParams:
        return SelfTrainParams(T=self.curriculum(), N=self.N, n=self.n,
                               K_m=self.K_m, K_M=self.K_M, M_df=self.mix_params())

    def co_train_params(self) -> CoTrainParams:
        if self.w not in _W_CODES:
            raise ConfigError(f"w must be one of {sorted(_W_CODES)}, got {self.w}")
        return CoTrainParams(K=self.K, w=_W_CODES[self.w], lam=self.lam)

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            N_MB=self.N_MB,
            seed=self.seed,
            cycle_batches=self.cycle_batches,
            final_batches=self.final_batches,
            passthrough=self.trainer_passthrough,
        )

    def resolved_trainer_command(self) -> list[str] | None:
        env = os.environ.get(ENV_TRAINER)
        if env:
            return env.split()
        return self.trainer_command

    def resolved_run_root(self) -> str:
        return os.environ.get(ENV_RUN_ROOT, self.run_root)
