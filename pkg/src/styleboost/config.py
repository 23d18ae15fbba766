"""Experiment configuration: one JSON file drives every stage.

Desk-scale defaults run end-to-end on a laptop CPU; the comments note the
full-scale reference values the defaults were scaled down from.
"""

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError


@dataclass
class ExperimentConfig:
    resolution: int = 32
    root_seed: int = 0

    # datasets
    n_source: int = 5000
    n_style: int = 150
    n_test: int = 500

    # diffusion model / schedule (betas are the classic 1e-4..0.02 at 1000
    # steps, rescaled by 1000/n_steps to keep the terminal alpha-bar small)
    n_steps: int = 100
    beta_min: float = 1e-3
    beta_max: float = 0.2
    denoiser_base: int = 16
    cond_dim: int = 16
    emb_dim: int = 32
    diffusion_steps: int = 4000
    diffusion_batch: int = 16
    diffusion_lr: float = 2e-3

    # textual inversion (full scale: 8 tokens, 5000 iterations)
    n_style_tokens: int = 4
    inversion_iters: int = 1500
    inversion_lr: float = 0.5

    # augmentation (full scale: 10000 self at 0.8; 40000 cross over
    # {0.6, 0.7, 0.8, 0.9} conditioned on 10000 source images)
    self_t0s: list = field(default_factory=lambda: [0.8])
    self_n: int = 1000
    cross_t0s: list = field(default_factory=lambda: [0.6, 0.7, 0.8, 0.9])
    cross_n_per_t0: int = 1000
    cross_guides: int = 1000
    k: int | None = None   # augmentation subset size; None = use everything

    # translator (full scale: 9 res blocks, 150000 iterations, batch 4)
    gen_base: int = 16
    n_res_blocks: int = 3
    translator_iters: int = 2000
    translator_batch: int = 4
    translator_lr: float = 2e-4
    lambda_nce: float = 1.0
    nce_tau: float = 0.07
    nce_locations: int = 64

    # metrics
    extractor_base: int = 16
    feature_dim: int = 32
    extractor_steps: int = 400
    ref_n: int = 1000
    ref_seed_base: int = 10_000_000
    oracle_ref_n: int = 300

    def validate(self):
        if self.resolution not in (32, 64):
            raise ConfigError(f"resolution must be 32 or 64, got {self.resolution}")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ConfigError("need 0 < beta_min <= beta_max < 1")
        for name in ("n_source", "n_style", "n_test", "diffusion_steps",
                     "diffusion_batch", "n_style_tokens", "translator_batch",
                     "cross_guides", "ref_n", "oracle_ref_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("inversion_iters", "translator_iters", "extractor_steps",
                     "self_n", "cross_n_per_t0"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("self_t0s", "cross_t0s"):
            for t0 in getattr(self, name):
                if not 0.0 < t0 <= 1.0:
                    raise ConfigError(f"{name} entries must lie in (0, 1]")
        if self.k is not None and self.k < 0:
            raise ConfigError("k must be >= 0 or null")
        if self.cross_guides > self.n_source:
            raise ConfigError("cross_guides cannot exceed n_source")
        if self.nce_tau <= 0:
            raise ConfigError("nce_tau must be positive")
        return self

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()
