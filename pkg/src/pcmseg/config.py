"""Run configuration: one flat, typed record that round-trips through JSON."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

# Keys that locate files rather than define the computation; left out of the hash.
PATH_KEYS = ("points", "windows", "output_dir", "cache_dir", "grid_stats", "features", "basis",
             "chain", "config")


@dataclass
class RunConfig:
    # inputs and outputs
    points: str | None = None
    windows: str | None = None
    grid_stats: str | None = None
    features: str | None = None
    basis: str | None = None
    chain: str | None = None
    output_dir: str = "."
    cache_dir: str | None = None
    # first stage
    rows: int | None = None
    cols: int | None = None
    target_mean_count: float = 20.0
    n_r: int = 512
    n_types: int | None = None
    variance_threshold: float = 0.8
    # model and sampler
    n_clusters: int = 3
    m_min: int = 2
    m_max: int = 10
    iterations: int = 30000
    burn_in: int = 10000
    thin: int = 10
    alpha_step: float = 0.25
    psi_step: float = 0.1
    group_mode: bool = False
    fix_psi: float | None = None
    chains: int = 1
    normalizer: str = "surrogate"
    # surrogate
    surrogate_seed: int = 0
    surrogate_sims: int = 200
    surrogate_psi_nodes: int = 17
    surrogate_burn_in: int = 50
    # summaries
    distances: list = field(default_factory=list)
    # simulation study
    psi: float = 1.29
    n_subjects: int = 50
    regime: str = "high"
    label_sweeps: int = 100
    method: str = "FPCA-G"
    methods: list = field(default_factory=lambda: ["PCM", "nonspatial-PCM", "FPCA-G",
                                                   "FPCA-S", "Curve-G", "Curve-S"])
    replications: int = 10
    study_clusters: list = field(default_factory=lambda: [3])
    study_psi: list = field(default_factory=lambda: [0.0, 1.29])
    study_regimes: list = field(default_factory=lambda: ["high"])
    # global
    seed: int = 0
    threads: int = 1

    @classmethod
    def keys(cls) -> set:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - cls.keys()
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def merged(self, overrides: dict) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **overrides})

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of the computation-defining keys."""
        d = {k: v for k, v in self.to_dict().items() if k not in PATH_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()
