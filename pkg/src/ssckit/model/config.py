from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from ..classes import NUM_CLASSES
from ..geometry import RangeCrop

MODES = ("global", "local", "local+global")


@dataclass(frozen=True)
class ModelConfig:
    crop: RangeCrop = field(default_factory=RangeCrop.benchmark_default)
    n_input: int = 26_624
    ratios: tuple = (4, 4, 2)
    factors: tuple = (16, 16)
    channels: int = 16
    hidden: int = 32  # feed-forward width
    n_classes: int = NUM_CLASSES
    knn: int = 16
    lam: float = 1.0
    enc_blocks: int = 1
    dec_blocks: int = 1
    mode: str = "local+global"
    coarse_loss: bool = False
    n_gt: int = 2048  # ground-truth points kept per training scene
    lr: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if len(self.factors) != 2:
            raise ValueError("expected two upsampling factors (proxy generator, completion head)")
        if any(r < 1 for r in self.ratios) or any(f < 1 for f in self.factors):
            raise ValueError("ratios and factors must be positive")
        if self.n_input % math.prod(self.ratios):
            raise ValueError(
                f"n_input {self.n_input} is not divisible by the downsampling product {math.prod(self.ratios)}"
            )

    @property
    def proxy_count(self) -> int:
        return self.n_input // math.prod(self.ratios)

    @property
    def coarse_count(self) -> int:
        return self.proxy_count * self.factors[0]

    @property
    def output_count(self) -> int:
        return self.coarse_count * self.factors[1]

    def abstraction_counts(self) -> list[int]:
        counts = [self.n_input]
        for r in self.ratios:
            counts.append(counts[-1] // r)
        return counts

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(n_input=1024, ratios=(4, 4, 2), factors=(4, 4), channels=16, hidden=32, n_gt=1024)
        base.update(overrides)
        return cls(**base)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def shape_chain(cfg: ModelConfig) -> list[tuple[str, int]]:
    """Point counts through the network, computed without allocating tensors."""
    counts = cfg.abstraction_counts()
    chain = [("input", counts[0])]
    chain += [(f"set abstraction {i + 1}", c) for i, c in enumerate(counts[1:])]
    chain.append(("coarse proxies", cfg.coarse_count))
    chain.append(("complete points", cfg.output_count))
    return chain
