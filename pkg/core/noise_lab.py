import hashlib
import json
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from core.data_ingest import FeatureTable
from core.errors import ConfigError

NOISE_KINDS = ("gaussian_additive",)


@dataclass(frozen=True)
class NoiseSpec:
    """One corruption event: which feature, how much noise (scaled units), which seed."""
    feature: str
    sigma: float
    seed: int
    kind: str = "gaussian_additive"
    clip: bool = False

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise ConfigError(f"Noise sigma must be >= 0, got {self.sigma}")
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"Unsupported noise kind '{self.kind}'")

    def to_dict(self) -> Dict:
        return {'feature': self.feature, 'sigma': self.sigma, 'seed': self.seed,
                'kind': self.kind, 'clip': self.clip}


def inject_gaussian(table: FeatureTable, spec: NoiseSpec) -> FeatureTable:
    """
    Returns a copy of `table` whose `spec.feature` column has i.i.d.
    Normal(0, sigma^2) noise added. Every other column is untouched.
    """
    position = table.column_index(spec.feature)
    if spec.sigma == 0.0:
        return table
    rng = np.random.default_rng(spec.seed)
    clean = table.values[:, position]
    noisy = clean + rng.normal(0.0, spec.sigma, size=clean.shape[0])
    if spec.clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    return table.with_column(spec.feature, noisy)


def sigma_ladder(min_sigma: float, max_sigma: float) -> List[float]:
    """Doubling sequence min, 2*min, 4*min, ... not exceeding max."""
    if min_sigma <= 0 or max_sigma <= 0:
        raise ConfigError(f"Sigma bounds must be positive, got ({min_sigma}, {max_sigma})")
    if min_sigma > max_sigma:
        raise ConfigError(f"Minimum sigma {min_sigma} exceeds maximum {max_sigma}")
    ladder = []
    sigma = float(min_sigma)
    while sigma <= max_sigma * (1.0 + 1e-12):
        ladder.append(sigma)
        sigma *= 2.0
    return ladder


def derive_seed(master_seed: int, *parts) -> int:
    """
    Seed for one sweep cell: the first 8 bytes of SHA-256 over the JSON list
    [master_seed, *parts]. Floats are rendered with repr so 0.125 and
    0.1250000001 never collide.
    """
    canonical = [master_seed] + [repr(p) if isinstance(p, float) else p for p in parts]
    digest = hashlib.sha256(json.dumps(canonical, separators=(',', ':')).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big')


def noise_spec_for_cell(master_seed: int, feature: str, sigma: float, train_size: Optional[int],
                        replicate: int, clip: bool = False) -> NoiseSpec:
    return NoiseSpec(
        feature=feature,
        sigma=float(sigma),
        seed=derive_seed(master_seed, 'noise', feature, float(sigma), train_size, replicate),
        clip=clip,
    )
