"""Score filtering and reproducible train/val/test splits."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from flavars.errors import DataError

_MASK64 = (1 << 64) - 1


def filter_top_fraction(records: Sequence, fraction: float) -> list:
    """The ``ceil(fraction * N)`` highest-scoring records; ties by ascending id."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    missing = [r.id for r in records if r.score is None]
    if missing:
        raise DataError(f"records without a score: {missing[:5]}")
    keep = math.ceil(fraction * len(records) - 1e-9)
    ranked = sorted(records, key=lambda r: (-r.score, r.id))
    return ranked[:keep]


class SplitMix64:
    """SplitMix64 generator; fixed arithmetic so shuffles match on every platform."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` by rejection."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n


def fisher_yates(items: list, rng: SplitMix64) -> list:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass
class SplitSpec:
    seed: int
    fractions: tuple[float, float, float]
    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        all_ids = self.train + self.val + self.test
        if len(set(all_ids)) != len(all_ids):
            raise DataError("split lists overlap or contain duplicates")

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "train": self.train,
            "val": self.val,
            "test": self.test,
        }
        return json.dumps(payload, indent=1) + "\n"

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(int(data["seed"]), tuple(data["fractions"]), list(data["train"]), list(data["val"]), list(data["test"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed split file {path}: {exc}") from exc


def generate_splits(ids: Sequence[str], seed: int, fractions: Sequence[float]) -> SplitSpec:
    """Seeded Fisher-Yates shuffle of the sorted ids, cut at floor boundaries.

    Val and test take ``floor(f * N)`` ids each; the remainder goes to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DataError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids passed to generate_splits")
    n = len(ids)
    order = fisher_yates(sorted(ids), SplitMix64(seed))
    # the epsilon absorbs binary representation error, e.g. 0.29 * 100
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    return SplitSpec(seed, fractions, order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
