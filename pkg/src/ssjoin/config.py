"""Run configuration: flat ``key=value`` files, CLI overrides, derived defaults."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .bucketizer import BUFFER_QUANTUM, default_num_buckets
from .dataset import PAGE_SIZE, DatasetHandle
from .errors import BudgetInfeasible

_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([kmgt]?i?b?|%)?\s*$", re.I)
_UNITS = {"": 1, "b": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}


def parse_size(text, dataset_bytes: int | None = None) -> int:
    """``"123"``, ``"64MiB"``, ``"2G"`` or ``"10%"`` (of ``dataset_bytes``) to bytes."""
    if isinstance(text, (int, float)):
        return int(text)
    m = _SIZE.match(str(text))
    if not m:
        raise ValueError(f"cannot parse size {text!r}")
    value, unit = float(m.group(1)), (m.group(2) or "").lower()
    if unit == "%":
        if dataset_bytes is None:
            raise ValueError("percentage sizes need the dataset size")
        return int(dataset_bytes * value / 100.0)
    return int(value * _UNITS[unit[:1]])


@dataclass
class JoinConfig:
    epsilon: float | None = None
    target_neighbors: float | None = None
    lam: float = 0.9
    memory_budget: str = "10%"
    cache_bytes: str | None = None
    num_buckets: int | None = None
    L: int = 256
    apply_mu: bool = True
    combine: str = "both"
    seed: int = 0
    page_size: int = PAGE_SIZE
    prefetch_depth: int = 2
    graph_degree: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    reorder: bool = True
    evaluate: bool = False

    def validate(self) -> None:
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.epsilon is None and self.target_neighbors is None:
            raise ValueError("set epsilon or target_neighbors")
        if not 0 < self.lam <= 1:
            raise ValueError("lambda must be in (0, 1]")
        if self.page_size != PAGE_SIZE:
            raise ValueError(f"page_size is fixed at {PAGE_SIZE}")
        if self.combine not in ("both", "either"):
            raise ValueError("combine must be 'both' or 'either'")
        if self.L < 1 or self.prefetch_depth < 1:
            raise ValueError("L and prefetch_depth must be >= 1")

    def resolve(self, handle: DatasetHandle) -> dict:
        """Concrete byte sizes and bucket count for ``handle``."""
        budget = parse_size(self.memory_budget, handle.payload_bytes)
        cache = parse_size(self.cache_bytes, handle.payload_bytes) if self.cache_bytes else budget
        M = self.num_buckets or default_num_buckets(handle.count)
        floor = M * (handle.dim * 4 + 8 * self.graph_degree * 3 + 24) + M * BUFFER_QUANTUM + 2 * PAGE_SIZE
        if budget < floor:
            raise BudgetInfeasible(f"memory budget {budget} B below the minimum {floor} B for M={M}")
        return {"memory_budget": budget, "cache_bytes": cache, "num_buckets": M,
                "max_bucket_bytes": max(PAGE_SIZE, cache // 4)}

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "JoinConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        aliases = {"lambda": "lam", "memory_budget_bytes": "memory_budget", "M": "num_buckets"}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            k = aliases.get(k, k)
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = _coerce(types[k], v)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "JoinConfig":
        return cls.loads(Path(path).read_text())

    def override(self, **kw) -> "JoinConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


def _coerce(tp: str, v: str):
    if v == "":
        return None
    t = tp.replace(" ", "")
    if t.startswith("bool"):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    if t.startswith("int"):
        return int(v)
    if t.startswith("float"):
        return float(v)
    return v
