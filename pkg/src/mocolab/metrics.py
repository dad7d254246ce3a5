"""Per-step / per-epoch measurement rows shared by all mechanisms."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields


@dataclass(frozen=True)
class MetricsRecord:
    kind: str  # "step", "eval" or "final"
    step: int
    epoch: int
    loss: float | None = None
    pretext_acc: float | None = None
    knn_val_acc: float | None = None
    probe_acc: float | None = None
    param_distance: float | None = None
    key_age: float | None = None
    lr: float | None = None
    wall_ms: float | None = None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self, float_fmt: str = ".17g", include_wall: bool = True) -> list[str]:
        out = []
        for name in self.columns():
            v = getattr(self, name)
            if name == "wall_ms" and not include_wall:
                v = None
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append("nan" if math.isnan(v) else format(v, float_fmt))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "MetricsRecord":
        kw = {}
        for name in cls.columns():
            raw = row.get(name, "")
            if name == "kind":
                kw[name] = raw
            elif name in ("step", "epoch"):
                kw[name] = int(raw)
            else:
                kw[name] = float(raw) if raw != "" else None
        return cls(**kw)
