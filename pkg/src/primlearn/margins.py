"""Safety-margin providers: ellipsoids attached to the robot along each primitive."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

KINDS = ("GlobalSphere", "PerPrimitiveSphere", "TimeVaryingSphere", "LearnedModel")


@dataclass(frozen=True)
class MarginTable:
    """Center offsets and semi-axes of one primitive's margin on a time grid."""

    times: np.ndarray  # (G,)
    center: np.ndarray  # (G, 3)
    semi_axes: np.ndarray  # (G, 3)

    def at(self, tau) -> tuple[np.ndarray, np.ndarray]:
        tau = np.asarray(tau, dtype=float)
        if len(self.times) == 1:
            shape = tau.shape + (3,)
            return (np.broadcast_to(self.center[0], shape).copy(),
                    np.broadcast_to(self.semi_axes[0], shape).copy())
        idx = np.interp(tau, self.times, np.arange(len(self.times), dtype=float))
        lo = np.minimum(np.floor(idx).astype(int), len(self.times) - 2)
        w = (idx - lo)[..., None]
        c = self.center[lo] * (1 - w) + self.center[lo + 1] * w
        s = self.semi_axes[lo] * (1 - w) + self.semi_axes[lo + 1] * w
        return c, s


@dataclass(frozen=True)
class MarginProvider:
    """Maps (primitive id, tau) to an axis-aligned ellipsoid.

    ``default`` covers primitives without a table (e.g. a global margin or no
    margin at all).
    """

    kind: str = "None"
    P: float = 0.99
    tables: Mapping[int, MarginTable] = field(default_factory=dict)
    default: MarginTable | None = None

    def ellipsoid(self, primitive_id: int, tau) -> tuple[np.ndarray, np.ndarray]:
        table = self.tables.get(primitive_id, self.default)
        if table is None:
            raise KeyError(f"no margin for primitive {primitive_id}")
        return table.at(tau)

    def inflated(self, extra) -> "MarginProvider":
        """Same provider with every semi-axis grown by ``extra`` (scalar or 3-vector)."""
        extra = np.asarray(extra, dtype=float)

        def grow(t: MarginTable | None):
            if t is None:
                return None
            return MarginTable(t.times, t.center, t.semi_axes + extra)

        return MarginProvider(self.kind, self.P, {k: grow(v) for k, v in self.tables.items()},
                              grow(self.default))


def constant_margin(semi_axes, center=(0.0, 0.0, 0.0), kind: str = "Constant", P: float = 0.99) -> MarginProvider:
    table = MarginTable(np.zeros(1), np.asarray([center], dtype=float),
                        np.asarray([np.broadcast_to(semi_axes, (3,))], dtype=float))
    return MarginProvider(kind, P, {}, table)


ZERO_MARGIN = constant_margin((0.0, 0.0, 0.0), kind="None")
