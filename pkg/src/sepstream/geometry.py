"""Separatrix model, poloidal-angle conventions and region binning.

The separatrix is modelled as a circle around the magnetic axis with a
single X-point marked at a configurable poloidal angle. Angles are measured
either from the outboard horizontal (``"horizontal"``) or from the X-point
(``"xpoint"``). The full curve is cut into 4 quadrants of 8 segments each.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

TWO_PI = 2.0 * math.pi
N_QUADRANTS = 4
SEGMENTS_PER_QUADRANT = 8
N_SEGMENTS = N_QUADRANTS * SEGMENTS_PER_QUADRANT
SEGMENT_WIDTH = TWO_PI / N_SEGMENTS
# explicit edges keep binning and reported bounds consistent to the last ulp
SEGMENT_EDGES = np.array([k * TWO_PI / N_SEGMENTS for k in range(N_SEGMENTS + 1)])

Origin = Literal["horizontal", "xpoint"]
ORIGINS = ("horizontal", "xpoint")


def wrap_angle(angle):
    """Map an angle (scalar or array) into [0, 2pi)."""
    wrapped = np.mod(angle, TWO_PI)
    # np.mod can round a tiny negative input up to exactly 2pi
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class SeparatrixModel:
    """Circular separatrix of radius ``radius`` (m) about ``center`` = (R, Z)."""

    center: tuple[float, float] = (1.7, 0.0)
    radius: float = 0.6
    xpoint_angle: float = 1.5 * math.pi

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"separatrix radius must be positive, got {self.radius}")
        if not 0.0 <= self.xpoint_angle < TWO_PI:
            raise ValueError(f"xpoint_angle must lie in [0, 2pi), got {self.xpoint_angle}")

    def radius_at(self, angle: float) -> float:
        return self.radius

    def position(self, angle: float) -> tuple[float, float]:
        """(R, Z) of the curve at a horizontal-convention poloidal angle."""
        rho = self.radius_at(angle)
        return (self.center[0] + rho * math.cos(angle), self.center[1] + rho * math.sin(angle))

    @property
    def xpoint(self) -> tuple[float, float]:
        return self.position(self.xpoint_angle)


def _check_origin(origin: str) -> None:
    if origin not in ORIGINS:
        raise ValueError(f"unknown angle origin {origin!r}; expected one of {ORIGINS}")


def convert_origin(angle, model: SeparatrixModel, origin: Origin = "horizontal"):
    """Re-express a horizontal-convention angle under ``origin``."""
    _check_origin(origin)
    if origin == "horizontal":
        return wrap_angle(angle)
    return wrap_angle(np.asarray(angle, dtype=float) - model.xpoint_angle)


def poloidal_angle(position: tuple[float, float], model: SeparatrixModel,
                   origin: Origin = "horizontal") -> float:
    """Poloidal angle of an (R, Z) point about the separatrix centre.

    Raises
    ------
    ValueError
        If ``position`` coincides with the centre, where the angle is undefined.
    """
    dr = position[0] - model.center[0]
    dz = position[1] - model.center[1]
    if dr == 0.0 and dz == 0.0:
        raise ValueError("poloidal angle is undefined at the separatrix centre")
    return convert_origin(math.atan2(dz, dr), model, origin)


def segment_index(angle):
    """Global segment index 0..31 for angle(s) in [0, 2pi).

    Bins are half-open ``[lo, hi)`` except the last, which also takes 2pi.
    """
    g = np.searchsorted(SEGMENT_EDGES, np.asarray(angle, dtype=float), side="right") - 1
    g = np.clip(g, 0, N_SEGMENTS - 1).astype(np.int64)
    if g.ndim == 0:
        return int(g)
    return g


def region_of(angle: float) -> tuple[int, int]:
    """(quadrant, segment) of an angle in [0, 2pi)."""
    g = segment_index(angle)
    return g // SEGMENTS_PER_QUADRANT, g % SEGMENTS_PER_QUADRANT


def segment_bounds(quadrant: int, segment: int) -> tuple[float, float]:
    g = quadrant * SEGMENTS_PER_QUADRANT + segment
    return float(SEGMENT_EDGES[g]), float(SEGMENT_EDGES[g + 1])


@dataclass(frozen=True)
class RegionSpec:
    """A region along the separatrix.

    Either one of the 32 quadrant segments, or an inclusive poloidal-angle
    range that wraps through 0 when ``angle_lo > angle_hi``.
    """

    kind: Literal["quadrant-segment", "angle-range"]
    quadrant: int | None = None
    segment: int | None = None
    angle_lo: float | None = None
    angle_hi: float | None = None
    origin: Origin = "horizontal"

    def __post_init__(self):
        _check_origin(self.origin)
        if self.kind == "quadrant-segment":
            if self.quadrant not in range(N_QUADRANTS):
                raise ValueError(f"quadrant must be in 0..3, got {self.quadrant}")
            if self.segment not in range(SEGMENTS_PER_QUADRANT):
                raise ValueError(f"segment must be in 0..7, got {self.segment}")
        elif self.kind == "angle-range":
            for name in ("angle_lo", "angle_hi"):
                value = getattr(self, name)
                if value is None or not 0.0 <= value < TWO_PI:
                    raise ValueError(f"{name} must lie in [0, 2pi), got {value}")
            if self.angle_lo == self.angle_hi:
                raise ValueError("angle range must have angle_lo != angle_hi")
        else:
            raise ValueError(f"unknown region kind {self.kind!r}")

    @classmethod
    def seg(cls, quadrant: int, segment: int, origin: Origin = "horizontal") -> RegionSpec:
        return cls("quadrant-segment", quadrant=quadrant, segment=segment, origin=origin)

    @classmethod
    def angles(cls, lo: float, hi: float, origin: Origin = "horizontal") -> RegionSpec:
        return cls("angle-range", angle_lo=lo, angle_hi=hi, origin=origin)

    @property
    def bounds(self) -> tuple[float, float]:
        if self.kind == "quadrant-segment":
            return segment_bounds(self.quadrant, self.segment)
        return self.angle_lo, self.angle_hi

    @property
    def label(self) -> str:
        if self.kind == "quadrant-segment":
            return f"q{self.quadrant}s{self.segment}"
        return f"angles[{self.angle_lo:.6g},{self.angle_hi:.6g}]"

    def contains(self, angle):
        """Membership of angle(s) already expressed under ``self.origin``."""
        angle = np.asarray(angle, dtype=float)
        if self.kind == "quadrant-segment":
            g = self.quadrant * SEGMENTS_PER_QUADRANT + self.segment
            return segment_index(angle) == g
        return in_angle_range(angle, self)


def quadrant_regions(quadrant: int, origin: Origin = "horizontal") -> list[RegionSpec]:
    return [RegionSpec.seg(quadrant, s, origin) for s in range(SEGMENTS_PER_QUADRANT)]


def all_segments(origin: Origin = "horizontal") -> list[RegionSpec]:
    return [RegionSpec.seg(q, s, origin) for q in range(N_QUADRANTS)
            for s in range(SEGMENTS_PER_QUADRANT)]


def in_angle_range(angle, spec: RegionSpec):
    """Inclusive membership in ``[angle_lo, angle_hi]`` with wraparound."""
    if spec.kind != "angle-range":
        raise ValueError("in_angle_range needs an angle-range RegionSpec")
    a = np.asarray(angle, dtype=float)
    lo, hi = spec.angle_lo, spec.angle_hi
    if lo < hi:
        inside = (a >= lo) & (a <= hi)
    else:
        inside = (a >= lo) | (a <= hi)
    if inside.ndim == 0:
        return bool(inside)
    return inside


def region_mask(theta, spec: RegionSpec, model: SeparatrixModel):
    """Membership of horizontal-convention angles ``theta`` in ``spec``."""
    return spec.contains(convert_origin(theta, model, spec.origin))


def separatrix_distance(record, model: SeparatrixModel | None = None) -> float:
    """Distance-from-separatrix proxy ``|psi - 1|``.

    ``record`` is anything with a ``psi`` attribute (normalized flux, 1 on the
    separatrix). The model is accepted for interface symmetry; on the circular
    model ``|psi - 1|`` is proportional to the geometric distance.
    """
    return abs(float(record.psi) - 1.0)


def is_selected(distance, threshold: float):
    return np.asarray(distance) <= threshold
