"""
Planar engagement geometry.

Coordinates are kilometres with x pointing east and y pointing north.
Headings and bearings are degrees clockwise from north in [0, 360).
"""

import math
from dataclasses import dataclass
from typing import Tuple

Point = Tuple[float, float]


class DegenerateGeometryError(ValueError):
    """Raised when a line of sight is undefined (coincident positions)."""


def wrap_angle(raw: float) -> float:
    """Wrap an angle in degrees into [0, 360)."""
    if not math.isfinite(raw):
        raise ValueError(f"angle must be finite, got {raw!r}")
    wrapped = raw % 360.0
    # tiny negative inputs round up to exactly 360.0
    if wrapped >= 360.0:
        wrapped = 0.0
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> Point:
        return (self.x, self.y)


def distance(a: Point, b: Point) -> float:
    return math.hypot(b[0] - a[0], b[1] - a[1])


def bearing(origin: Point, target: Point) -> float:
    """Clockwise-from-north direction of the line of sight origin -> target."""
    dx = target[0] - origin[0]
    dy = target[1] - origin[1]
    if dx == 0.0 and dy == 0.0:
        raise DegenerateGeometryError("line of sight undefined for coincident positions")
    return wrap_angle(math.degrees(math.atan2(dx, dy)))


def angle_off(heading_a: float, heading_b: float) -> float:
    """Unsigned separation of two headings, in [0, 180]."""
    if not (math.isfinite(heading_a) and math.isfinite(heading_b)):
        raise ValueError("headings must be finite")
    diff = abs(heading_a - heading_b) % 360.0
    return 360.0 - diff if diff > 180.0 else diff


def antenna_train_angle(pose: Pose2D, other: Point) -> float:
    """Angle between the nose of ``pose`` and its line of sight to ``other``.

    0 means ``other`` is dead ahead, 180 means it is directly behind.
    """
    return angle_off(pose.heading, bearing(pose.position, other))


def aspect_angle(pose: Pose2D, other: Pose2D) -> float:
    """Aspect of ``pose`` as seen from ``other``'s tail.

    Measured at ``other`` between its tail direction and the line of sight
    back to ``pose``; 0 puts ``pose`` at ``other``'s dead six.
    """
    # tail reference is the nose reference rotated by 180 degrees
    return 180.0 - antenna_train_angle(other, pose.position)


@dataclass(frozen=True)
class EngagementGeometry:
    distance: float
    angle_off: float
    ata: float
    aspect: float


def engagement(own: Pose2D, other: Pose2D) -> EngagementGeometry:
    """All pairwise metrics of ``own`` against ``other`` in one call."""
    return EngagementGeometry(
        distance=distance(own.position, other.position),
        angle_off=angle_off(own.heading, other.heading),
        ata=antenna_train_angle(own, other.position),
        aspect=aspect_angle(own, other),
    )
