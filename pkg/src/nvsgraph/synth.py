"""Synthetic labelled event streams from moving bright shapes.

A shape is rasterised on the pixel-centre lattice every ``dt_us``; a pixel that
becomes covered emits an ON event, a pixel that becomes uncovered emits an OFF
event. Leading edges therefore produce ON events and trailing edges OFF events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from .event_io import EventStream

SHAPES = ("bar", "l", "square")


@dataclass
class ShapeClass:
    shape: str = "bar"
    length: float = 16.0  # bar/L arm length, square side
    thickness: float = 3.0  # bar/L arm thickness
    speed: float = 0.0  # px/s drift speed
    direction: float | str = 0.0  # degrees (0 = +x, 90 = +y) or "random"
    angle: float | str = 0.0  # initial orientation in degrees or "random"
    angular_speed: float = 0.0  # deg/s
    growth: float = 0.0  # px/s added to the size (length and thickness scale together)
    jitter_radius: float = 0.0  # px, circular wobble superposed on the drift
    jitter_hz: float = 0.0
    name: str = ""

    def __post_init__(self) -> None:
        self.shape = self.shape.lower()
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")


@dataclass
class SynthSpec:
    classes: list[ShapeClass]
    width: int = 64
    height: int = 64
    duration_us: int = 100_000
    dt_us: int = 100
    streams_per_class: int = 10
    val_per_class: int = 0
    emit_prob: float = 1.0  # probability that a pixel crossing fires
    noise_rate: float = 0.0  # background events per pixel per second

    def __post_init__(self) -> None:
        self.classes = [c if isinstance(c, ShapeClass) else ShapeClass(**c) for c in self.classes]
        if len(self.classes) < 2:
            raise ValueError("a synthetic dataset needs at least 2 classes")
        if not 0.0 < self.emit_prob <= 1.0:
            raise ValueError("emit_prob must lie in (0, 1]")
        if self.dt_us <= 0 or self.duration_us <= 0:
            raise ValueError("duration_us and dt_us must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["classes"] = [ShapeClass(**c) for c in d.get("classes", [])]
        return cls(**d)

    @property
    def total_per_class(self) -> int:
        return self.streams_per_class + self.val_per_class


def load_synth_spec(path) -> SynthSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return SynthSpec.from_dict(yaml.safe_load(fh))


@dataclass
class _Pose:
    mid: np.ndarray
    velocity: np.ndarray
    angle0: float
    phase: float
    duration_s: float


def _rects(cls: ShapeClass, size_gain: float) -> list[tuple[float, float, float, float]]:
    """Axis-aligned rectangles (x0, x1, y0, y1) in the shape's local frame."""
    s = size_gain
    L = cls.length * s
    th = cls.thickness * s
    if cls.shape == "bar":
        return [(-th / 2, th / 2, -L / 2, L / 2)]
    if cls.shape == "square":
        return [(-L / 2, L / 2, -L / 2, L / 2)]
    return [(-L / 2, -L / 2 + th, -L / 2, L / 2), (-L / 2, L / 2, L / 2 - th, L / 2)]


def _radius(cls: ShapeClass, size_gain: float) -> float:
    r = 0.0
    for x0, x1, y0, y1 in _rects(cls, size_gain):
        for x in (x0, x1):
            for y in (y0, y1):
                r = max(r, math.hypot(x, y))
    return r


def _size_gain(cls: ShapeClass, t_s: float) -> float:
    if cls.growth == 0.0:
        return 1.0
    return 1.0 + cls.growth * t_s / cls.length


def _place(cls: ShapeClass, spec: SynthSpec, rng: np.random.Generator) -> _Pose:
    T = spec.duration_us * 1e-6
    direction = rng.uniform(0.0, 360.0) if cls.direction == "random" else float(cls.direction)
    angle0 = rng.uniform(0.0, 360.0) if cls.angle == "random" else float(cls.angle)
    phase = rng.uniform(0.0, 2 * math.pi)
    u = np.array([math.cos(math.radians(direction)), math.sin(math.radians(direction))])
    u[np.abs(u) < 1e-12] = 0.0
    perp = np.array([-u[1], u[0]])
    D = cls.speed * T
    rho = max(_radius(cls, _size_gain(cls, 0.0)), _radius(cls, _size_gain(cls, T))) + cls.jitter_radius
    # midpoint box shrunk so that drift plus a perpendicular offset of up to D/2 stays on the sensor
    shrink = rho + 0.5 * D * (abs(u[0]) + abs(u[1]))
    lo = np.array([shrink, shrink])
    hi = np.array([spec.width - 1 - shrink, spec.height - 1 - shrink])
    if np.any(hi < lo):
        raise ValueError(f"shape {cls.name or cls.shape!r} does not fit a {spec.width}x{spec.height} sensor")
    mid = rng.uniform(lo, hi) + rng.uniform(-D / 2, D / 2) * perp if D > 0 else rng.uniform(lo, hi)
    return _Pose(mid=mid, velocity=cls.speed * u, angle0=angle0, phase=phase, duration_s=T)


def _mask(cls: ShapeClass, pose: _Pose, t_s: float, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    c = pose.mid + pose.velocity * (t_s - pose.duration_s / 2)
    if cls.jitter_radius > 0:
        w = 2 * math.pi * cls.jitter_hz * t_s + pose.phase
        c = c + cls.jitter_radius * np.array([math.cos(w), math.sin(w)])
    th = math.radians(pose.angle0 + cls.angular_speed * t_s)
    ct, st = math.cos(th), math.sin(th)
    dx = gx - c[0]
    dy = gy - c[1]
    lx = ct * dx + st * dy
    ly = -st * dx + ct * dy
    inside = np.zeros(gx.shape, dtype=bool)
    for x0, x1, y0, y1 in _rects(cls, _size_gain(cls, t_s)):
        inside |= (lx >= x0) & (lx < x1) & (ly >= y0) & (ly < y1)
    return inside


def render_stream(cls: ShapeClass, spec: SynthSpec, rng: np.random.Generator,
                  label: int | None = None) -> EventStream:
    pose = _place(cls, spec, rng)
    gy, gx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    steps = spec.duration_us // spec.dt_us
    xs, ys, ts, ps = [], [], [], []
    prev = _mask(cls, pose, 0.0, gx, gy)
    for k in range(1, steps):
        t_us = k * spec.dt_us
        cur = _mask(cls, pose, t_us * 1e-6, gx, gy)
        changed = cur != prev
        if changed.any():
            yy, xx = np.nonzero(changed)
            xs.append(xx)
            ys.append(yy)
            ts.append(np.full(len(xx), t_us, dtype=np.int64))
            ps.append(np.where(cur[yy, xx], 1, -1))
        prev = cur
    if xs:
        x, y, t, p = (np.concatenate(a) for a in (xs, ys, ts, ps))
    else:
        x = y = t = p = np.zeros(0, dtype=np.int64)
    if spec.emit_prob < 1.0 and len(x):
        keep = rng.random(len(x)) < spec.emit_prob
        x, y, t, p = x[keep], y[keep], t[keep], p[keep]
    if spec.noise_rate > 0:
        n = rng.poisson(spec.noise_rate * spec.width * spec.height * spec.duration_us * 1e-6)
        x = np.concatenate([x, rng.integers(0, spec.width, n)])
        y = np.concatenate([y, rng.integers(0, spec.height, n)])
        t = np.concatenate([t, rng.integers(0, spec.duration_us, n)])
        p = np.concatenate([p, rng.choice([-1, 1], n)])
    order = np.lexsort((x, y, t))
    return EventStream(x[order], y[order], t[order], p[order], spec.width, spec.height, label)


def synth_dataset(spec: SynthSpec, seed: int) -> list[EventStream]:
    """All streams, class-major; within a class training streams come before validation ones."""
    out = []
    for ci, cls in enumerate(spec.classes):
        for i in range(spec.total_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, ci, i]))
            out.append(render_stream(cls, spec, rng, label=ci))
    return out


def split_names(spec: SynthSpec) -> list[str]:
    names = ["train"] * spec.streams_per_class + ["val"] * spec.val_per_class
    return names * len(spec.classes)
