"""Deterministic synthetic scenes: colored shapes on a gray background.

A scene holds static shapes (rectangles, disks, triangles) and up to
three "mover" rectangles that oscillate one pixel at a time, so
consecutive frames are correlated like video.  Placement keeps movers'
full sweep ranges disjoint from everything else, which pins down the
frame-to-frame label overlap: static classes are untouched by motion
(overlap 1), each mover slides along its long side (overlap
(w-1)/(w+1) >= 0.9 for w >= 20), and the background only trades thin
strips with movers.  Statics may touch each other but never overlap.

Every function is a pure function of (spec, frame index); rerunning
with the same seed is bitwise identical.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import PURPOSE_SCENE, stream

# one full oscillation of a mover: 1 px per own move, amplitude 3
TRI12 = (0, 1, 2, 3, 2, 1, 0, -1, -2, -3, -2, -1)
MOVER_AMP = 3
MAX_MOVERS = 3
BUILD_ATTEMPTS = 60


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    num_classes: int = 14
    num_shapes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ConfigError(f"scene of {self.width}x{self.height} is too small")
        if not 2 <= self.num_classes <= 256:
            raise ConfigError(f"class count {self.num_classes} outside [2, 256]")
        if self.num_shapes < 0 or self.num_shapes >= self.num_classes:
            raise ConfigError(f"{self.num_shapes} shapes need {self.num_shapes + 1} classes "
                              f"(one per shape plus background), have {self.num_classes}")


@dataclass(frozen=True)
class Rect:
    x0: int
    y0: int
    w: int
    h: int
    cls: int


@dataclass(frozen=True)
class Disk:
    cx: int
    cy: int
    r: int
    cls: int


@dataclass(frozen=True)
class Tri:
    # right triangle with legs w (along x) and h (along y) from the corner (x0, y0)
    x0: int
    y0: int
    w: int
    h: int
    cls: int


@dataclass(frozen=True)
class Mover:
    x0: int
    y0: int
    w: int
    h: int
    axis: str  # "h": oscillates along x; "v": along y
    cls: int

    @property
    def long_side(self) -> int:
        return self.w if self.axis == "h" else self.h

    def swept_box(self) -> tuple:
        """Bounding box (x0, y0, x1, y1), exclusive ends, over all offsets."""
        if self.axis == "h":
            return (self.x0 - MOVER_AMP, self.y0, self.x0 + self.w + MOVER_AMP, self.y0 + self.h)
        return (self.x0, self.y0 - MOVER_AMP, self.x0 + self.w, self.y0 + self.h + MOVER_AMP)


@dataclass
class Scene:
    spec: SceneSpec
    statics: list = field(default_factory=list)
    movers: list = field(default_factory=list)


def palette(num_classes: int) -> np.ndarray:
    """Class id -> RGB in [0,1]; background gray, others evenly spread hues."""
    pal = np.zeros((num_classes, 3), dtype=np.float32)
    pal[0] = (0.42, 0.42, 0.42)
    for c in range(1, num_classes):
        h = (c - 1) / max(1, num_classes - 1)
        pal[c] = colorsys.hsv_to_rgb(h, 0.8, 0.85)
    return pal


def _boxes_overlap(a: tuple, b: tuple) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


def _shape_box(s) -> tuple:
    if isinstance(s, Rect) or isinstance(s, Tri):
        return (s.x0, s.y0, s.x0 + s.w, s.y0 + s.h)
    if isinstance(s, Disk):
        return (s.cx - s.r, s.cy - s.r, s.cx + s.r + 1, s.cy + s.r + 1)
    raise ConfigError(f"unknown shape {type(s).__name__}")


def _expand(box: tuple, by: int = 1) -> tuple:
    return (box[0] - by, box[1] - by, box[2] + by, box[3] + by)


# Shape corners and sizes snap to the 4-pixel grid (GRID below).  A coarse
# segmentation head that predicts one label per 4x4 block can then represent
# static rectangle boundaries exactly, so label noise concentrates on curved
# edges and on movers caught mid-slide.  Candidate sizes are listed largest
# first; later rounds shrink so shapes still land once the frame is crowded.
# The mover's long side never drops below 20, which keeps its frame-to-frame
# overlap at (w-1)/(w+1) >= 0.9.
GRID = 4
_MOVER_LONG_ROUNDS = ((24, 20), (20,))
_MOVER_SHORT = 12
_STATIC_ROUNDS = {
    "rect": ((24, 20, 16), (16, 12), (12, 8)),
    "disk": ((14, 10), (10,), (6,)),        # radius 2 mod 4: cardinal edges on grid
    "tri": ((24, 20), (20, 16), (16, 12)),  # legs; right angle sits on the grid
}
# statics go most-constrained-first: disks need the biggest clear patch,
# rectangles shrink gracefully and mop up leftover space
_KIND_ORDER = ("disk", "tri", "disk", "tri", "rect", "rect", "rect")
_TRIES_PER_ROUND = 80


def _aligned(rng, lo: int, hi: int) -> int:
    """Uniform multiple of GRID in [lo, hi]; lo/hi need not be aligned."""
    a = -(-lo // GRID)
    b = hi // GRID
    if b < a:
        return -1
    return GRID * int(rng.integers(a, b + 1))


def _place(rng, reserved: list, candidates):
    """Try candidate shapes until one lands clear of everything reserved.

    Each candidate supplies its own reservation box: movers reserve their
    swept range expanded by one pixel (nothing may touch a sweep), statics
    reserve their tight box (statics may touch each other).
    """
    for make in candidates:
        for _ in range(_TRIES_PER_ROUND):
            item = make()
            if item is None:
                continue
            shape, box = item
            if not any(_boxes_overlap(box, r) for r in reserved):
                reserved.append(box)
                return shape
    return None


def _try_build(spec: SceneSpec, rng) -> Scene | None:
    w_lim, h_lim = spec.width, spec.height
    n_movers = max(0, min(MAX_MOVERS, spec.num_shapes - 6))
    n_statics = spec.num_shapes - n_movers
    classes = rng.choice(np.arange(1, spec.num_classes), size=spec.num_shapes, replace=False)

    reserved: list[tuple] = []
    movers: list[Mover] = []
    for k in range(n_movers):
        axis = "h" if k % 2 == 0 else "v"

        def mover_candidate(longs, axis=axis, cls=int(classes[n_statics + k])):
            def make():
                long = int(longs[rng.integers(len(longs))])
                mw, mh = (long, _MOVER_SHORT) if axis == "h" else (_MOVER_SHORT, long)
                # sweep must stay a pixel clear of the frame edge
                x_lo = 1 + MOVER_AMP if axis == "h" else 1
                x_hi = (w_lim - 1 - MOVER_AMP - mw) if axis == "h" else w_lim - 1 - mw
                y_lo = 1 + MOVER_AMP if axis == "v" else 1
                y_hi = (h_lim - 1 - MOVER_AMP - mh) if axis == "v" else h_lim - 1 - mh
                x0 = _aligned(rng, x_lo, x_hi)
                y0 = _aligned(rng, y_lo, y_hi)
                if x0 < 0 or y0 < 0:
                    return None
                m = Mover(x0, y0, mw, mh, axis, cls)
                return m, _expand(m.swept_box())
            return make

        m = _place(rng, reserved, [mover_candidate(r) for r in _MOVER_LONG_ROUNDS])
        if m is None:
            return None
        movers.append(m)

    statics: list = []
    for i in range(n_statics):
        kind = _KIND_ORDER[i % len(_KIND_ORDER)]

        def static_candidate(sizes, kind=kind, cls=int(classes[i])):
            def make():
                d = int(sizes[rng.integers(len(sizes))])
                if kind == "disk":
                    cx = _aligned(rng, d - 1, w_lim - 3 - d) + 2
                    cy = _aligned(rng, d - 1, h_lim - 3 - d) + 2
                    if cx < 2 or cy < 2:
                        return None
                    s = Disk(cx, cy, d, cls)
                else:
                    x0 = _aligned(rng, 1, w_lim - 1 - d)
                    y0 = _aligned(rng, 1, h_lim - 1 - d)
                    if x0 < 0 or y0 < 0:
                        return None
                    s = Rect(x0, y0, d, d, cls) if kind == "rect" else Tri(x0, y0, d, d, cls)
                return s, _shape_box(s)
            return make

        s = _place(rng, reserved, [static_candidate(r) for r in _STATIC_ROUNDS[kind]])
        if s is None:
            return None
        statics.append(s)
    return Scene(spec=spec, statics=statics, movers=movers)


def _fallback_scene(spec: SceneSpec, rng) -> Scene:
    """Hand-placed 64x64 layout used if random placement keeps colliding.

    Geometry is fixed (verified disjoint by hand) but the class/color
    assignment is still drawn from the scene's stream, so two fallback
    scenes with different seeds stay distinguishable.
    """
    if (spec.width, spec.height) != (64, 64) or spec.num_shapes != 10:
        raise ConfigError(f"could not place {spec.num_shapes} shapes on a "
                          f"{spec.width}x{spec.height} scene (no fallback layout)")
    cls = [int(c) for c in rng.choice(np.arange(1, spec.num_classes), size=10, replace=False)]
    statics = [
        Disk(14, 38, 10, cls[0]),
        Tri(28, 28, 16, 16, cls[1]),
        Disk(38, 10, 6, cls[2]),
        Tri(48, 32, 12, 12, cls[3]),
        Rect(4, 20, 8, 8, cls[4]),
        Rect(16, 20, 8, 8, cls[5]),
        Rect(8, 52, 8, 8, cls[6]),
    ]
    movers = [
        Mover(8, 4, 20, 12, "h", cls[7]),
        Mover(48, 8, 12, 20, "v", cls[8]),
        Mover(32, 48, 20, 12, "h", cls[9]),
    ]
    return Scene(spec=spec, statics=statics, movers=movers)


def build_scene(spec: SceneSpec) -> Scene:
    for attempt in range(BUILD_ATTEMPTS):
        scene = _try_build(spec, stream(spec.seed, PURPOSE_SCENE, attempt))
        if scene is not None:
            return scene
    return _fallback_scene(spec, stream(spec.seed, PURPOSE_SCENE, BUILD_ATTEMPTS))


def mover_offset(mover_index: int, t: int) -> int:
    """Offset of mover k at frame t; mover k advances on frames t = k (mod 4), t > 0."""
    first = mover_index % 4 if mover_index % 4 >= 1 else 4
    moves = 0 if t < first else (t - first) // 4 + 1
    return TRI12[moves % len(TRI12)]


def _paint(labels: np.ndarray, s, dx: int = 0, dy: int = 0) -> None:
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if isinstance(s, (Rect, Mover)):
        m = ((xx >= s.x0 + dx) & (xx < s.x0 + s.w + dx)
             & (yy >= s.y0 + dy) & (yy < s.y0 + s.h + dy))
    elif isinstance(s, Disk):
        m = (xx - s.cx - dx) ** 2 + (yy - s.cy - dy) ** 2 <= s.r ** 2
    elif isinstance(s, Tri):
        # clamp to the box: the hypotenuse inequality alone also admits the
        # leg endpoints at x0+w and y0+h, one pixel outside the box
        m = ((xx >= s.x0 + dx) & (xx < s.x0 + s.w + dx)
             & (yy >= s.y0 + dy) & (yy < s.y0 + s.h + dy)
             & ((xx - s.x0 - dx) * s.h + (yy - s.y0 - dy) * s.w <= s.w * s.h))
    else:
        raise ConfigError(f"unknown shape {type(s).__name__}")
    labels[m] = s.cls


def render_labels(scene: Scene, t: int) -> np.ndarray:
    labels = np.zeros((scene.spec.height, scene.spec.width), dtype=np.uint8)
    for s in scene.statics:
        _paint(labels, s)
    for k, m in enumerate(scene.movers):
        off = mover_offset(k, t)
        dx, dy = (off, 0) if m.axis == "h" else (0, off)
        _paint(labels, m, dx, dy)
    return labels


def render_frame(scene: Scene, t: int) -> tuple:
    """(image 3xHxW float32 in [0,1], labels HxW uint8) for frame t."""
    labels = render_labels(scene, t)
    pal = palette(scene.spec.num_classes)
    image = pal[labels].transpose(2, 0, 1).astype(np.float32)
    return image, labels
