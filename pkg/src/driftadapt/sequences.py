"""Gradual-domain-shift sequences over synthetic scenes.

A sequence renders one scene for T frames while a photometric shift
(night, fog, or rain-noise) ramps up to a peak severity at the middle
and back down to zero at both ends.  Labels are never touched by the
shift.  Generation is a pure function of the spec: every frame's
content, including the rain noise, comes from streams keyed by
(scene seed, shift parameters, frame index).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .framestore import frame_name, write_frame, write_ppm
from .rng import PURPOSE_SHIFT, stream
from .scenes import Scene, SceneSpec, build_scene, render_frame

SHIFT_KINDS = ("night", "fog", "rain-noise")
_KIND_ID = {k: i for i, k in enumerate(SHIFT_KINDS)}
PROFILES = ("triangular", "plateau")
PLATEAU_TOP = 0.2  # fraction of the sequence that sits flat at peak severity


@dataclass(frozen=True)
class SequenceSpec:
    kind: str
    s_max: float = 1.0
    length: int = 401
    profile: str = "triangular"
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}, expected one of {SHIFT_KINDS}")
        if not 0.0 <= self.s_max <= 1.0:
            raise ConfigError(f"peak severity {self.s_max} outside [0, 1]")
        if self.length < 1:
            raise ConfigError(f"sequence length {self.length} must be positive")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}, expected one of {PROFILES}")

    @property
    def name(self) -> str:
        base = f"{self.kind}-{int(round(self.s_max * 100)):03d}"
        return base if self.profile == "triangular" else f"{base}-{self.profile}"


def severity(t: int, spec: SequenceSpec) -> float:
    """Severity of frame t: 0 at both ends, s_max at the middle."""
    if not 0 <= t < spec.length:
        raise ConfigError(f"frame {t} outside [0, {spec.length})")
    if spec.length == 1:
        return 0.0
    tri = 1.0 - abs(2.0 * t / (spec.length - 1) - 1.0)
    if spec.profile == "plateau":
        tri = min(1.0, tri / (1.0 - PLATEAU_TOP))
    return spec.s_max * tri


def apply_shift(image: np.ndarray, kind: str, sev: float, rng) -> np.ndarray:
    """Photometric shift at the given severity; severity 0 is a bitwise copy."""
    if kind not in SHIFT_KINDS:
        raise ConfigError(f"unknown shift kind {kind!r}")
    if not 0.0 <= sev <= 1.0:
        raise ConfigError(f"severity {sev} outside [0, 1]")
    img = np.asarray(image, dtype=np.float32)
    if sev == 0.0:
        return img.copy()
    if kind == "night":
        # linear dimming reaches x0.1 luminance at full severity; darkness
        # also brings sensor noise, which is what makes night the hardest
        # shift: rescaling the crushed signal amplifies the noise with it
        out = img * np.float32(1.0 - 0.9 * sev)
        out[2] = out[2] + np.float32(0.04 * sev)  # faint blue cast
        noise = (rng.standard_normal(img.shape) * (0.04 * sev)).astype(np.float32)
        out = out + noise
    elif kind == "fog":
        a = np.float32(0.85 * sev)
        out = img * (np.float32(1.0) - a) + np.float32(0.7) * a
    else:  # rain-noise: desaturate a little, then add gaussian noise
        gray = img.mean(axis=0, keepdims=True, dtype=np.float64).astype(np.float32)
        d = np.float32(0.2 * sev)
        out = img * (np.float32(1.0) - d) + gray * d
        noise = (rng.standard_normal(img.shape) * (0.15 * sev)).astype(np.float32)
        out = out + noise
    return np.clip(out, 0.0, 1.0)


def _shift_rng(spec: SequenceSpec, t: int):
    return stream(spec.scene.seed, PURPOSE_SHIFT, _KIND_ID[spec.kind],
                  int(round(spec.s_max * 10000)), PROFILES.index(spec.profile), t)


def frame_at(spec: SequenceSpec, scene: Scene, t: int) -> tuple:
    """(shifted image, labels, severity) of frame t; pure in (spec, t)."""
    image, labels = render_frame(scene, t)
    sev = severity(t, spec)
    return apply_shift(image, spec.kind, sev, _shift_rng(spec, t)), labels, sev


def generate_sequence(spec: SequenceSpec, out_dir, ppm: bool = False) -> list:
    """Write all frames plus the severity sidecar; returns the frame paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = build_scene(spec.scene)
    k = spec.scene.num_classes
    paths = []
    rows = []
    for t in range(spec.length):
        image, labels, sev = frame_at(spec, scene, t)
        path = out_dir / frame_name(t)
        write_frame(path, image, labels, k)
        if ppm:
            (out_dir / "ppm").mkdir(exist_ok=True)
            write_ppm(out_dir / "ppm" / f"frame_{t:04d}.ppm", image)
        paths.append(path)
        rows.append((t, sev))
    with open(out_dir / "severity.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "severity"])
        for t, sev in rows:
            writer.writerow([t, f"{sev:.6g}"])
    return paths


def source_dataset(seed: int, num_scenes: int, frames_per_scene: int,
                   scene_template: SceneSpec = None, scene_offset: int = 0) -> list:
    """Unshifted (image, labels) pairs from several distinct scene layouts.

    ``scene_offset`` selects a disjoint block of scene seeds, which is how
    held-out scenes are kept separate from training scenes.
    """
    from .rng import PURPOSE_DATASET, derive_seed

    if scene_template is None:
        scene_template = SceneSpec()
    data = []
    for i in range(num_scenes):
        scene_seed = derive_seed(seed, PURPOSE_DATASET, scene_offset + i)
        spec = SceneSpec(width=scene_template.width, height=scene_template.height,
                         num_classes=scene_template.num_classes,
                         num_shapes=scene_template.num_shapes, seed=scene_seed)
        scene = build_scene(spec)
        for t in range(frames_per_scene):
            data.append(render_frame(scene, t))
    return data
