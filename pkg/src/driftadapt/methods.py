"""Per-frame adaptation steps: entropy minimization, teacher distillation,
dynamic statistics, pixel filtering, and the entropy-difference gate.

Every step emits the prediction computed before its own update, so frame
t's output never depends on what frame t taught the model.  The common
shape is: forward once, grab diagnostics, maybe take one optimizer step.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, fields

import numpy as np

from .autograd import (Tensor, backward, cross_entropy_loss,
                       masked_mean_entropy_loss, softmax_channels)
from .errors import ConfigError, NumericError
from .model import (Model, ParamSelector, ema_update, forward_segment,
                    stochastic_restore)
from .optim import adam_step
from .stats import BETA_T_MAX, interpolate_stats, sym_kl

METHOD_NAMES = ("source-only", "tent", "cotta", "ours")
BETA_SCOPES = ("per-layer", "global")
HOLD = "hold"
RESET_AND_ADAPT = "reset-and-adapt"

# bn_mode, which weights train, and the learning rate per method, unless
# overridden; cotta's published recipe ran a larger rate than the others
_METHOD_DEFAULTS = {
    "source-only": ("both", "bn-affine-only", "source", 0.00006 / 4),
    "tent": ("both", "bn-affine-only", "batch", 0.00006 / 4),
    "cotta": ("both", "all-weights", "batch", 0.00025),
    "ours": ("backbone", "bn-affine-only", "interpolated", 0.00006 / 4),
}

# label() renders only the fields that differ from the method's defaults
_LABEL_KEYS = (("region", "region"), ("scope", "scope"), ("bn_mode", "bn"),
               ("lr", "lr"), ("mask_fraction", "frac"), ("gamma_hp", "gamma"),
               ("alpha_hp", "alpha"), ("beta_scope", "beta"),
               ("gate_enabled", "gate"), ("gate_threshold", "thr"),
               ("ema_momentum", "ema"), ("restore_rate", "restore"),
               ("augment_count", "augs"))


@dataclass
class MethodConfig:
    """One adaptation recipe; None region/scope/bn_mode take the method default."""

    method: str = "ours"
    region: str | None = None
    scope: str | None = None
    bn_mode: str | None = None
    lr: float | None = None
    gamma_hp: float = 0.1
    alpha_hp: float = 0.005
    mask_fraction: float = 0.3
    beta_scope: str = "per-layer"
    gate_enabled: bool = False
    gate_threshold: float = 0.01
    ema_momentum: float = 0.999
    restore_rate: float = 0.01
    augment_count: int = 3

    def __post_init__(self):
        if self.method not in METHOD_NAMES:
            raise ConfigError(f"unknown method {self.method!r}, "
                              f"expected one of {METHOD_NAMES}")
        region, scope, bn_mode, lr = _METHOD_DEFAULTS[self.method]
        if self.region is None:
            self.region = region
        if self.scope is None:
            self.scope = scope
        if self.bn_mode is None:
            self.bn_mode = bn_mode
        if self.lr is None:
            self.lr = lr
        ParamSelector(self.region, self.scope)  # validates both fields
        if self.bn_mode not in ("source", "batch", "interpolated"):
            raise ConfigError(f"unknown bn_mode {self.bn_mode!r}")
        if not (math.isfinite(self.lr) and self.lr >= 0.0):
            raise ConfigError(f"learning rate must be finite and >= 0, got {self.lr}")
        if not (math.isfinite(self.gamma_hp) and self.gamma_hp > 0.0):
            raise ConfigError(f"gamma must be finite and > 0, got {self.gamma_hp}")
        if not 0.0 < self.alpha_hp <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha_hp}")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ConfigError(f"mask fraction must lie in (0, 1], got {self.mask_fraction}")
        if self.beta_scope not in BETA_SCOPES:
            raise ConfigError(f"beta scope must be one of {BETA_SCOPES}, "
                              f"got {self.beta_scope!r}")
        if not (math.isfinite(self.gate_threshold) and self.gate_threshold > 0.0):
            raise ConfigError(f"gate threshold must be > 0, got {self.gate_threshold}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"EMA momentum must lie in [0, 1], got {self.ema_momentum}")
        if not 0.0 <= self.restore_rate <= 1.0:
            raise ConfigError(f"restore rate must lie in [0, 1], got {self.restore_rate}")
        if self.augment_count < 0:
            raise ConfigError(f"augment count must be >= 0, got {self.augment_count}")

    @property
    def selector(self) -> ParamSelector:
        return ParamSelector(self.region, self.scope)

    def label(self) -> str:
        """Method name plus bracketed non-default settings, e.g. ours[frac=0.15]."""
        base = MethodConfig(method=self.method)
        parts = []
        for field_name, key in _LABEL_KEYS:
            value = getattr(self, field_name)
            if value == getattr(base, field_name):
                continue
            if isinstance(value, bool):
                parts.append(f"{key}={'on' if value else 'off'}")
            elif isinstance(value, float):
                parts.append(f"{key}={value:g}")
            else:
                parts.append(f"{key}={value}")
        if not parts:
            return self.method
        return f"{self.method}[{','.join(parts)}]"


def config_field_names() -> tuple:
    return tuple(f.name for f in fields(MethodConfig))


_KEY_TO_FIELD = {key: field_name for field_name, key in _LABEL_KEYS}
_INT_FIELDS = ("augment_count",)
_STR_FIELDS = ("region", "scope", "bn_mode", "beta_scope")
_LABEL_RE = re.compile(r"([a-z-]+)(?:\[([^\[\]]*)\])?")


def parse_rate(text: str) -> float:
    """A float, or an a/b fraction like 0.00006/4 (a documented preset spelling)."""
    text = text.strip()
    try:
        if "/" in text:
            num, _, den = text.partition("/")
            return float(num) / float(den)
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot read {text!r} as a rate") from exc


def parse_method_overrides(text: str) -> tuple:
    """(method name, MethodConfig kwargs) from `name` or `name[key=value,...]`."""
    match = _LABEL_RE.fullmatch(text.strip())
    if not match:
        raise ConfigError(f"cannot parse method {text!r}; "
                          f"expected name or name[key=value,...]")
    method, inner = match.group(1), match.group(2)
    kwargs = {}
    if inner:
        for part in inner.split(","):
            key, eq, raw = part.partition("=")
            key = key.strip()
            raw = raw.strip()
            field_name = _KEY_TO_FIELD.get(key)
            if not eq or field_name is None or not raw:
                raise ConfigError(f"unknown or malformed setting {part.strip()!r} "
                                  f"in method {text!r}")
            if field_name == "gate_enabled":
                if raw not in ("on", "off"):
                    raise ConfigError(f"gate must be on or off, got {raw!r}")
                kwargs[field_name] = raw == "on"
            elif field_name in _INT_FIELDS:
                try:
                    kwargs[field_name] = int(raw)
                except ValueError as exc:
                    raise ConfigError(f"bad integer {raw!r} for {key}") from exc
            elif field_name in _STR_FIELDS:
                kwargs[field_name] = raw
            else:
                kwargs[field_name] = parse_rate(raw)
    return method, kwargs


def parse_method_label(text: str) -> MethodConfig:
    """Inverse of MethodConfig.label()."""
    method, kwargs = parse_method_overrides(text)
    return MethodConfig(method=method, **kwargs)


def entropy_pixel_mask(probs: np.ndarray, fraction: float) -> np.ndarray:
    """Keep (1.0) pixels whose prediction entropy is at most fraction * ln K.

    Input is N x K x H x W probabilities; output is a float32 N x 1 x H x W
    mask suitable for the masked entropy loss.  Raising the fraction can
    only grow the kept set.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"mask fraction must lie in (0, 1], got {fraction}")
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    cap = np.log(float(p.shape[1]))
    # rounding in float32 probabilities can push the sum past ln K; clamp so
    # fraction 1.0 keeps every pixel by construction
    h = np.minimum(-plogp.sum(axis=1, keepdims=True), cap)
    return (h <= fraction * cap).astype(np.float32)


def _probs_of(logits: Tensor) -> np.ndarray:
    return softmax_channels(Tensor(logits.data)).data


def _stat_diagnostics(model: Model, collect: dict, bn_mode: str) -> dict:
    """Layer-averaged divergences between source, batch, and used statistics."""
    pairs = collect["batch_stats"]
    kl_source = [sym_kl(model.bn_layers[name].source_stats(), bstats)
                 for name, bstats in pairs]
    if bn_mode == "source":
        kl_used = list(kl_source)
    elif bn_mode == "batch":
        kl_used = [0.0] * len(pairs)
    else:
        kl_used = [sym_kl(model.adapt_states[name].current, bstats)
                   for name, bstats in pairs]
    betas = [b for _, b in collect["betas"]] if collect["betas"] else [0.0]
    return {"kl_to_source": float(np.mean(kl_source)),
            "kl_first": float(kl_source[0]),
            "kl_used_batch": float(np.mean(kl_used)),
            "beta": float(np.mean(betas))}


def source_only_step(model: Model, frame: Tensor, cfg: MethodConfig) -> tuple:
    """Predict without touching any parameter; statistics still advance when
    the bn_mode is interpolated, giving a weights-frozen statistics baseline."""
    collect = {}
    logits = forward_segment(model, frame, bn_mode=cfg.bn_mode, collect=collect)
    info = _stat_diagnostics(model, collect, cfg.bn_mode)
    info["probs"] = _probs_of(logits)
    return logits, info


def tent_step(model: Model, frame: Tensor, cfg: MethodConfig) -> tuple:
    """Entropy minimization on the selected parameters under batch statistics."""
    collect = {}
    logits = forward_segment(model, frame, bn_mode=cfg.bn_mode, collect=collect)
    info = _stat_diagnostics(model, collect, cfg.bn_mode)
    info["probs"] = _probs_of(logits)
    loss = masked_mean_entropy_loss(logits)
    backward(loss)
    adam_step(model.store, cfg.lr)
    info["loss"] = float(loss.data)
    return logits, info


def _advance_global_beta(model: Model, collect: dict) -> None:
    """Shared-beta bookkeeping after a pass that froze the per-layer states.

    A single mixing weight cannot be known mid-pass, so the forward
    normalized with the previous frame's interpolated statistics; here the
    layer divergences are averaged into one beta and every layer's
    reference stats advance with it.
    """
    pairs = collect["batch_stats"]
    states = [model.adapt_states[name] for name, _ in pairs]
    d_bar = float(np.mean([sym_kl(st.current, bstats)
                           for st, (_, bstats) in zip(states, pairs)]))
    beta_t = min(float(-np.expm1(-states[0].gamma_hp * d_bar)), BETA_T_MAX)
    shared = (1.0 - states[0].alpha_hp) * states[0].beta + states[0].alpha_hp * beta_t
    for st, (_, bstats) in zip(states, pairs):
        st.beta = shared
        st.last_beta_t = beta_t
        interpolate_stats(st, bstats)


def ours_step(model: Model, frame: Tensor, cfg: MethodConfig) -> tuple:
    """Dynamic statistics plus pixel-filtered entropy minimization."""
    collect = {}
    if cfg.beta_scope == "per-layer":
        logits = forward_segment(model, frame, bn_mode=cfg.bn_mode, collect=collect)
    else:
        logits = forward_segment(model, frame, bn_mode=cfg.bn_mode,
                                 update_state=False, collect=collect)
        if cfg.bn_mode == "interpolated":
            _advance_global_beta(model, collect)
    info = _stat_diagnostics(model, collect, cfg.bn_mode)
    probs = _probs_of(logits)
    info["probs"] = probs
    mask = entropy_pixel_mask(probs, cfg.mask_fraction)
    info["kept_fraction"] = float(mask.mean())
    loss = masked_mean_entropy_loss(logits, mask)
    backward(loss)
    adam_step(model.store, cfg.lr)
    info["loss"] = float(loss.data)
    return logits, info


def _augment(frame: np.ndarray, kind: int, rng) -> tuple:
    """One augmented view; returns (view, needs_unflip)."""
    if kind == 0:
        return np.ascontiguousarray(frame[..., ::-1]), True
    if kind == 1:
        factor = float(rng.uniform(0.8, 1.2))
        return np.clip(frame * np.float32(factor), 0.0, 1.0), False
    noise = rng.normal(0.0, 0.05, size=frame.shape)
    return np.clip(frame + noise, 0.0, 1.0).astype(np.float32), False


def cotta_step(student: Model, teacher: Model, frame: Tensor, cfg: MethodConfig,
               source_params: dict, aug_rng, restore_rng) -> tuple:
    """Teacher-student distillation with augmentation-averaged pseudo-labels.

    The teacher predicts the frame and augment_count augmented views; the
    mean of its softmax outputs trains the student by cross-entropy.  The
    teacher then follows the student by EMA and a random sliver of the
    student's weights snaps back to source values.
    """
    collect = {}
    teacher_logits = forward_segment(teacher, frame, bn_mode=cfg.bn_mode,
                                     collect=collect)
    info = _stat_diagnostics(teacher, collect, cfg.bn_mode)
    probs = _probs_of(teacher_logits)
    info["probs"] = probs

    pseudo = probs.astype(np.float64)
    for i in range(cfg.augment_count):
        view, flipped = _augment(frame.data, i % 3, aug_rng)
        view_logits = forward_segment(teacher, Tensor(view), bn_mode=cfg.bn_mode)
        view_probs = _probs_of(view_logits)
        if flipped:
            view_probs = view_probs[..., ::-1]
        pseudo += view_probs
    pseudo = (pseudo / (cfg.augment_count + 1)).astype(np.float32)
    info["pseudo"] = pseudo

    student_logits = forward_segment(student, frame, bn_mode=cfg.bn_mode)
    loss = cross_entropy_loss(student_logits, pseudo)
    backward(loss)
    adam_step(student.store, cfg.lr)
    ema_update(teacher, student, cfg.ema_momentum)
    stochastic_restore(student, source_params, cfg.restore_rate, restore_rng)
    info["loss"] = float(loss.data)
    return teacher_logits, info


@dataclass
class GateState:
    """Mean prediction entropy of the previous frame, or None before any frame."""

    last_entropy: float | None = None

    def reset(self) -> None:
        self.last_entropy = None


def entropy_gate(gate: GateState, mean_entropy: float, threshold: float) -> str:
    """Hold on the first frame and on small entropy moves; otherwise demand a
    reset to source followed by one adaptation step.  Records the entropy."""
    if not (math.isfinite(mean_entropy) and mean_entropy >= 0.0):
        raise NumericError(f"mean entropy must be finite and >= 0, got {mean_entropy}")
    if gate.last_entropy is None:
        decision = HOLD
    elif abs(mean_entropy - gate.last_entropy) >= threshold:
        decision = RESET_AND_ADAPT
    else:
        decision = HOLD
    gate.last_entropy = mean_entropy
    return decision
