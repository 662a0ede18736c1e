"""Flat key=value run configuration.

Grammar: one `key = value` pair per line; lines starting with `#` and
blank lines are ignored; no sections.  Unknown and duplicated keys are
fatal so typos cannot silently fall back to defaults.  Every key has a
documented default, visible in default_config_text().

Sequences are written `kind@peak` with an optional profile suffix,
e.g. `night@1.0` or `fog@0.7-plateau`; methods are written as labels,
e.g. `tent` or `ours[frac=0.15,lr=0.001]`.
"""

from __future__ import annotations

import zlib
from pathlib import Path

from .errors import ConfigError
from .methods import MethodConfig, parse_method_overrides, parse_rate
from .model import ModelSpec
from .rng import PURPOSE_DATASET, derive_seed
from .scenes import SceneSpec
from .sequences import PROFILES, SHIFT_KINDS, SequenceSpec

FRACTION_SWEEP = (0.15, 0.20, 0.25, 0.30, 0.35, 0.40)
GAMMA_SWEEP = (1.0, 0.1, 0.01, 0.001)
ALPHA_SWEEP = (0.5, 0.05, 0.005, 0.0005)
SWEEPS = ("none", "fraction", "gamma-alpha", "selector")


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc


def _parse_bool(text: str) -> bool:
    if text in ("on", "true", "1"):
        return True
    if text in ("off", "false", "0"):
        return False
    raise ConfigError(f"expected on/off, got {text!r}")


def _parse_ints(text: str) -> tuple:
    return tuple(_parse_int(part.strip()) for part in text.split(",") if part.strip())


def _parse_str(text: str) -> str:
    return text


# key -> (parser, default written in config grammar, meaning)
SCHEMA = {
    "seed": (_parse_int, "0", "master seed for scenes, training, and streams"),
    "out": (_parse_str, "runs/main", "directory for reports and summaries"),
    "data_dir": (_parse_str, "data", "where gen-data writes and run-tta reads frames"),
    "checkpoint": (_parse_str, "checkpoint.dacp", "source model checkpoint path"),
    "image_size": (_parse_int, "64", "square frame edge in pixels"),
    "num_classes": (_parse_int, "14", "label classes including background"),
    "backbone_widths": (_parse_ints, "16,32,64", "backbone conv widths"),
    "backbone_strides": (_parse_ints, "1,2,2", "backbone conv strides"),
    "head_widths": (_parse_ints, "32", "head conv widths before the classifier"),
    "seq_length": (_parse_int, "401", "frames per drift sequence"),
    "sequences": (_parse_str,
                  "night@1.0;fog@1.0;rain-noise@1.0;"
                  "night@0.7;fog@0.7;rain-noise@0.7",
                  "semicolon list of kind@peak[-plateau] entries"),
    "eval_scene_offset": (_parse_int, "100",
                          "scene-seed family for evaluation sequences"),
    "methods": (_parse_str, "source-only;tent;cotta;ours",
                "semicolon list of method labels"),
    "sweep": (_parse_str, "none",
              "replace methods with a grid: none, fraction, gamma-alpha, selector"),
    "lr": (parse_rate, "0.00006/4",
           "adaptation learning rate; 0.00006/8 is the documented low preset"),
    "cotta_lr": (parse_rate, "0.00025", "learning rate for the cotta student"),
    "gamma": (parse_rate, "0.1", "distance scale in the mixing weight"),
    "alpha": (parse_rate, "0.005", "EMA rate of the mixing weight"),
    "fraction": (parse_rate, "0.3", "entropy mask threshold as a share of ln K"),
    "beta_scope": (_parse_str, "per-layer", "per-layer or global mixing weight"),
    "gate": (_parse_bool, "off", "adapt only on entropy jumps"),
    "gate_threshold": (parse_rate, "0.01", "mean-entropy jump that opens the gate"),
    "ema_momentum": (parse_rate, "0.999", "teacher EMA momentum for cotta"),
    "restore_rate": (parse_rate, "0.01", "per-weight source restore chance for cotta"),
    "augment_count": (_parse_int, "3", "teacher augmentation views for cotta"),
    "train_scenes": (_parse_int, "48", "distinct layouts in the source training set"),
    "train_frames_per_scene": (_parse_int, "3", "frames sampled from each layout"),
    "train_batch": (_parse_int, "8", "source training batch size"),
    "train_stages": (_parse_str, "30@0.01;30@0.005;25@0.002",
                     "semicolon list of epochs@lr training stages"),
    "train_data_dir": (_parse_str, "",
                       "optional frame tree to train from instead of generated scenes"),
    "heldout_scenes": (_parse_int, "8", "scenes held out for the printed source mIoU"),
    "heldout_offset": (_parse_int, "64", "scene-seed offset of the held-out block"),
    "ppm": (_parse_bool, "off", "also write viewable PPM images from gen-data"),
    "parallel": (_parse_int, "1", "worker processes for run-tta cells"),
}

class RunConfig:
    """Parsed configuration; attributes mirror the schema keys."""

    def __init__(self, values: dict):
        self.values = {key: values[key] for key in SCHEMA}
        for key, value in self.values.items():
            setattr(self, key, value)
        self._validate()

    def _validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError(f"image_size {self.image_size} is too small")
        down = 1
        for s in self.backbone_strides:
            down *= s
        if self.image_size % down:
            raise ConfigError(f"image_size {self.image_size} must be divisible by "
                              f"the total stride {down}")
        if self.parallel < 1:
            raise ConfigError(f"parallel must be >= 1, got {self.parallel}")
        if self.sweep not in SWEEPS:
            raise ConfigError(f"sweep must be one of {SWEEPS}, got {self.sweep!r}")
        if self.seq_length < 1:
            raise ConfigError(f"seq_length must be positive, got {self.seq_length}")
        for check in (self.model_spec, self.sequence_specs, self.method_configs,
                      self.train_stage_list):
            check()  # constructors validate their own fields

    def model_spec(self) -> ModelSpec:
        return ModelSpec(in_channels=3, num_classes=self.num_classes,
                         backbone_widths=self.backbone_widths,
                         backbone_strides=self.backbone_strides,
                         head_widths=self.head_widths)

    def _scene_for(self, name: str) -> SceneSpec:
        seed = derive_seed(self.seed, PURPOSE_DATASET, self.eval_scene_offset,
                           zlib.crc32(name.encode()))
        return SceneSpec(width=self.image_size, height=self.image_size,
                         num_classes=self.num_classes, seed=seed)

    def sequence_specs(self) -> list:
        specs = []
        for entry in _split(self.sequences):
            kind, _, rest = entry.partition("@")
            if not rest:
                raise ConfigError(f"sequence {entry!r} needs kind@peak, "
                                  f"e.g. night@1.0")
            profile = "triangular"
            for suffix in PROFILES:
                if rest.endswith("-" + suffix):
                    profile = suffix
                    rest = rest[:-(len(suffix) + 1)]
            if kind not in SHIFT_KINDS:
                raise ConfigError(f"unknown shift kind {kind!r} in {entry!r}")
            s_max = parse_rate(rest)
            base = SequenceSpec(kind=kind, s_max=s_max, length=self.seq_length,
                                profile=profile)
            specs.append(SequenceSpec(kind=kind, s_max=s_max, length=self.seq_length,
                                      profile=profile,
                                      scene=self._scene_for(base.name)))
        if not specs:
            raise ConfigError("sequences list is empty")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate sequence names in {names}")
        return specs

    def _method_kwargs(self, method: str) -> dict:
        return {"lr": self.cotta_lr if method == "cotta" else self.lr,
                "gamma_hp": self.gamma, "alpha_hp": self.alpha,
                "mask_fraction": self.fraction, "beta_scope": self.beta_scope,
                "gate_enabled": self.gate, "gate_threshold": self.gate_threshold,
                "ema_momentum": self.ema_momentum, "restore_rate": self.restore_rate,
                "augment_count": self.augment_count}

    def _merged(self, method: str, **overrides) -> MethodConfig:
        kwargs = self._method_kwargs(method)
        kwargs.update(overrides)
        return MethodConfig(method=method, **kwargs)

    def method_configs(self) -> list:
        if self.sweep == "fraction":
            return [self._merged("ours", mask_fraction=f) for f in FRACTION_SWEEP]
        if self.sweep == "gamma-alpha":
            return [self._merged("ours", gamma_hp=g, alpha_hp=a)
                    for g in GAMMA_SWEEP for a in ALPHA_SWEEP]
        if self.sweep == "selector":
            return [self._merged("tent", region=r, scope=s)
                    for r in ("backbone", "head", "both")
                    for s in ("bn-affine-only", "all-weights")]
        configs = []
        for entry in _split(self.methods):
            method, overrides = parse_method_overrides(entry)
            configs.append(self._merged(method, **overrides))
        if not configs:
            raise ConfigError("methods list is empty")
        labels = [c.label() for c in configs]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate method labels in {labels}")
        return configs

    def train_stage_list(self) -> tuple:
        stages = []
        for entry in _split(self.train_stages):
            epochs, _, lr = entry.partition("@")
            if not lr:
                raise ConfigError(f"training stage {entry!r} needs epochs@lr")
            stages.append((_parse_int(epochs), parse_rate(lr)))
        if not stages:
            raise ConfigError("train_stages list is empty")
        return tuple(stages)


def _split(text: str) -> list:
    return [part.strip() for part in text.split(";") if part.strip()]


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config from a file plus CLI overrides; None path means all defaults."""
    values = {key: parser(default) for key, (parser, default, _) in SCHEMA.items()}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        seen = set()
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, eq, value = stripped.partition("=")
            key = key.strip()
            if not eq:
                raise ConfigError(f"{path}:{lineno}: expected key = value, "
                                  f"got {stripped!r}")
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in seen:
                raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
            seen.add(key)
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "method":
            values["methods"] = value
            values["sweep"] = "none"
        elif key == "seq":
            values["_seq_filter"] = value
        elif key in SCHEMA:
            try:
                values[key] = SCHEMA[key][0](str(value))
            except ConfigError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        else:
            raise ConfigError(f"unknown override {key!r}")
    seq_filter = values.pop("_seq_filter", None)
    cfg = RunConfig(values)
    if seq_filter is not None:
        wanted = [name.strip() for name in seq_filter.split(";") if name.strip()]
        available = {s.name for s in cfg.sequence_specs()}
        missing = [name for name in wanted if name not in available]
        if missing:
            raise ConfigError(f"unknown sequence name(s) {missing}; "
                              f"available: {sorted(available)}")
        cfg.sequences = ";".join(
            entry for entry, spec in zip(_split(cfg.sequences), cfg.sequence_specs())
            if spec.name in wanted)
        cfg.values["sequences"] = cfg.sequences
    return cfg


def default_config_text() -> str:
    """A fully commented config file holding every default."""
    lines = ["# one key = value per line; '#' lines are comments"]
    for key, (_, default, help_text) in SCHEMA.items():
        lines.append(f"# {help_text}")
        lines.append(f"{key} = {default}")
    return "\n".join(lines) + "\n"
