"""Streams one sequence through one adaptation method and scores every frame.

A cell (sequence, method) always starts from the source checkpoint:
parameters, optimizer moments, BN adaptation state, the gate, and the
teacher copy all reset, so cells are order-independent and safe to run
in parallel.  Within a cell the frame order is causal and the emitted
prediction for frame t is computed before frame t's update.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .autograd import Tensor
from .checkpoint import Checkpoint, apply_checkpoint
from .errors import ConfigError
from .framestore import frame_name, load_frame
from .methods import (HOLD, GateState, MethodConfig, _probs_of,
                      _stat_diagnostics, cotta_step, entropy_gate, ours_step,
                      source_only_step, tent_step)
from .metrics import (ConfusionMatrix, WindowedScores, argmax_labels,
                      mean_entropy, miou, summary_row, windowed_scores,
                      write_analysis_csv, write_report_csv)
from .model import (Model, ModelSpec, build_model, forward_segment,
                    restore, select_trainable, snapshot)
from .rng import PURPOSE_AUGMENT, PURPOSE_RESTORE, stream


@dataclass
class FrameTrace:
    """Everything the report and analysis CSVs need about one frame."""

    frame: int
    miou: float
    mean_entropy: float
    kl_to_source: float   # layer-averaged divergence, frozen stats vs frame stats
    kl_first: float       # same divergence at the first BN layer only
    kl_used_batch: float  # divergence between the stats used and the frame stats
    beta: float
    gate_fired: bool


@dataclass
class SequenceReport:
    sequence: str
    method: str
    traces: list
    scores: WindowedScores

    def report_rows(self) -> list:
        return [(tr.frame, tr.miou, tr.mean_entropy, tr.kl_to_source, tr.beta,
                 tr.gate_fired) for tr in self.traces]

    def analysis_rows(self) -> list:
        return [(tr.frame, tr.miou, tr.mean_entropy, tr.kl_first, tr.kl_to_source)
                for tr in self.traces]

    def summary_row(self) -> list:
        return summary_row(self.sequence, self.method, self.scores)


class Runner:
    """One model under one method config, reusable across sequences."""

    def __init__(self, model_spec: ModelSpec, ckpt: Checkpoint,
                 cfg: MethodConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.model = build_model(model_spec, seed=0)
        apply_checkpoint(self.model, ckpt)
        select_trainable(self.model, cfg.selector)
        if cfg.bn_mode == "interpolated":
            self.model.make_adapt_states(cfg.gamma_hp, cfg.alpha_hp)
        self.source_state = snapshot(self.model)
        self.teacher = None
        self.teacher_state = None
        if cfg.method == "cotta":
            self.source_params = {name: arr.copy()
                                  for name, arr in self.source_state["params"].items()}
            self.teacher = build_model(model_spec, seed=0)
            apply_checkpoint(self.teacher, ckpt)
            self.teacher.store.set_trainable([])
            self.teacher_state = snapshot(self.teacher)
        self.gate = GateState()

    def _restore_source(self) -> None:
        restore(self.model, self.source_state)
        if self.teacher is not None:
            restore(self.teacher, self.teacher_state)

    def reset_for_sequence(self) -> None:
        self._restore_source()
        self.gate.reset()

    def _adapt(self, frame: Tensor, t: int, stream_key: int) -> tuple:
        cfg = self.cfg
        if cfg.method == "source-only":
            return source_only_step(self.model, frame, cfg)
        if cfg.method == "tent":
            return tent_step(self.model, frame, cfg)
        if cfg.method == "ours":
            return ours_step(self.model, frame, cfg)
        return cotta_step(self.model, self.teacher, frame, cfg, self.source_params,
                          stream(self.seed, PURPOSE_AUGMENT, stream_key, t),
                          stream(self.seed, PURPOSE_RESTORE, stream_key, t))

    def _probe(self, frame: Tensor) -> tuple:
        """Prediction with the current model and no state movement at all."""
        model = self.teacher if self.teacher is not None else self.model
        collect = {}
        logits = forward_segment(model, frame, bn_mode=self.cfg.bn_mode,
                                 update_state=False, collect=collect)
        info = _stat_diagnostics(model, collect, self.cfg.bn_mode)
        info["probs"] = _probs_of(logits)
        return logits, info

    def run_frame(self, t: int, image, stream_key: int = 0) -> tuple:
        """Returns (logits, info, gate_fired) honoring the gate policy.

        With the gate on, the frame is first predicted with the held model;
        that prediction's entropy drives the gate.  A hold emits it as is.
        A firing gate restores the source model and runs one adaptation
        step, whose pre-update output becomes the emitted prediction.
        """
        frame = Tensor(image[None])
        if not self.cfg.gate_enabled:
            logits, info = self._adapt(frame, t, stream_key)
            return logits, info, False
        logits, info = self._probe(frame)
        decision = entropy_gate(self.gate, mean_entropy(info["probs"]),
                                self.cfg.gate_threshold)
        if decision == HOLD:
            return logits, info, False
        self._restore_source()
        logits, info = self._adapt(frame, t, stream_key)
        return logits, info, True

    def run_sequence(self, name: str, frames, stream_key: int = 0) -> SequenceReport:
        """Score every (image, labels) pair of an in-order frame stream."""
        self.reset_for_sequence()
        k = self.model.spec.num_classes
        matrices = []
        traces = []
        for t, (image, labels) in enumerate(frames):
            logits, info, fired = self.run_frame(t, image, stream_key)
            pred = argmax_labels(logits.data)[0]
            cm = ConfusionMatrix(k)
            cm.update(pred, labels)
            matrices.append(cm)
            traces.append(FrameTrace(t, miou(cm), mean_entropy(info["probs"]),
                                     info["kl_to_source"], info["kl_first"],
                                     info["kl_used_batch"], info["beta"], fired))
        return SequenceReport(name, self.cfg.label(), traces,
                              windowed_scores(matrices))


def frames_from_dir(seq_dir, expect: tuple):
    """Yield (image, labels) from frame_0000.dafr, frame_0001.dafr, ... in order."""
    seq_dir = Path(seq_dir)
    if not seq_dir.is_dir():
        raise ConfigError(f"sequence directory {seq_dir} does not exist")
    t = 0
    while True:
        path = seq_dir / frame_name(t)
        if not path.exists():
            break
        image, labels, _ = load_frame(path, expect=expect)
        yield image, labels
        t += 1
    if t == 0:
        raise ConfigError(f"no {frame_name(0)} in {seq_dir}")


def frames_from_spec(seq_spec, scene):
    """Yield (image, labels) straight from the generator, no disk round trip."""
    from .sequences import frame_at

    for t in range(seq_spec.length):
        image, labels, _ = frame_at(seq_spec, scene, t)
        yield image, labels


def method_slug(label: str) -> str:
    """Filesystem-safe name for a method label like ours[frac=0.15]."""
    out = []
    for ch in label:
        if ch.isalnum() or ch in "._-":
            out.append(ch)
        elif ch == "[":
            out.append("-")
        elif ch in "=,":
            out.append("_")
    return "".join(out).rstrip("_-")


def write_cell_outputs(out_dir, report: SequenceReport) -> None:
    cell_dir = Path(out_dir) / report.sequence
    slug = method_slug(report.method)
    write_report_csv(cell_dir / f"{slug}.report.csv", report.report_rows())
    write_analysis_csv(cell_dir / f"{slug}.analysis.csv", report.analysis_rows())
