"""Command-line harness: data generation, source training, streaming
adaptation runs, and comparison tables.

Subcommands: gen-data, train-source, run-tta, compare.  Every command
reads the same flat config file (see config.py for the grammar) plus a
few targeted flag overrides.  Exit codes: 0 success, 1 runtime failure,
2 configuration error.

The full pipeline is a pure function of the config file: rerunning any
command with the same inputs reproduces its outputs byte for byte, and
run-tta --parallel N only changes wall time, never bytes.
"""

from __future__ import annotations

import argparse
import multiprocessing
import shutil
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, DriftAdaptError, FormatError
from .framestore import load_frame
from .methods import parse_method_label
from .metrics import fmt_real, read_summary_csv, write_summary_csv
from .model import build_model
from .rng import PURPOSE_MODEL_INIT, derive_seed
from .runner import Runner, frames_from_dir, write_cell_outputs
from .scenes import SceneSpec
from .sequences import generate_sequence, source_dataset
from .train import evaluate_miou, train_source_recipe


def cmd_gen_data(cfg: RunConfig, args) -> int:
    data = Path(cfg.data_dir)
    for spec in cfg.sequence_specs():
        seq_dir = data / spec.name
        try:
            generate_sequence(spec, seq_dir, ppm=cfg.ppm)
        except BaseException:
            # never leave a half-written sequence behind
            shutil.rmtree(seq_dir, ignore_errors=True)
            raise
        print(f"{seq_dir}: {spec.length} frames")
    return 0


def _training_pairs(cfg: RunConfig) -> list:
    """(image, labels) pairs: a dedicated generated set, or the near-clean
    head and tail frames of an existing data tree when train_data_dir is set."""
    if not cfg.train_data_dir:
        template = SceneSpec(width=cfg.image_size, height=cfg.image_size,
                             num_classes=cfg.num_classes)
        return source_dataset(cfg.seed, cfg.train_scenes,
                              cfg.train_frames_per_scene, template)
    root = Path(cfg.train_data_dir)
    if not root.is_dir():
        raise ConfigError(f"training data directory {root} does not exist")
    expect = (cfg.image_size, cfg.image_size, 3, cfg.num_classes)
    pairs = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = sorted(seq_dir.glob("frame_*.dafr"))
        if not frames:
            continue
        take = min(40, (len(frames) + 1) // 2)
        for path in frames[:take] + frames[-take:]:
            pairs.append(load_frame(path, expect=expect))
    if not pairs:
        raise ConfigError(f"no frame files under {root}")
    return pairs


def cmd_train_source(cfg: RunConfig, args) -> int:
    dataset = _training_pairs(cfg)
    model = build_model(cfg.model_spec(),
                        seed=derive_seed(cfg.seed, PURPOSE_MODEL_INIT))
    ckpt = train_source_recipe(model, dataset, seed=cfg.seed,
                               stages=cfg.train_stage_list(),
                               batch_size=cfg.train_batch)
    path = Path(cfg.checkpoint)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, path)
    template = SceneSpec(width=cfg.image_size, height=cfg.image_size,
                         num_classes=cfg.num_classes)
    held = source_dataset(cfg.seed, cfg.heldout_scenes, cfg.train_frames_per_scene,
                          template, scene_offset=cfg.heldout_offset)
    score = evaluate_miou(model, held, batch_size=cfg.train_batch)
    print(f"checkpoint {path}")
    print(f"held-out source mIoU {fmt_real(score)}")
    return 0


def _cell_payload(cfg: RunConfig, seq_spec, method_cfg) -> dict:
    return {
        "spec": (cfg.num_classes, tuple(cfg.backbone_widths),
                 tuple(cfg.backbone_strides), tuple(cfg.head_widths)),
        "checkpoint": str(cfg.checkpoint),
        "label": method_cfg.label(),
        "sequence": seq_spec.name,
        "seq_dir": str(Path(cfg.data_dir) / seq_spec.name),
        "expect": (cfg.image_size, cfg.image_size, 3, cfg.num_classes),
        "seed": cfg.seed,
        "stream_key": zlib.crc32(seq_spec.name.encode()),
        "out": str(cfg.out),
    }


def _cell_worker(payload: dict) -> tuple:
    """Runs one (sequence, method) cell; returns ('ok', row) or ('fail', msg)."""
    from .model import ModelSpec

    try:
        classes, widths, strides, head = payload["spec"]
        spec = ModelSpec(in_channels=3, num_classes=classes, backbone_widths=widths,
                         backbone_strides=strides, head_widths=head)
        ckpt = load_checkpoint(payload["checkpoint"])
        method_cfg = parse_method_label(payload["label"])
        runner = Runner(spec, ckpt, method_cfg, seed=payload["seed"])
        frames = frames_from_dir(payload["seq_dir"], payload["expect"])
        report = runner.run_sequence(payload["sequence"], frames,
                                     stream_key=payload["stream_key"])
        write_cell_outputs(payload["out"], report)
        return "ok", report.summary_row()
    except DriftAdaptError as exc:
        return "fail", f"{payload['sequence']} {payload['label']}: {exc}"


def cmd_run_tta(cfg: RunConfig, args) -> int:
    ckpt_path = Path(cfg.checkpoint)
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint {ckpt_path} does not exist; "
                          f"run train-source first")
    if not Path(cfg.data_dir).is_dir():
        raise ConfigError(f"data directory {cfg.data_dir} does not exist; "
                          f"run gen-data first")
    payloads = [_cell_payload(cfg, seq, method)
                for seq in cfg.sequence_specs()
                for method in cfg.method_configs()]

    if cfg.parallel == 1:
        outcomes = [_cell_worker(p) for p in payloads]
    else:
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.parallel,
                                 mp_context=context) as pool:
            futures = [pool.submit(_cell_worker, p) for p in payloads]
            outcomes = [f.result() for f in futures]

    rows = []
    failures = []
    for payload, (status, result) in zip(payloads, outcomes):
        if status == "ok":
            rows.append(result)
            print(f"{payload['sequence']} {payload['label']}: "
                  f"overall {result[-1] or 'n/a'}")
        else:
            failures.append(result)
            print(f"FAILED {result}", file=sys.stderr)

    out = Path(cfg.out)
    write_summary_csv(out / "summary.csv", rows)
    print(f"summary {out / 'summary.csv'} ({len(rows)} rows)")
    if failures:
        out.mkdir(parents=True, exist_ok=True)
        (out / "failures.txt").write_text("".join(f + "\n" for f in failures))
        return 1
    return 0


def _grouped(rows: list) -> dict:
    """method label -> {sequence -> row}, preserving first-seen label order."""
    groups = {}
    for row in rows:
        groups.setdefault(row["method"], {})[row["sequence"]] = row
    return groups


def _mean_of(rows, key) -> float | None:
    values = [row[key] for row in rows if row[key] is not None]
    if not values:
        return None
    return sum(values) / len(values)


def _write_csv(path: Path, header: list, rows: list) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_compare(cfg: RunConfig, args) -> int:
    summary_path = Path(args.summary) if args.summary else Path(cfg.out) / "summary.csv"
    if not summary_path.is_file():
        raise ConfigError(f"summary {summary_path} does not exist")
    rows = read_summary_csv(summary_path)
    if not rows:
        raise FormatError(f"summary {summary_path} has no rows")
    groups = _grouped(rows)
    seq_sets = {label: frozenset(cells) for label, cells in groups.items()}
    reference = next(iter(seq_sets.values()))
    for label, seqs in seq_sets.items():
        if seqs != reference:
            raise FormatError(f"method {label!r} covers sequences {sorted(seqs)}, "
                              f"others cover {sorted(reference)}")

    out = Path(args.out_dir) if getattr(args, "out_dir", None) else \
        Path(cfg.out) / "compare"
    method_rows = []
    fraction_cells = {}
    grid_cells = {}
    for label, cells in groups.items():
        method_cfg = parse_method_label(label)
        mean_miou = _mean_of(cells.values(), "miou")
        mean_overall = _mean_of(cells.values(), "overall")
        method_rows.append([label, fmt_real(mean_miou), fmt_real(mean_overall)])
        if method_cfg.method == "ours":
            fraction_cells.setdefault(method_cfg.mask_fraction,
                                      (label, mean_miou, mean_overall))
            grid_cells.setdefault((method_cfg.gamma_hp, method_cfg.alpha_hp),
                                  (label, mean_overall))
    _write_csv(out / "methods.csv", ["method", "miou", "overall"], method_rows)

    if fraction_cells:
        rows_f = [[fmt_real(frac), label, fmt_real(m), fmt_real(o)]
                  for frac, (label, m, o) in sorted(fraction_cells.items())]
        _write_csv(out / "fraction_grid.csv",
                   ["fraction", "method", "miou", "overall"], rows_f)
    if grid_cells:
        rows_g = [[fmt_real(g), fmt_real(a), label, fmt_real(o)]
                  for (g, a), (label, o) in sorted(grid_cells.items(), reverse=True)]
        _write_csv(out / "gamma_alpha_grid.csv",
                   ["gamma", "alpha", "method", "overall"], rows_g)

    if args.baseline:
        base_rows = read_summary_csv(args.baseline)
        base_index = {(r["sequence"], r["method"]): r for r in base_rows}
        ours_index = {(r["sequence"], r["method"]): r for r in rows}
        if set(base_index) != set(ours_index):
            raise FormatError("baseline and summary cover different "
                              "(sequence, method) cells")
        delta_rows = []
        for row in rows:
            base = base_index[(row["sequence"], row["method"])]
            deltas = []
            for field in ("miou", "overall"):
                if row[field] is None or base[field] is None:
                    deltas.append(None)
                else:
                    deltas.append(row[field] - base[field])
            delta_rows.append([row["sequence"], row["method"], fmt_real(deltas[0]),
                               fmt_real(deltas[1])])
        _write_csv(out / "delta.csv",
                   ["sequence", "method", "miou_delta", "overall_delta"], delta_rows)

    print(f"compare tables in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftadapt",
        description="streaming test-time adaptation harness on synthetic drift")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (cmd_gen_data, "write the drift sequences as frame files"),
        "train-source": (cmd_train_source, "train the source model checkpoint"),
        "run-tta": (cmd_run_tta, "stream every (sequence, method) cell"),
        "compare": (cmd_compare, "aggregate summaries into comparison tables"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="override the command's output location")
        p.add_argument("--parallel", type=int, help="worker processes for run-tta")
        p.add_argument("--method", help="run only these method labels "
                                        "(semicolon separated)")
        p.add_argument("--seq", help="run only these sequence names "
                                     "(semicolon separated)")
        if name == "compare":
            p.add_argument("--summary", help="summary CSV to aggregate "
                                             "(default <out>/summary.csv)")
            p.add_argument("--baseline", help="second summary to diff against")
            p.add_argument("--out-dir", dest="out_dir",
                           help="directory for comparison tables")
    return parser


def _overrides(args, command: str) -> dict:
    overrides = {"seed": args.seed, "method": args.method, "seq": args.seq,
                 "parallel": args.parallel}
    if args.out is not None:
        # --out names the thing each command produces
        overrides[{"gen-data": "data_dir", "train-source": "checkpoint"}
                  .get(command, "out")] = args.out
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args, args.command))
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DriftAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
