"""Command-line interface.

Subcommands: ``generate`` (synthetic datasets), ``train``, ``eval``,
``refine`` (field + one refinement step for a structure pair), and
``verify`` (the executable check suites).

Settings resolve in order: built-in defaults < config file (--config,
plain ``key = value`` lines) < environment variables (``TFK_<KEY>``) <
command-line flags.  Every command is deterministic given its settings;
reruns produce byte-identical outputs.  Exit codes: 0 success, 1
usage/config error, 2 verification failure, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import refinement, systems, verify
from .net import Model, ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .refinement import StructurePair, apply_refinement, make_refinement_dataset, refinement_field
from .systems import AtomSystem, LJParams, generate_lj_clusters, gravity_toy, relax_lj
from .training import (
    DivergenceError,
    MetricsReport,
    TrainConfig,
    history_to_csv,
    metric_suite,
    naive_baselines,
    suggest_output_scale,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VERIFY = 2
EXIT_DIVERGED = 3

ENV_PREFIX = "TFK_"

TASKS = ("forces", "refinement", "gravity")
TASK_DELTAS = {"forces": 10.0, "refinement": 1.0, "gravity": 1.0}

METRIC_FIELDS = (
    "tensor_mae",
    "magnitude_mae",
    "angle_mean",
    "pearson_magnitude",
    "relative_tensor_error",
)


class ConfigError(Exception):
    """Bad usage, bad config values, or missing inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        raise ConfigError(message)


# name -> (type, default, help); None defaults mean "required if used"
_OPTION_TABLE: dict[str, tuple[type, object, str]] = {
    "task": (str, "forces", "task kind: forces | refinement | gravity"),
    "lmax": (int, 1, "maximum tensor order carried by the network (0, 1 or 2)"),
    "delta": (float, None, "Huber loss width in task units (default per task)"),
    "lr": (float, 0.1, "learning rate"),
    "batches": (int, 5000, "total training batches (one system per batch)"),
    "seed": (int, 0, "base random seed"),
    "replicates": (int, 1, "independently seeded training repeats"),
    "k": (int, 50, "neighbourhood size (convolution or refinement field)"),
    "out": (str, None, "output directory"),
    "optimizer": (str, "sgd", "optimizer: sgd | adam"),
    "val_every": (int, 250, "batches between validation passes"),
    "filters": (str, "24,12,1", "block widths, comma separated"),
    "n_systems": (int, 200, "number of systems to generate"),
    "atoms": (int, 30, "atoms per generated system"),
    "box": (float, 11.0, "generation box edge, Angstroms"),
    "mask_fraction": (float, 0.0, "fraction of atoms marked input-only"),
    "sigma": (float, 0.5, "coordinate noise for refinement candidates, Angstroms"),
    "n_targets": (int, 21, "number of refinement target structures"),
    "candidates": (int, 6, "candidate structures per refinement target"),
    "relax_steps": (int, 150, "energy-descent steps for refinement targets"),
    "data": (str, None, "dataset directory (contains manifest.txt)"),
    "checkpoint": (str, None, "model checkpoint path"),
    "split": (str, "test", "dataset split to evaluate"),
    "candidate": (str, None, "candidate structure file"),
    "target": (str, None, "target (ground-truth) structure file"),
    "step": (float, 0.5, "refinement step size in (0, 1]"),
    "level": (str, "quick", "verification level: quick | full"),
    "inject_fault": (str, None, "deliberate fault for verify (order1-bias)"),
    "resume": (str, None, "checkpoint to resume training from"),
}

_COMMAND_OPTIONS = {
    "generate": (
        "task", "out", "seed", "n_systems", "atoms", "box", "mask_fraction",
        "sigma", "n_targets", "candidates", "relax_steps", "k",
    ),
    "train": (
        "task", "data", "out", "lmax", "delta", "lr", "batches", "seed",
        "replicates", "optimizer", "val_every", "filters", "k", "resume",
    ),
    "eval": ("task", "data", "checkpoint", "split", "out", "seed"),
    "refine": ("candidate", "target", "k", "step", "out"),
    "verify": ("level", "seed", "inject_fault"),
}


def _cast(name: str, raw: str):
    typ = _OPTION_TABLE[name][0]
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None


def _read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _OPTION_TABLE:
            raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
        values[key] = val
    return values


def _resolve(args: argparse.Namespace, command: str) -> dict:
    file_cfg = _read_config_file(args.config) if args.config else {}
    values = {}
    for name in _COMMAND_OPTIONS[command]:
        value = _OPTION_TABLE[name][1]
        if name in file_cfg:
            value = _cast(name, file_cfg[name])
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            value = _cast(name, env)
        flag = getattr(args, name, None)
        if flag is not None:
            value = flag
        values[name] = value
    if values.get("task") is not None and values["task"] not in TASKS:
        raise ConfigError(f"unknown task {values['task']!r}; expected one of {TASKS}")
    if values.get("delta", "absent") is None:
        values["delta"] = TASK_DELTAS[values["task"]]
    return values


def _require(values: dict, *names: str) -> None:
    for name in names:
        if values.get(name) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    """Write text files under out_dir and record them in produced_files.txt."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for rel, content in files.items():
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content)
    listing = sorted(files)
    manifest = out_dir / "produced_files.txt"
    existing = []
    if manifest.exists():
        existing = [ln for ln in manifest.read_text().splitlines() if ln.strip()]
    merged = sorted(set(existing) | set(listing))
    manifest.write_text("\n".join(merged) + "\n")


def _split_counts(n: int, weights: tuple[int, ...]) -> list[int]:
    total = sum(weights)
    counts = [max(1, (n * w) // total) for w in weights]
    counts[0] += n - sum(counts)
    if min(counts) < 1:
        raise ConfigError(f"cannot split {n} items into {len(weights)} nonempty parts")
    return counts


def _splits_for(n: int, weights: tuple[int, ...]) -> list[str]:
    counts = _split_counts(n, weights)
    names = ["train", "val", "test"]
    out = []
    for name, c in zip(names, counts):
        out.extend([name] * c)
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(values: dict) -> int:
    _require(values, "out")
    out_dir = Path(values["out"])
    task = values["task"]
    seed = values["seed"]
    if task == "forces":
        data = generate_lj_clusters(
            values["n_systems"],
            values["atoms"],
            box=values["box"],
            seed=seed,
            mask_fraction=values["mask_fraction"],
        )
        splits = _splits_for(len(data), (2, 1, 1))
        manifest = systems.save_systems(out_dir, data, splits)
    elif task == "gravity":
        data = gravity_toy(values["n_systems"], values["atoms"], seed=seed)
        splits = _splits_for(len(data), (2, 1, 1))
        manifest = systems.save_systems(out_dir, data, splits)
    else:  # refinement
        if values["sigma"] <= 0:
            raise ConfigError(
                "degenerate dataset: refinement generation needs sigma > 0 "
                "(all target vectors would be zero)"
            )
        params = LJParams()
        targets = []
        for ti in range(values["n_targets"]):
            cluster = generate_lj_clusters(
                1, values["atoms"], box=values["box"], params=params, seed=seed + 1000 + ti
            )[0]
            relaxed = relax_lj(
                cluster.positions, cluster.elements, params, steps=values["relax_steps"]
            )
            targets.append(
                AtomSystem(relaxed, cluster.elements, None, None, f"ref-{ti:04d}")
            )
        pairs = make_refinement_dataset(
            targets,
            values["sigma"],
            values["candidates"],
            seed=seed,
            k=values["k"],
        )
        target_splits = _splits_for(len(targets), (13, 4, 4))
        splits = []
        for ti in range(len(targets)):
            splits.extend([target_splits[ti]] * values["candidates"])
        manifest = refinement.save_pairs(out_dir, pairs, splits)
    n_files = len(list((out_dir / "systems").iterdir()))
    listing = sorted(
        str(p.relative_to(out_dir))
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != "produced_files.txt"
    )
    (out_dir / "produced_files.txt").write_text("\n".join(listing) + "\n")
    print(f"generated {task} dataset: {n_files} files, manifest {manifest}")
    return EXIT_OK


def _load_task_systems(values: dict) -> tuple[dict[str, list[AtomSystem]], str]:
    _require(values, "data")
    manifest = Path(values["data"]) / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(f"no manifest.txt under {values['data']}")
    entries = systems.read_manifest(manifest)
    task = values.get("task") or "forces"
    if entries and entries[0][0].endswith(".candidate.pdb"):
        task = "refinement"
        pair_sets = refinement.load_pairs(manifest)
        data = {
            split: [pair.candidate for pair in pairs]
            for split, pairs in pair_sets.items()
        }
    else:
        data = systems.load_systems(manifest)
    return data, task


def _vocabulary_from(data: dict[str, list[AtomSystem]]) -> tuple[str, ...]:
    symbols = set()
    for split_systems in data.values():
        for s in split_systems:
            symbols.update(s.elements)
    return tuple(sorted(symbols))


def _metrics_csv_rows(rows: list[tuple[str, MetricsReport]]) -> str:
    header = "predictor," + ",".join(METRIC_FIELDS) + ",n_atoms,n_angle_skipped"
    lines = [header]
    for name, m in rows:
        d = m.as_dict()
        cells = [name] + [_fmt(d[f]) for f in METRIC_FIELDS]
        cells += [str(m.n_atoms), str(m.n_angle_skipped)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _pooled_predictions(model: Model, data: list[AtomSystem]):
    preds_all, targs_all = [], []
    for system in data:
        preds = forward(model, system)
        mask = system.predict_mask
        if system.targets is None:
            raise ConfigError(f"system {system.identifier!r} has no targets")
        preds_all.append(preds[mask])
        targs_all.append(system.targets[mask])
    return np.concatenate(preds_all), np.concatenate(targs_all)


def cmd_train(values: dict) -> int:
    _require(values, "out")
    data, task = _load_task_systems(values)
    if "train" not in data or "val" not in data:
        raise ConfigError("dataset needs 'train' and 'val' splits")
    out_dir = Path(values["out"])
    try:
        filters = tuple(int(x) for x in str(values["filters"]).split(","))
    except ValueError:
        raise ConfigError(f"bad filter list: {values['filters']!r}") from None

    vocabulary = _vocabulary_from(data)
    output_scale = suggest_output_scale(data["train"])
    files: dict[str, str] = {}
    summaries: list[tuple[int, float, MetricsReport]] = []

    start_batch = 0
    resume_state: dict[str, np.ndarray] = {}
    resume_model = None
    if values["resume"]:
        resume_model, extras, meta = load_checkpoint(values["resume"])
        start_batch = int(meta.get("batch_index", 0))
        resume_state = extras
        if values["replicates"] != 1:
            raise ConfigError("resume supports a single replicate")

    for rep in range(values["replicates"]):
        rep_seed = values["seed"] + rep
        if resume_model is not None:
            model = resume_model
        else:
            model = build_model(
                ModelConfig(
                    lmax=values["lmax"],
                    filters=filters,
                    vocabulary=vocabulary,
                    n_neighbors=values["k"],
                    seed=rep_seed,
                    output_scale=output_scale,
                )
            )
        config = TrainConfig(
            task=task,
            lmax=values["lmax"],
            learning_rate=values["lr"],
            huber_delta=values["delta"],
            total_batches=values["batches"],
            seed=rep_seed,
            optimizer=values["optimizer"],
            val_every=values["val_every"],
        )
        try:
            result = train(
                model, data["train"], data["val"], config,
                start_batch=start_batch, optimizer_state=resume_state,
            )
        except DivergenceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        best = result.best_model()
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            out_dir / f"checkpoint_seed{rep_seed}.ckpt",
            best,
            meta={"best_batch": result.best_batch, "val_loss": result.best_val_loss,
                  "task": task, "delta": values["delta"]},
        )
        save_checkpoint(
            out_dir / f"last_seed{rep_seed}.ckpt",
            result.model,
            extras=result.optimizer_state,
            meta={"batch_index": start_batch + config.total_batches, "task": task,
                  "delta": values["delta"]},
        )
        files[f"history_seed{rep_seed}.csv"] = history_to_csv(result.history)
        preds, targs = _pooled_predictions(best, data["val"])
        metrics = metric_suite(preds, targs)
        summaries.append((rep_seed, result.best_val_loss, metrics))
        print(
            f"replicate seed={rep_seed}: best val loss {result.best_val_loss:.6g} "
            f"at batch {result.best_batch}"
        )

    best_idx = int(np.argmin([s[1] for s in summaries]))
    lines = ["metric,best,mean,sem"]
    for fname in METRIC_FIELDS:
        vals = np.array([getattr(m, fname) for _, _, m in summaries], dtype=float)
        best_val = getattr(summaries[best_idx][2], fname)
        mean = float(np.mean(vals))
        sem = (
            float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float("nan")
        )
        lines.append(f"{fname},{_fmt(best_val)},{_fmt(mean)},{_fmt(sem)}")
    val_losses = np.array([s[1] for s in summaries], dtype=float)
    sem = (
        float(np.std(val_losses, ddof=1) / np.sqrt(len(val_losses)))
        if len(val_losses) > 1
        else float("nan")
    )
    lines.append(
        f"val_loss,{_fmt(val_losses[best_idx])},{_fmt(float(val_losses.mean()))},{_fmt(sem)}"
    )
    files["summary.csv"] = "\n".join(lines) + "\n"
    _write_outputs(out_dir, files)
    return EXIT_OK


def cmd_eval(values: dict) -> int:
    _require(values, "checkpoint", "out")
    model, _, meta = load_checkpoint(values["checkpoint"])
    data, task = _load_task_systems(values)
    split = values["split"]
    if split not in data:
        raise ConfigError(f"split {split!r} not present in dataset")
    preds, targs = _pooled_predictions(model, data[split])
    model_metrics = metric_suite(preds, targs)

    train_ref = None
    if "train" in data:
        train_mags = np.concatenate(
            [np.linalg.norm(s.targets[s.predict_mask], axis=1) for s in data["train"]]
        )
        train_ref = float(train_mags.mean())
    rows = [
        ("model", model_metrics),
        ("mean_magnitude", naive_baselines(targs, "mean_magnitude", reference_magnitude=train_ref)),
        ("random_direction", naive_baselines(targs, "random_direction", seed=values["seed"])),
        ("zero", naive_baselines(targs, "zero")),
    ]

    target_mags = np.linalg.norm(targs, axis=1)
    if preds.ndim == 2:
        pred_mags = np.linalg.norm(preds, axis=1)
        dots = np.einsum("ij,ij->i", preds, targs)
        defined = (pred_mags > 1e-9) & (target_mags > 1e-9)
        angles = np.degrees(
            np.arccos(np.clip(dots[defined] / (pred_mags[defined] * target_mags[defined]), -1, 1))
        )
        mag_err = np.abs(pred_mags - target_mags)
    else:
        pred_mags = np.abs(preds)
        angles = np.array([])
        mag_err = np.abs(pred_mags - target_mags)
        defined = np.zeros(len(preds), dtype=bool)

    scatter = ["true_magnitude,predicted_magnitude"]
    scatter += [f"{_fmt(t)},{_fmt(p)}" for t, p in zip(target_mags, pred_mags)]
    hist_lines = ["bin_start_deg,bin_end_deg,count"]
    counts, edges = np.histogram(angles, bins=np.arange(0.0, 185.0, 5.0))
    for i, c in enumerate(counts):
        hist_lines.append(f"{edges[i]:g},{edges[i + 1]:g},{int(c)}")
    pairs_lines = ["angle_deg,abs_magnitude_error"]
    pairs_lines += [
        f"{_fmt(a)},{_fmt(e)}" for a, e in zip(angles, mag_err[defined])
    ]

    files = {
        "metrics.csv": _metrics_csv_rows(rows),
        "scatter.csv": "\n".join(scatter) + "\n",
        "angle_hist.csv": "\n".join(hist_lines) + "\n",
        "angle_vs_magnitude_error.csv": "\n".join(pairs_lines) + "\n",
    }
    _write_outputs(Path(values["out"]), files)
    print(
        f"eval[{split}] ({task}): tensor {model_metrics.tensor_mae:.5g}, "
        f"magnitude {model_metrics.magnitude_mae:.5g}, "
        f"angle {model_metrics.angle_mean:.5g} deg, "
        f"pearson {model_metrics.pearson_magnitude:.4g}"
    )
    return EXIT_OK


def cmd_refine(values: dict) -> int:
    _require(values, "candidate", "target", "out")
    for key in ("candidate", "target"):
        if not Path(values[key]).exists():
            raise ConfigError(f"file not found: {values[key]}")
    candidate = systems.parse_structure(
        Path(values["candidate"]).read_text(), Path(values["candidate"]).stem
    )
    target = systems.parse_structure(
        Path(values["target"]).read_text(), Path(values["target"]).stem
    )
    pair = StructurePair(candidate, target)
    field = refinement_field(pair, k=values["k"])
    refined = apply_refinement(candidate, field, step=values["step"])
    files = {
        "field.csv": systems.format_vectors_csv(
            candidate.elements, field.vectors, field.degenerate
        ),
        "refined.pdb": systems.write_structure(refined),
    }
    _write_outputs(Path(values["out"]), files)
    mean_dev = float(np.mean(np.linalg.norm(field.vectors, axis=1)))
    print(f"mean local deviation {mean_dev:.6g} A over {candidate.n_atoms} atoms")
    return EXIT_OK


def cmd_verify(values: dict) -> int:
    try:
        results = verify.run_checks(
            values["level"], seed=values["seed"], fault=values["inject_fault"]
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for r in results:
        print(r.line())
    n_failed = sum(not r.passed for r in results)
    print(f"{len(results) - n_failed}/{len(results)} checks passed")
    return EXIT_OK if n_failed == 0 else EXIT_VERIFY


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> _Parser:
    parser = _Parser(prog="tfk", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, option_names in _COMMAND_OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key = value settings file")
        for name in option_names:
            typ, default, help_text = _OPTION_TABLE[name]
            flag = "--" + name.replace("_", "-")
            p.add_argument(flag, type=typ, default=None, help=f"{help_text} (default: {default})")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        values = _resolve(args, args.command)
        handler = {
            "generate": cmd_generate,
            "train": cmd_train,
            "eval": cmd_eval,
            "refine": cmd_refine,
            "verify": cmd_verify,
        }[args.command]
        return handler(values)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
