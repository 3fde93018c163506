"""Command-line front end.

    ticl train  --config run.toml [--seed N] [--lambda F] [--scenario S] [--out DIR]
    ticl eval   --checkpoint PATH --mode task-il|class-il
    ticl ablate --checkpoint PATH
    ticl forget --checkpoint PATH --task N

Exit codes: 0 ok, 2 invalid configuration or request, 3 data error,
4 non-finite numbers during training, 5 unreadable checkpoint.
``TICL_NUM_THREADS`` caps BLAS and numba thread pools.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli

from .autodiff import NonFiniteError, OptimizerConfig
from .autodiff.ops import LabelError
from .checkpoint import CheckpointError, atomic_write, learner_meta, load_checkpoint, save_checkpoint
from .continual import ContinualLearner, TrainConfig, UnknownTaskError, accuracy_on, train_step
from .data import (CIFAR_SIDE, CIFAR_TEST_RECORDS, DataError, LabeledImageSet, PROTOCOLS, ScenarioSpec,
                   StepData, load_cifar100_binary, make_synthetic, read_records, split_scenario)
from .encoder import PRESETS
from .metrics import (AccuracyMatrix, backward_transfer, export_ablation_csv, export_accuracy_csv,
                      export_summary_csv, overall_accuracy, token_ablation_matrix)
from .svg import heatmap, line_chart

log = logging.getLogger("ticl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
THREADS_ENV = "TICL_NUM_THREADS"
CIFAR_TRAIN_FILE, CIFAR_TEST_FILE = "train.bin", "test.bin"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "custom"
    classes_per_step: list[int] = field(default_factory=lambda: [5, 5, 5, 5])
    initial_classes: int = 0
    shuffle_classes: bool = False
    dataset: str = "synthetic"
    data_dir: str = ""
    class_count: int = 20
    per_class: int = 300
    test_per_class: int = 100
    preset: str = "desk"
    lam: float = 1.0
    epochs: int = 5
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    mixup: bool = True
    head_hidden: int = 0
    max_steps: int = 0
    seed: int = 0
    out: str = "runs/default"

    # "lambda" is a keyword, so the field is ``lam`` and only the file/flag name differs
    KEY_ALIASES = {"lambda": "lam"}

    @classmethod
    def keys(cls) -> list[str]:
        inverse = {v: k for k, v in cls.KEY_ALIASES.items()}
        return [inverse.get(f.name, f.name) for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = {}
        for key, value in d.items():
            name = cls.KEY_ALIASES.get(key, key)
            if name not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        inverse = {v: k for k, v in self.KEY_ALIASES.items()}
        return {inverse.get(k, k): v for k, v in dataclasses.asdict(self).items()}

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        types = {f.name: f.type for f in dataclasses.fields(self)}
        for name, typ in types.items():
            v = getattr(self, name)
            if typ == "int":
                need(isinstance(v, (int, np.integer)) and not isinstance(v, bool), f"{name} must be an integer")
            elif typ == "float":
                need(isinstance(v, (int, float)) and not isinstance(v, bool), f"{name} must be a number")
                setattr(self, name, float(v))
            elif typ == "bool":
                need(isinstance(v, bool), f"{name} must be true or false")
            elif typ == "str":
                need(isinstance(v, str), f"{name} must be a string")
        need(isinstance(self.classes_per_step, (list, tuple))
             and all(isinstance(n, int) and n >= 1 for n in self.classes_per_step),
             "classes_per_step must be a list of positive integers")
        self.classes_per_step = [int(n) for n in self.classes_per_step]
        need(self.scenario in (*PROTOCOLS, "custom"), f"scenario must be one of {[*PROTOCOLS, 'custom']}")
        need(self.dataset in ("synthetic", "cifar100"), "dataset must be 'synthetic' or 'cifar100'")
        need(self.preset in PRESETS, f"preset must be one of {sorted(PRESETS)}")
        need(self.optimizer in ("adamw", "sgd"), "optimizer must be 'adamw' or 'sgd'")
        need(self.lam >= 0, "lambda must be >= 0")
        need(self.lr > 0, "lr must be > 0")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1")
        need(self.head_hidden >= 0 and self.max_steps >= 0, "head_hidden and max_steps must be >= 0")
        need(self.per_class >= 1 and self.test_per_class >= 1, "per_class and test_per_class must be >= 1")
        need(bool(self.out), "out must name a directory")
        if self.dataset == "cifar100":
            need(bool(self.data_dir), "cifar100 needs data_dir")
            need(PRESETS[self.preset].image_side == CIFAR_SIDE,
                 f"preset {self.preset!r} takes {PRESETS[self.preset].image_side}px images, CIFAR is {CIFAR_SIDE}px")
        else:
            need(self.class_count >= 2, "class_count must be >= 2")
        try:
            self.scenario_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def total_classes(self) -> int:
        return 100 if self.dataset == "cifar100" else self.class_count

    def scenario_spec(self) -> ScenarioSpec:
        seed = self.seed if self.shuffle_classes else None
        if self.scenario == "custom":
            return ScenarioSpec.custom(self.classes_per_step, self.initial_classes, self.total_classes, seed)
        return ScenarioSpec.protocol(self.scenario, self.total_classes, seed)

    def train_config(self) -> TrainConfig:
        opt = OptimizerConfig(name=self.optimizer, lr=self.lr, weight_decay=self.weight_decay)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lam=self.lam, optimizer=opt,
                           mixup_first_step=self.mixup, seed=self.seed)


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        # nested tables are accepted for readability; keys stay flat
        flat = {}
        for k, v in raw.items():
            if isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        raw = flat
        if raw.get("data_dir") and not Path(raw["data_dir"]).is_absolute():
            raw["data_dir"] = str(path.parent / raw["data_dir"])
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(raw)


# -- data -------------------------------------------------------------------

def _cifar_paths(data_dir: str) -> tuple[Path, Path]:
    d = Path(data_dir)
    train, test = d / CIFAR_TRAIN_FILE, d / CIFAR_TEST_FILE
    for p in (train, test):
        if not p.is_file():
            raise DataError(f"missing CIFAR-100 file {p}")
    return train, test


def load_data(cfg: ExperimentConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    if cfg.dataset == "cifar100":
        return load_cifar100_binary(*_cifar_paths(cfg.data_dir))
    side = PRESETS[cfg.preset].image_side
    return (make_synthetic(cfg.class_count, cfg.per_class, side, cfg.seed, "train"),
            make_synthetic(cfg.class_count, cfg.test_per_class, side, cfg.seed, "test"))


def load_test_data(cfg: ExperimentConfig) -> LabeledImageSet:
    if cfg.dataset == "cifar100":
        return read_records(_cifar_paths(cfg.data_dir)[1], expected=CIFAR_TEST_RECORDS, split="test")
    return make_synthetic(cfg.class_count, cfg.test_per_class, PRESETS[cfg.preset].image_side, cfg.seed, "test")


def build_test_steps(cfg: ExperimentConfig, test: LabeledImageSet, spec: ScenarioSpec) -> dict[int, StepData]:
    views = split_scenario(test, spec, test)
    return {v.index: StepData(test, v, "test") for v in views}


# -- evaluation -------------------------------------------------------------

def evaluate(learner: ContinualLearner, tests: dict[int, StepData], mode: str) -> list[tuple[int, float, int]]:
    """(task, accuracy, samples) for every task still held by ``learner``."""
    if not learner.task_ids:
        raise UnknownTaskError("checkpoint holds no tasks")
    rows = []
    for tid in learner.task_ids:
        data = tests[tid]
        if mode == "task-il":
            acc = accuracy_on(learner, data, tid)
        elif mode == "class-il":
            _, pred = learner.predict_class_il(data.images)
            acc = float(np.mean(pred == data.labels))
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        rows.append((tid, acc, len(data)))
    return rows


def eval_csv(rows: Sequence[tuple[int, float, int]], mode: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "task", "accuracy", "samples"])
    for tid, acc, n in rows:
        w.writerow([mode, tid, f"{acc:.6f}", n])
    total = sum(n for _, _, n in rows)
    w.writerow([mode, "all", f"{sum(a * n for _, a, n in rows) / total:.6f}", total])
    return buf.getvalue()


# -- training ---------------------------------------------------------------

@dataclass
class RunResult:
    learner: ContinualLearner
    matrix: AccuracyMatrix
    tests: dict[int, StepData]
    losses: list[dict]
    files: list[Path]


def losses_csv(losses: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss_clf", "loss_distill", "loss_total"])
    for r in losses:
        w.writerow([r["step"], r["epoch"], f"{r['loss_clf']:.6f}", f"{r['loss_distill']:.6f}", f"{r['loss_total']:.6f}"])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> RunResult:
    """Train every scenario step, evaluating all seen tasks after each one.

    Data is loaded before anything is written, so a data failure leaves no files.
    """
    train, test = load_data(cfg)
    spec = cfg.scenario_spec()
    views = split_scenario(train, spec, test)
    if cfg.max_steps:
        views = views[:cfg.max_steps]
    for v in views:
        if len(v.train_indices) == 0 or len(v.test_indices) == 0:
            raise DataError(f"step {v.index} has no train or test samples")
    tcfg = cfg.train_config()
    learner = ContinualLearner(PRESETS[cfg.preset], lam=cfg.lam, seed=cfg.seed, head_hidden=cfg.head_hidden)
    tests = {v.index: StepData(test, v, "test") for v in views}
    matrix = AccuracyMatrix.empty(len(views), [len(tests[v.index]) for v in views])
    extra = {"experiment": cfg.to_dict(), "scenario": spec.to_dict()}
    files: list[Path] = []
    losses: list[dict] = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for v in views:
        learner.begin_step(v.classes)
        history = train_step(learner, StepData(train, v), tcfg)
        losses += [{"step": v.index, **h} for h in history]
        for j in range(1, v.index + 1):
            matrix.record(j, v.index, accuracy_on(learner, tests[j], j))
        log.info("step %d: overall %.4f", v.index, overall_accuracy(matrix, v.index))
        if out is not None:
            path = out / "checkpoints" / f"step_{v.index:02d}.ticl"
            save_checkpoint(path, learner, extra)
            files.append(path)
    if out is not None:
        files += write_run_outputs(out, matrix, losses)
    return RunResult(learner, matrix, tests, losses, files)


def write_run_outputs(out: Path, matrix: AccuracyMatrix, losses: list[dict]) -> list[Path]:
    steps = range(1, matrix.steps + 1)
    overall = [overall_accuracy(matrix, t) for t in steps]
    bwt = [np.nan] + [100.0 * backward_transfer(matrix, t) for t in steps if t >= 2]
    per_task = {f"task {j}": [matrix.values[j - 1, k - 1] if k >= j else np.nan for k in steps] for j in steps}
    outputs = {
        "accuracy.csv": export_accuracy_csv(matrix),
        "summary.csv": export_summary_csv(matrix),
        "losses.csv": losses_csv(losses),
        "accuracy.svg": line_chart({"overall": overall, **per_task}, "Task-IL accuracy per step", ylabel="accuracy"),
        "bwt.svg": line_chart({"BWT": bwt}, "Backward transfer per step", ylabel="BWT (points)"),
    }
    written = []
    for name, text in outputs.items():
        atomic_write(out / name, text.encode("utf-8"))
        written.append(out / name)
    return written


# -- commands ---------------------------------------------------------------

def _checkpoint_context(path: str, data_dir: str | None):
    learner, meta = load_checkpoint(path)
    exp = dict(meta.get("experiment", {}))
    if data_dir:
        exp["data_dir"] = data_dir
    cfg = ExperimentConfig.from_dict(exp)
    spec = ScenarioSpec.from_dict(meta["scenario"])
    return learner, meta, cfg, spec


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k.replace("-", "_"), None) for k in ExperimentConfig.keys()}
    if overrides.get("classes_per_step") is not None:
        overrides["classes_per_step"] = _int_list(overrides["classes_per_step"])
    cfg = load_config(args.config, overrides)
    out = Path(cfg.out)
    result = run_experiment(cfg, out)
    sys.stdout.write(export_summary_csv(result.matrix))
    log.info("wrote %d files to %s", len(result.files), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    learner, _, cfg, spec = _checkpoint_context(args.checkpoint, args.data_dir)
    tests = build_test_steps(cfg, load_test_data(cfg), spec)
    text = eval_csv(evaluate(learner, tests, args.mode), args.mode)
    if args.out:
        atomic_write(Path(args.out), text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    learner, _, cfg, spec = _checkpoint_context(args.checkpoint, args.data_dir)
    if len(learner.task_ids) < 2:
        raise ConfigError("token ablation needs a checkpoint with at least 2 tasks")
    tests = build_test_steps(cfg, load_test_data(cfg), spec)
    tasks, grid = token_ablation_matrix(learner, {t: tests[t] for t in learner.task_ids})
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    text = export_ablation_csv(tasks, grid)
    atomic_write(out / "ablation.csv", text.encode("utf-8"))
    atomic_write(out / "ablation.svg", heatmap(grid, tasks, tasks, "Token x task accuracy").encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_forget(args) -> int:
    learner, meta = load_checkpoint(args.checkpoint)
    learner.forget_task(args.task)
    src = Path(args.checkpoint)
    dest = Path(args.out) if args.out else src.with_name(f"{src.stem}-forget{args.task}{src.suffix}")
    meta = dict(meta)
    meta.update(learner_meta(learner, {k: meta[k] for k in ("experiment", "scenario") if k in meta}))
    meta["forgotten"] = sorted({*meta.get("forgotten", []), args.task})
    save_checkpoint(dest, learner, meta=meta)
    print(dest)
    return EXIT_OK


def _int_list(text) -> list[int]:
    if isinstance(text, list):
        return text
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ticl", description="Task-token continual learning without rehearsal.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train every step of a scenario")
    train.add_argument("--config", help="TOML experiment file")
    kinds = {"int": int, "float": float, "bool": _bool, "str": str}
    for f, key in zip(dataclasses.fields(ExperimentConfig), ExperimentConfig.keys()):
        kind = kinds.get(f.type, str)
        train.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None,
                           help=f"override {key} (default {f.default if f.default is not dataclasses.MISSING else '5,5,5,5'})")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--mode", choices=("task-il", "class-il"), default="task-il")
    ev.add_argument("--data-dir")
    ev.add_argument("--out", help="also write the CSV here")

    ab = sub.add_parser("ablate", help="token x task accuracy grid")
    ab.add_argument("--checkpoint", required=True)
    ab.add_argument("--data-dir")
    ab.add_argument("--out", help="output directory (default: the checkpoint's)")

    fg = sub.add_parser("forget", help="drop one task's token and head")
    fg.add_argument("--checkpoint", required=True)
    fg.add_argument("--task", type=int, required=True)
    fg.add_argument("--out", help="destination checkpoint")
    return parser


@contextlib.contextmanager
def thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits

    from . import _kernels
    if _kernels.active is _kernels.numba_impl:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    with threadpool_limits(limits=n):
        yield


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "forget": cmd_forget}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return COMMANDS[args.command](args)
    except (ConfigError, UnknownTaskError) as exc:
        code, msg = EXIT_CONFIG, exc.args[0] if exc.args else str(exc)
    except (DataError, LabelError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except NonFiniteError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except CheckpointError as exc:
        code, msg = EXIT_CHECKPOINT, str(exc)
    print(f"ticl: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
