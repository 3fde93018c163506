"""Task-incremental learner with per-task tokens and token-wise feature distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer, OptimizerConfig, Parameter, Tape, Tensor, no_grad
from .data import StepData
from .encoder import EncoderConfig, FeatureExtractor, Linear, Module

log = logging.getLogger(__name__)

TOKEN_INIT_STD = 0.02


class ContinualError(RuntimeError):
    pass


class RehearsalViolation(ContinualError):
    """A sample from outside the current task reached the training path."""


class StepInProgressError(ContinualError):
    pass


class UnknownTaskError(ContinualError, KeyError):
    pass


@dataclass
class TaskToken:
    param: Parameter
    task_id: int

    @property
    def frozen(self) -> bool:
        return self.param.frozen

    @property
    def values(self) -> np.ndarray:
        return self.param.data


class ClassifierHead(Module):
    """Per-task classifier over the task's classes: affine, or one GELU hidden layer."""

    def __init__(self, task_id: int, classes: Sequence[int], dim: int, rng, dtype=np.float32,
                 hidden: int = 0, std: float = 0.02):
        self.task_id = task_id
        self.classes = [int(c) for c in classes]
        if hidden:
            self.layers = [Linear(dim, hidden, rng, std, dtype), Linear(hidden, len(self.classes), rng, std, dtype)]
        else:
            self.layers = [Linear(dim, len(self.classes), rng, std, dtype)]
        for name, p in self.named_parameters():
            p.name = f"head.{task_id}.{name}"

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def __call__(self, u: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                u = ad.gelu(u)
            u = layer(u)
        return u

    def local_labels(self, labels: np.ndarray) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise RehearsalViolation(
                f"label {exc.args[0]} is not in task {self.task_id}'s classes") from None


@dataclass
class LossBreakdown:
    loss_clf: Tensor
    loss_distill: Tensor
    loss_total: Tensor

    def values(self) -> dict[str, float]:
        return {"loss_clf": self.loss_clf.item(), "loss_distill": self.loss_distill.item(),
                "loss_total": self.loss_total.item()}


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lam: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mixup_first_step: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class ContinualLearner:
    """Student extractor, frozen teacher snapshot, one token and head per task."""

    def __init__(self, config: EncoderConfig, lam: float = 1.0, seed: int = 0, dtype=np.float32,
                 head_hidden: int = 0, squared_distance: bool = False, eval_batch: int = 256):
        self.config = config
        self.lam = float(lam)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.head_hidden = head_hidden
        self.squared_distance = squared_distance
        self.eval_batch = eval_batch
        self.student = FeatureExtractor(config, seed=seed, dtype=dtype)
        self.teacher: FeatureExtractor | None = None
        self.tokens: list[TaskToken] = []
        self.heads: list[ClassifierHead] = []
        self.step = 0
        self.in_training = False
        self.learned_classes: set[int] = set()

    # -- state machine ---------------------------------------------------

    def _rng(self, *extra: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *extra])

    def begin_step(self, classes: Sequence[int]) -> None:
        if self.in_training:
            raise StepInProgressError("begin_step called while a step is training")
        classes = [int(c) for c in classes]
        if not classes or len(set(classes)) != len(classes):
            raise ValueError("class list must be non-empty and duplicate-free")
        overlap = self.learned_classes.intersection(classes)
        if overlap:
            raise ValueError(f"classes {sorted(overlap)} were already learned")
        if self.step >= 1:
            self.teacher = self.student.copy(frozen=True)
        for tok in self.tokens:
            tok.param.freeze()
        for head in self.heads:
            head.freeze()
        self.step += 1
        t = self.step
        if self.tokens:
            init = self.tokens[-1].param.data.copy()
        else:
            init = self._rng(t, 101).normal(0.0, TOKEN_INIT_STD, size=self.config.embed_dim)
        self.tokens.append(TaskToken(Parameter(init, name=f"token.{t}", dtype=self.dtype), t))
        self.heads.append(ClassifierHead(t, classes, self.config.embed_dim, self._rng(t, 102),
                                         self.dtype, self.head_hidden))
        self.learned_classes.update(classes)

    @property
    def current_token(self) -> TaskToken:
        if not self.tokens or self.tokens[-1].task_id != self.step:
            raise ContinualError("no active step; call begin_step first")
        return self.tokens[-1]

    @property
    def current_head(self) -> ClassifierHead:
        if not self.heads or self.heads[-1].task_id != self.step:
            raise ContinualError("no active step; call begin_step first")
        return self.heads[-1]

    @property
    def task_ids(self) -> list[int]:
        return [tok.task_id for tok in self.tokens]

    def trainable_parameters(self) -> list[Parameter]:
        return self.student.parameters() + [self.current_token.param] + self.current_head.parameters()

    # -- losses ------------------------------------------------------------

    def compute_losses(self, images: np.ndarray, labels: np.ndarray,
                       soft_targets: np.ndarray | None = None) -> LossBreakdown:
        """Classification loss on the current task plus distillation over all earlier tokens."""
        images = np.asarray(images, dtype=self.dtype)
        if len(images) == 0:
            raise ValueError("empty batch")
        head = self.current_head
        local = head.local_labels(labels)
        u = self.student(images, self.current_token.param)
        logits = head(u)
        loss_clf = ad.cross_entropy(logits, local if soft_targets is None else soft_targets)

        previous = [tok for tok in self.tokens[:-1]]
        if self.teacher is None or not previous:
            loss_distill = Tensor(np.zeros((), dtype=self.dtype))
        else:
            b = len(images)
            tiled = np.concatenate([images] * len(previous))
            old_tokens = ad.concat(
                [ad.broadcast_to(tok.param.reshape(1, -1), (b, self.config.embed_dim)) for tok in previous])
            with no_grad():
                u_teacher = self.teacher(tiled, old_tokens)
            u_student = self.student(tiled, old_tokens)
            loss_distill = None
            for i in range(len(previous)):
                part = ad.feature_distance(u_teacher[i * b:(i + 1) * b], u_student[i * b:(i + 1) * b],
                                           squared=self.squared_distance)
                loss_distill = part if loss_distill is None else loss_distill + part
        loss_total = loss_clf + loss_distill * self.lam
        return LossBreakdown(loss_clf, loss_distill, loss_total)

    # -- inference -----------------------------------------------------------

    def _index(self, task_id: int) -> int:
        for i, tok in enumerate(self.tokens):
            if tok.task_id == task_id:
                return i
        raise UnknownTaskError(f"task {task_id} is unknown or was forgotten")

    def logits(self, images: np.ndarray, task_id: int, token_id: int | None = None) -> np.ndarray:
        """Head ``task_id`` logits on features extracted with token ``token_id`` (default: same task)."""
        head = self.heads[self._index(task_id)]
        tok = self.tokens[self._index(task_id if token_id is None else token_id)]
        images = np.asarray(images, dtype=self.dtype)
        out = []
        with no_grad():
            for s in range(0, len(images), self.eval_batch):
                out.append(head(self.student(images[s:s + self.eval_batch], tok.param)).data)
        if not out:
            return np.zeros((0, len(head.classes)), dtype=self.dtype)
        return np.concatenate(out)

    def predict_task_il(self, images: np.ndarray, task_id: int) -> np.ndarray:
        head = self.heads[self._index(task_id)]
        return np.asarray(head.classes)[np.argmax(self.logits(images, task_id), axis=1)]

    def class_il_logits(self, images: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
        """Concatenated logits of every remaining head and the (task, class) of each column."""
        if not self.heads:
            raise UnknownTaskError("no tasks remain")
        blocks, columns = [], []
        for head in self.heads:
            blocks.append(self.logits(images, head.task_id))
            columns += [(head.task_id, c) for c in head.classes]
        return np.concatenate(blocks, axis=1), columns

    def predict_class_il(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, columns = self.class_il_logits(images)
        best = np.argmax(logits, axis=1)
        cols = np.asarray(columns, dtype=np.int64).reshape(-1, 2)
        return cols[best, 0], cols[best, 1]

    # -- forgetting ----------------------------------------------------------

    def forget_task(self, task_id: int) -> None:
        """Drop the token and head of ``task_id``; the extractor is untouched."""
        i = self._index(task_id)
        if self.in_training and task_id == self.step:
            raise StepInProgressError("cannot forget the task that is being trained")
        del self.tokens[i]
        del self.heads[i]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"fe.{n}", p.data) for n, p in self.student.named_parameters()]
        out += [(tok.param.name, tok.param.data) for tok in self.tokens]
        for head in self.heads:
            out += [(p.name, p.data) for p in head.parameters()]
        return out


def mix_pair(xa: np.ndarray, ya: np.ndarray, xb: np.ndarray, yb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight mix of two images and their label distributions."""
    return 0.5 * xa + 0.5 * xb, 0.5 * ya + 0.5 * yb


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def apply_mixup(images: np.ndarray, targets: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pair each sample with a partner from a seeded derangement and mix at 0.5/0.5.

    ``targets`` are per-sample class distributions ``[B, K]``.
    """
    if len(images) < 2:
        raise ValueError("mix-up needs a batch of at least 2")
    partner = random_derangement(len(images), rng)
    x, y = mix_pair(images, targets, images[partner], targets[partner])
    return x.astype(images.dtype), y


def train_step(learner: ContinualLearner, data: StepData, config: TrainConfig) -> list[dict[str, float]]:
    """Train the current step; returns per-epoch mean losses."""
    if data.step != learner.step:
        log.debug("training step %d on data tagged step %d", learner.step, data.step)
    learner.lam = float(config.lam)
    params = learner.trainable_parameters()
    batches_per_epoch = -(-len(data) // config.batch_size)
    opt = Optimizer(params, config.optimizer, total_steps=config.epochs * batches_per_epoch)
    head = learner.current_head
    use_mixup = config.mixup_first_step and learner.step == 1
    history = []
    learner.in_training = True
    try:
        for epoch in range(config.epochs):
            sums = np.zeros(3)
            count = 0
            for images, labels in data.batches(config.batch_size, seed=hash_seed(config.seed, learner.step, epoch)):
                soft = None
                local = head.local_labels(labels)
                if use_mixup and len(images) >= 2:
                    onehot = np.eye(len(head.classes))[local]
                    rng = np.random.default_rng([config.seed, learner.step, epoch, count, 7])
                    images, soft = apply_mixup(images, onehot, rng)
                with Tape() as tape:
                    losses = learner.compute_losses(images, labels, soft)
                opt.zero_grad()
                tape.backward(losses.loss_total)
                opt.step()
                vals = losses.values()
                sums += [vals["loss_clf"], vals["loss_distill"], vals["loss_total"]]
                count += 1
            mean = sums / max(count, 1)
            history.append({"epoch": epoch + 1, "loss_clf": mean[0], "loss_distill": mean[1], "loss_total": mean[2]})
            log.info("step %d epoch %d: clf %.4f distill %.4f total %.4f",
                     learner.step, epoch + 1, mean[0], mean[1], mean[2])
    finally:
        learner.in_training = False
    return history


def hash_seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31))


def accuracy_on(learner: ContinualLearner, data: StepData, task_id: int, token_id: int | None = None) -> float:
    """Task-IL accuracy of ``task_id``'s head on ``data`` (optionally with another task's token)."""
    if len(data) == 0:
        raise ValueError("no test samples")
    head = learner.heads[learner._index(task_id)]
    pred = np.asarray(head.classes)[np.argmax(learner.logits(data.images, task_id, token_id), axis=1)]
    return float(np.mean(pred == data.labels))
