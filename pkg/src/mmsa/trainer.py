"""Pre-training, fine-tuning, embedding export and the binary checkpoint format."""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, Molecule
from .encoders import GraphBatch, batch_from_molecules
from .metrics import MetricReport, rmse, roc_auc
from .model import LOSS_TERMS, MMSAModel, PretrainConfig
from .nn import Linear, Module
from .tensor import AdamState, Tape, adam_step, backward, no_tape

MAGIC = b"MMSA"
FORMAT_VERSION = 1
CLASSIFICATION = "classification"
REGRESSION = "regression"


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class MissingModalityError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: PretrainConfig
    params: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    rng_state: dict | None = None
    label_stats: dict | None = None
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "label_stats": self.label_stats,
            "extra": self.extra,
            "params": [[name, list(arr.shape)] for name, arr in self.params.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        out.write(head)
        for arr in self.params.values():
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            out.write(struct.pack("<Q", len(blob)))
            out.write(blob)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic bytes)")
        if len(raw) < 12:
            raise CheckpointError("checkpoint truncated in header")
        version, head_len = struct.unpack_from("<II", raw, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        pos = 12 + head_len
        if len(raw) < pos:
            raise CheckpointError("checkpoint truncated in header")
        try:
            head = json.loads(raw[12:pos])
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        params = OrderedDict()
        for name, shape in head["params"]:
            if len(raw) < pos + 8:
                raise CheckpointError(f"checkpoint truncated before parameter {name}")
            (n,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            expected = 8 * int(np.prod(shape, dtype=np.int64))
            if n != expected or len(raw) < pos + n:
                raise CheckpointError(f"checkpoint truncated or corrupt at parameter {name}")
            params[name] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=pos).astype(np.float64).reshape(shape)
            pos += n
        if pos != len(raw):
            raise CheckpointError("trailing bytes after last parameter")
        return cls(PretrainConfig.from_dict(head["config"]), params, head["epoch"], head["rng_state"],
                   head["label_stats"], head.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path, expect: PretrainConfig | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expect is not None:
        diff = {k: (getattr(ckpt.config, k), getattr(expect, k))
                for k in PretrainConfig.ARCH_FIELDS if getattr(ckpt.config, k) != getattr(expect, k)}
        if diff:
            raise ConfigMismatchError(f"checkpoint architecture differs from config: {diff}")
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> MMSAModel:
    model = MMSAModel(ckpt.config)
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as exc:
        raise ConfigMismatchError(str(exc)) from None
    return model


def make_checkpoint(model: MMSAModel, epoch: int = 0, rng: np.random.Generator | None = None,
                    label_stats: dict | None = None) -> Checkpoint:
    params = OrderedDict((k, v.copy()) for k, v in model.state_dict().items())
    state = None if rng is None else rng.bit_generator.state
    return Checkpoint(model.config, params, epoch, state, label_stats)


def check_modalities(mols: Sequence[Molecule], need_labels: bool = True) -> None:
    for i, m in enumerate(mols):
        if m.image is None:
            raise MissingModalityError(f"molecule {i} ({m.id or m.smiles}) has no image")
        if not m.coords:
            raise MissingModalityError(f"molecule {i} ({m.id or m.smiles}) has no 3-D coordinates")
        if need_labels and (m.y_geom is None or m.y_prop is None):
            raise MissingModalityError(f"molecule {i} ({m.id or m.smiles}) lacks geometry/property labels")


def label_statistics(mols: Sequence[Molecule]) -> dict:
    g = np.stack([m.y_geom for m in mols])
    p = np.stack([m.y_prop for m in mols])
    sd = lambda a: np.where(a.std(axis=0) > 1e-12, a.std(axis=0), 1.0)
    return {"geom_mean": g.mean(axis=0).tolist(), "geom_std": sd(g).tolist(),
            "prop_mean": p.mean(axis=0).tolist(), "prop_std": sd(p).tolist()}


def batch_labels(mols: Sequence[Molecule], stats: dict | None) -> tuple[np.ndarray, np.ndarray]:
    g = np.stack([m.y_geom for m in mols])
    p = np.stack([m.y_prop for m in mols])
    if stats:
        g = (g - np.array(stats["geom_mean"])) / np.array(stats["geom_std"])
        p = (p - np.array(stats["prop_mean"])) / np.array(stats["prop_std"])
    return g, p


def epoch_batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle; a tail of one molecule is folded into the previous batch."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch] for i in range(0, n, batch)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def pretrain(dataset: Dataset | Sequence[Molecule], config: PretrainConfig = PretrainConfig(),
             log_path: str | Path | None = None, model: MMSAModel | None = None,
             grad_norms: dict | None = None) -> tuple[Checkpoint, list[dict]]:
    """Optimise the overall loss; returns the final checkpoint and per-epoch log rows.

    ``grad_norms``, if given, is filled with the largest gradient norm seen
    for every parameter block.
    """
    mols = list(dataset.molecules if isinstance(dataset, Dataset) else dataset)
    if len(mols) < 2:
        raise ValueError("pre-training needs at least two molecules")
    check_modalities(mols)
    model = model if model is not None else MMSAModel(config)
    model.train(True)
    stats = label_statistics(mols) if config.normalize_labels else None
    names, params = zip(*model.named_parameters())
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    neg_rng = np.random.default_rng([config.seed, 2])
    log: list[dict] = []
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            totals = dict.fromkeys(LOSS_TERMS, 0.0)
            count = 0
            for idx in epoch_batches(len(mols), config.batch, rng):
                chunk = [mols[i] for i in idx]
                yg, yp = batch_labels(chunk, stats)
                with Tape() as tape:
                    out = model.losses(batch_from_molecules(chunk), yg, yp, neg_rng)
                grads = backward(tape, out.L_overall, params)
                g_list = [grads[p] for p in params]
                if grad_norms is not None:
                    for name, g in zip(names, g_list):
                        grad_norms[name] = max(grad_norms.get(name, 0.0), float(np.linalg.norm(g)))
                adam_step(adam, params, g_list)
                for k in LOSS_TERMS:
                    totals[k] += getattr(out, k).item() * len(idx)
                count += len(idx)
            row = {"epoch": epoch + 1, **{k: totals[k] / count for k in LOSS_TERMS}}
            log.append(row)
            if sink:
                sink.write(json.dumps(row, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    model.train(False)
    return make_checkpoint(model, config.epochs, rng, stats), log


class TaskModel(Module):
    """Backbone producing the unified embedding plus a linear task head."""

    def __init__(self, backbone: MMSAModel, seed: int, n_out: int = 1):
        self.backbone = backbone
        self.head = Linear(np.random.default_rng([seed, 3]), backbone.config.d_c, n_out)

    def __call__(self, batch: GraphBatch) -> T.Tensor:
        return self.head(self.backbone.embed(batch))


@dataclass
class FinetuneResult:
    task: str
    metric: str
    value: float
    seed: int
    pretrained: bool


def _task_targets(mols: Sequence[Molecule], label: int, task: str) -> np.ndarray:
    y = np.array([np.nan if m.labels is None else m.labels[label] for m in mols], dtype=np.float64)
    present = y[~np.isnan(y)]
    if task == CLASSIFICATION and not np.all(np.isin(present, (0.0, 1.0))):
        raise ValueError("classification task needs labels in {0, 1}")
    if task not in (CLASSIFICATION, REGRESSION):
        raise ValueError(f"unknown task {task!r}")
    return y


def task_loss(pred: T.Tensor, y: np.ndarray, task: str) -> T.Tensor:
    """Mean over present labels of BCE-with-logits or squared error."""
    mask = ~np.isnan(y)
    if not mask.any():
        return T.Tensor(0.0)
    y0 = np.where(mask, y, 0.0)
    if task == CLASSIFICATION:
        per = T.softplus(pred) - pred * y0
    else:
        d = pred - y0
        per = d * d
    return T.tsum(per * mask.astype(np.float64)) * (1.0 / mask.sum())


def predict(model: TaskModel, mols: Sequence[Molecule], batch: int = 64) -> np.ndarray:
    outs = []
    model.train(False)
    with no_tape():
        for i in range(0, len(mols), batch):
            outs.append(model(batch_from_molecules(mols[i:i + batch])).data)
    return np.concatenate(outs, axis=0)


def finetune(checkpoint: Checkpoint | None, dataset: Dataset, task: str = CLASSIFICATION, label: str | int = 0,
             epochs: int = 100, seed: int = 0, lr: float = 0.001, batch: int = 32,
             config: PretrainConfig | None = None) -> tuple[TaskModel, FinetuneResult]:
    """Full fine-tune of the backbone plus a linear head; scores the test split.

    With ``checkpoint=None`` the backbone is freshly initialised from
    ``config`` and ``seed`` (the no-pre-training control).
    """
    if dataset.splits is None:
        raise ValueError("fine-tuning needs a dataset with train/test splits")
    li = dataset.label_index(label)
    mols = list(dataset.molecules)
    check_modalities(mols, need_labels=False)
    y_all = _task_targets(mols, li, task)
    if checkpoint is not None:
        backbone = model_from_checkpoint(checkpoint)
    else:
        backbone = MMSAModel((config or PretrainConfig()).replace(seed=seed))
    model = TaskModel(backbone, seed)
    train = dataset.indices("train")
    test = dataset.indices("test")
    if not train or not test:
        raise ValueError("train and test splits must both be non-empty")
    params = model.parameters()
    adam = AdamState(lr=lr)
    rng = np.random.default_rng([seed, 4])
    model.train(True)
    for _ in range(epochs):
        for idx in epoch_batches(len(train), batch, rng):
            chunk = [mols[train[i]] for i in idx]
            y = y_all[[train[i] for i in idx]][:, None]
            with Tape() as tape:
                loss = task_loss(model(batch_from_molecules(chunk)), y, task)
            grads = backward(tape, loss, params)
            adam_step(adam, params, [grads[p] for p in params])
    pred = predict(model, [mols[i] for i in test])[:, 0]
    y_test = y_all[test]
    keep = ~np.isnan(y_test)
    if task == CLASSIFICATION:
        value, metric = roc_auc(pred[keep], y_test[keep]), "roc_auc"
    else:
        value, metric = rmse(pred[keep], y_test[keep]), "rmse"
    return model, FinetuneResult(task, metric, float(value), seed, checkpoint is not None)


def finetune_seeds(checkpoint: Checkpoint | None, dataset: Dataset, seeds: Sequence[int] = range(5),
                   **kw) -> MetricReport:
    results = [finetune(checkpoint, dataset, seed=s, **kw)[1] for s in seeds]
    return MetricReport.from_values(results[0].metric, [r.value for r in results], list(seeds))


def embed(checkpoint: Checkpoint, dataset: Dataset | Sequence[Molecule], batch: int = 64) -> np.ndarray:
    mols = list(dataset.molecules if isinstance(dataset, Dataset) else dataset)
    check_modalities(mols, need_labels=False)
    model = model_from_checkpoint(checkpoint)
    rows = []
    with no_tape():
        for i in range(0, len(mols), batch):
            rows.append(model.embed(batch_from_molecules(mols[i:i + batch])).data)
    if not rows:
        return np.zeros((0, checkpoint.config.d_c))
    return np.concatenate(rows, axis=0)
