"""Joint classification + batch-hard triplet training, Adam, and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .audio import load_cqt
from .autodiff import Parameter, Tape, Tensor
from .model import ForwardOutput, ModelConfig, ResNetIbnModel, build_model

log = logging.getLogger(__name__)

LOSS_MODES = ("cls_only", "tri_only", "joint_naive", "joint_bnneck")
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "ce_loss", "triplet_loss", "total_loss", "val_map", "gem_p")

# anchors dropped from the triplet mean because their label had no positive or no negative
warning_counts: Counter = Counter()


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0004
    batch_size: int = 32
    alpha: float = 0.3
    P: int = 8
    K_per_class: int = 4
    epochs: int = 50
    crop_len: int = 80
    seed: int = 0
    loss_mode: str = "joint_bnneck"

    @classmethod
    def for_preset(cls, preset: str, **kw) -> "TrainConfig":
        kw.setdefault("crop_len", 400 if preset == "full" else 80)
        return cls(**kw)

    def validate(self) -> None:
        if self.P * self.K_per_class != self.batch_size:
            raise ValueError("P * K_per_class must equal batch_size")
        if self.alpha <= 0:
            raise ValueError("triplet margin must be positive")
        if self.crop_len < 8:
            raise ValueError("crop_len must be at least 8 frames")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


# --------------------------------------------------------------------------
# dataset


@dataclass
class Entry:
    id: str
    feature: Path
    clique: str
    split: str
    label: int = -1


class LabeledDataset:
    """Clique-labelled recordings read from a JSON-lines manifest.

    Class indices cover the cliques of the training split, in sorted order.
    Features are loaded lazily and cached.
    """

    def __init__(self, entries: Sequence[Entry]):
        self.entries = list(entries)
        cliques = sorted({e.clique for e in self.entries if e.split == "train"})
        self.classes = {c: i for i, c in enumerate(cliques)}
        for e in self.entries:
            e.label = self.classes.get(e.clique, -1)
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_manifest(cls, path) -> "LabeledDataset":
        path = Path(path)
        entries = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                feat = Path(row["feature"])
                if not feat.is_absolute():
                    feat = path.parent / feat
                entries.append(Entry(str(row["id"]), feat, str(row["clique"]), row["split"]))
            except KeyError as e:
                raise ValueError(f"{path}:{n}: missing field {e}") from None
        return cls(entries)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def labels(self) -> dict[str, str]:
        return {e.id: e.clique for e in self.entries}

    def indices(self, split: str | None = None) -> list[int]:
        return [i for i, e in enumerate(self.entries) if split in (None, "all") or e.split == split]

    def features(self, i: int) -> np.ndarray:
        e = self.entries[i]
        if e.id not in self._cache:
            self._cache[e.id] = load_cqt(e.feature).values
        return self._cache[e.id]

    def items(self, split: str | None = None) -> list[tuple[str, np.ndarray]]:
        return [(self.entries[i].id, self.features(i)) for i in self.indices(split)]


def pk_sample(dataset: LabeledDataset, P: int, K_per_class: int, rng: np.random.Generator, split: str = "train"):
    """P distinct cliques, K entries each (with replacement only for small cliques).

    Returns (entry indices, labels), both of length P * K_per_class.
    """
    by_label: dict[int, list[int]] = {}
    for i in dataset.indices(split):
        by_label.setdefault(dataset.entries[i].label, []).append(i)
    labels = sorted(by_label)
    if len(labels) < P:
        raise ValueError(f"need at least {P} cliques in split {split!r}, found {len(labels)}")
    chosen = rng.choice(len(labels), size=P, replace=False)
    idx, lab = [], []
    for c in chosen:
        members = by_label[labels[c]]
        pick = rng.choice(len(members), size=K_per_class, replace=len(members) < K_per_class)
        idx += [members[j] for j in pick]
        lab += [labels[c]] * K_per_class
    return idx, np.array(lab, dtype=np.int64)


def crop_or_pad(values: np.ndarray, crop_len: int, rng: np.random.Generator | None = None, train: bool = True) -> np.ndarray:
    """Train: random contiguous ``crop_len`` frames, zero-padded on the right if short.
    Eval: the full spectrogram unchanged."""
    if not train:
        return values
    T = values.shape[1]
    if T >= crop_len:
        start = int(rng.integers(0, T - crop_len + 1)) if T > crop_len else 0
        return values[:, start : start + crop_len]
    return np.pad(values, ((0, 0), (0, crop_len - T)))


# --------------------------------------------------------------------------
# losses


def triplet_loss_batch_hard(f: Tensor, labels, alpha: float = 0.3) -> Tensor:
    """Mean over anchors of [d_p - d_n + alpha]_+ with the batch's hardest pairs.

    d_p is the largest Euclidean distance to a same-label sample, d_n the
    smallest to a different-label one. Anchors lacking either are excluded
    and counted in ``warning_counts``.
    """
    X = f.data
    labels = np.asarray(labels)
    N = X.shape[0]
    diff = X[:, None, :].astype(np.float64) - X[None, :, :]
    D = np.sqrt((diff**2).sum(-1))
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(N, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(1) & neg_mask.any(1)
    if (~valid).any():
        warning_counts["triplet_excluded_anchors"] += int((~valid).sum())
        log.warning("triplet loss: %d anchors without a positive or negative", int((~valid).sum()))
    anchors = np.flatnonzero(valid)
    if anchors.size == 0:
        return Tensor(np.zeros((), dtype=X.dtype))

    pos, neg = ad.decide(
        lambda: (np.where(pos_mask, D, -np.inf).argmax(1)[anchors], np.where(neg_mask, D, np.inf).argmin(1)[anchors])
    )
    vp = X[anchors] - X[pos]
    vn = X[anchors] - X[neg]
    dp = np.sqrt((vp**2).sum(1))
    dn = np.sqrt((vn**2).sum(1))
    hinge = dp - dn + alpha
    active = ad.decide(lambda: hinge > 0)
    loss = np.asarray(np.where(active, hinge, 0.0).mean(), dtype=X.dtype)

    def backward(g):
        scale = (g / anchors.size) * active
        up = vp * (scale / np.where(dp > 0, dp, 1.0))[:, None]
        un = vn * (scale / np.where(dn > 0, dn, 1.0))[:, None]
        dX = np.zeros_like(X)
        np.add.at(dX, anchors, up - un)
        np.add.at(dX, pos, -up)
        np.add.at(dX, neg, un)
        return (dX,)

    return ad._emit(loss, (f,), backward)


def total_loss(output: ForwardOutput, labels, config: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """Unweighted sum of the active terms; returns the loss and its float parts.

    joint_bnneck: CE on logits from f_c plus triplet on f_t. joint_naive uses
    the same terms on a model without the neck, where the classifier reads
    f_t directly.
    """
    mode = config.loss_mode
    parts: dict[str, float] = {}
    terms = []
    if mode in ("cls_only", "joint_naive", "joint_bnneck"):
        ce = ad.softmax_cross_entropy(output.logits, labels)
        parts["ce"] = float(ce.data)
        terms.append(ce)
    if mode in ("tri_only", "joint_naive", "joint_bnneck"):
        tri = triplet_loss_batch_hard(output.f_t, labels, config.alpha)
        parts["triplet"] = float(tri.data)
        terms.append(tri)
    if not terms:
        raise ValueError(f"unknown loss mode {mode!r}")
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    parts["total"] = float(total.data)
    return total, parts


# --------------------------------------------------------------------------
# optimizer


def adam_step(params: Sequence[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam; GeM exponents are clamped to [1, 10] afterwards."""
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g.astype(p.data.dtype, copy=False)
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        mhat = p.adam_m / (1 - beta1**t)
        vhat = p.adam_v / (1 - beta2**t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        if p.name.startswith("gem."):
            np.clip(p.data, 1.0, 10.0, out=p.data)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    metrics: dict
    arrays: dict[str, np.ndarray]
    adam: dict | None = None

    @classmethod
    def capture(cls, model: ResNetIbnModel, config: TrainConfig, epoch: int, metrics: dict, with_optimizer: bool = False) -> "Checkpoint":
        arrays = {k: v.astype(np.float32, copy=True) for k, v in model.state_arrays().items()}
        adam = None
        if with_optimizer:
            adam = {
                n: {"m": p.adam_m.astype(np.float32), "v": p.adam_v.astype(np.float32), "step": p.step_count}
                for n, p in model.params.items()
            }
        return cls(model.config, config, epoch, dict(metrics), arrays, adam)

    def build_model(self) -> ResNetIbnModel:
        model = build_model(self.model_config, seed=0)
        model.load_state_arrays(self.arrays)
        if self.adam:
            for n, st in self.adam.items():
                p = model.params[n]
                p.adam_m, p.adam_v, p.step_count = st["m"].copy(), st["v"].copy(), int(st["step"])
        return model


def save_checkpoint(ckpt: Checkpoint, directory) -> None:
    """Write ``manifest.json`` and ``params.bin`` (float32 little-endian)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blobs = list(ckpt.arrays.items())
    if ckpt.adam:
        for n, st in ckpt.adam.items():
            blobs += [(f"adam_m/{n}", st["m"]), (f"adam_v/{n}", st["v"])]
    table, chunks, offset = {}, [], 0
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table[name] = {"shape": list(arr.shape), "byte_offset": offset, "byte_len": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": asdict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "parameters": table,
    }
    if ckpt.adam:
        manifest["adam_steps"] = {n: st["step"] for n, st in ckpt.adam.items()}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (d / "params.bin").write_bytes(b"".join(chunks))


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    mpath, bpath = d / "manifest.json", d / "params.bin"
    if not mpath.is_file() or not bpath.is_file():
        raise CheckpointError(f"{d}: missing manifest.json or params.bin")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{mpath}: invalid JSON ({e})") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{d}: unsupported checkpoint version {manifest.get('format_version')!r}")
    blob = bpath.read_bytes()
    arrays, adam_m, adam_v = {}, {}, {}
    for name, info in manifest["parameters"].items():
        start, n = info["byte_offset"], info["byte_len"]
        shape = tuple(info["shape"])
        if start + n > len(blob):
            raise CheckpointError(f"{bpath}: truncated at {name}")
        if n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: byte length {n} does not match shape {shape}")
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start).reshape(shape).astype(np.float32)
        if name.startswith("adam_m/"):
            adam_m[name[7:]] = arr
        elif name.startswith("adam_v/"):
            adam_v[name[7:]] = arr
        else:
            arrays[name] = arr
    adam = None
    if adam_m:
        steps = manifest.get("adam_steps", {})
        adam = {n: {"m": adam_m[n], "v": adam_v[n], "step": steps.get(n, 0)} for n in adam_m}
    ckpt = Checkpoint(
        ModelConfig.from_dict(manifest["model_config"]),
        TrainConfig(**manifest["train_config"]),
        manifest["epoch"],
        manifest.get("metrics", {}),
        arrays,
        adam,
    )
    try:
        ckpt.build_model()
    except ValueError as e:
        raise CheckpointError(f"{d}: {e}") from e
    return ckpt


def resolve_checkpoint_dir(path) -> Path:
    """Accept either a checkpoint dir or a training output dir (prefers best/)."""
    p = Path(path)
    if (p / "manifest.json").is_file():
        return p
    for sub in ("best", "final"):
        if (p / sub / "manifest.json").is_file():
            return p / sub
    raise CheckpointError(f"{p}: no checkpoint found")


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list[dict] = field(default_factory=list)


def validation_map(model: ResNetIbnModel, dataset: LabeledDataset) -> float:
    """Validation queries against train+val references, self excluded."""
    from .retrieval import embed_all, evaluate

    val = dataset.indices("val")
    if not val:
        return float("nan")
    refs = embed_all(model, dataset.items("train") + dataset.items("val"))
    queries = refs.subset([dataset.entries[i].id for i in val])
    try:
        return evaluate(queries, refs, dataset.labels(), exclude_self=True).map
    except ValueError:
        return float("nan")


def train(
    model: ResNetIbnModel,
    dataset: LabeledDataset,
    config: TrainConfig,
    out_dir=None,
    validate: bool = True,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """PK-sample, crop, forward, loss, backward, Adam; one row of metrics per epoch."""
    config.validate()
    if config.loss_mode == "joint_naive" and model.config.bnneck:
        raise ValueError("joint_naive needs a model built with bnneck=False")
    rng = np.random.default_rng(config.seed)
    n_train = len(dataset.indices("train"))
    steps = math.ceil(n_train / config.batch_size)

    init = Checkpoint.capture(model, config, 0, {})
    best, best_map = init, -np.inf
    rows: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        sums = Counter()
        for _ in range(steps):
            idx, labels = pk_sample(dataset, config.P, config.K_per_class, rng)
            batch = np.stack([crop_or_pad(dataset.features(i), config.crop_len, rng) for i in idx])
            model.zero_grad()
            with Tape() as tape:
                out = model.forward(batch[:, None], training=True)
                loss, parts = total_loss(out, labels, config)
            if not np.isfinite(parts["total"]):
                ids = [dataset.entries[i].id for i in idx]
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}: parts={parts} batch={ids}")
            tape.backward(loss)
            adam_step(list(model.parameters()), config.lr)
            sums.update(parts)
        row = {
            "epoch": epoch,
            "ce_loss": sums["ce"] / steps,
            "triplet_loss": sums["triplet"] / steps,
            "total_loss": sums["total"] / steps,
            "val_map": validation_map(model, dataset) if validate else float("nan"),
            "gem_p": float(np.mean([p.data[0] for p in model.gem_params])),
        }
        rows.append(row)
        log.info("epoch %d %s", epoch, row)
        if on_epoch:
            on_epoch(row)
        if row["val_map"] > best_map:
            best_map = row["val_map"]
            best = Checkpoint.capture(model, config, epoch, row)

    final = Checkpoint.capture(model, config, config.epochs, rows[-1] if rows else {})
    if best_map == -np.inf:
        best = final
    result = TrainResult(final, best, rows)
    if out_dir is not None:
        write_training_output(result, out_dir)
    return result


def write_training_output(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    save_checkpoint(result.final, out / "final")
    save_checkpoint(result.best, out / "best")
    with open(out / "log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in result.log:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
