"""Training procedures: the dual-head end-to-end defense, the standard
baseline, the two-stage isolate/unlearn baseline, and the ablation variants.

One trainer runs single-threaded; paired runs share per-epoch minibatch
seeds so ablation deltas isolate the variant. Per-epoch second-head losses
feed the loss ledger: trained samples are captured at their minibatch step,
everything else gets an evaluation-only pass at epoch end.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import SGD, backward, scale, softmax, softmax_cross_entropy
from .container import fmt_float, fmt_ints, parse_ints
from .forge import Dataset, PoisonedDataset, round_count
from .ledger import LossLedger, Partition, PartitionConfig, partition
from .metrics import cross_entropy_values, detection_metrics, recovery_precision
from .models import (
    BackboneSpec,
    DetectorModel,
    DualHeadModel,
    SingleHeadModel,
    export_main,
    image_backbone,
    load_checkpoint,
    save_checkpoint,
    series_backbone,
)

VARIANTS = ("e2abl", "standard", "abl", "unlearn-top1", "no-control", "two-model")

# minibatch rng streams, shared across variants for paired comparisons
_STREAM_SECOND_FULL = 0
_STREAM_CLEAN = 1
_STREAM_RECOVERY = 2
_STREAM_SECOND = 3
_STREAM_STANDARD = 4
_STREAM_UNLEARN = 5
_DETECTOR_SEED_OFFSET = 101


@dataclass(frozen=True)
class TrainConfig:
    warm_start_epochs: int = 2
    total_epochs: int = 60
    lr_warm: float = 0.1
    lr_main: float = 0.01
    lr_second: float = 0.005
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    recovery_enabled: bool = True
    cold_start: bool = False
    attach_block: int = 2

    def __post_init__(self):
        if not self.cold_start and self.warm_start_epochs < 2:
            raise ValueError("warm start needs at least 2 epochs (the drop score needs 2 history points)")
        if self.total_epochs <= self.history_epochs:
            raise ValueError(
                f"total_epochs {self.total_epochs} must exceed the {self.history_epochs} history epochs"
            )
        for name in ("lr_warm", "lr_main", "lr_second"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def history_epochs(self) -> int:
        """Epochs spent building loss history before the first partition."""
        return 2 if self.cold_start else self.warm_start_epochs


@dataclass(frozen=True)
class AblConfig:
    isolation_epochs: int = 10
    finetune_epochs: int = 30
    unlearn_epochs: int = 10
    unlearn_lr: float = 1e-4
    isolation_rate: float = 0.01
    unlearn_stop_loss: float = 6.0

    def __post_init__(self):
        if not 0.0 < self.isolation_rate < 0.5:
            raise ValueError("isolation rate must be in (0, 0.5)")
        if self.unlearn_lr <= 0:
            raise ValueError("unlearn_lr must be positive")


# per-epoch metrics table columns (missing entries stay empty in the CSV)
ROW_COLUMNS = (
    "epoch",
    "phase",
    "loss_main",
    "loss_second",
    "loss_recovery",
    "train_accuracy",
    "clean_size",
    "suspect_size",
    "inferred_class",
    "vote_share",
    "precision_clean",
    "precision_core",
    "recall_suspect",
    "recovery_precision",
)


@dataclass
class RunRecord:
    variant: str
    config: TrainConfig
    seed: int
    epoch_rows: list[dict]
    partitions: dict[int, Partition]
    partition_log: list[str]
    model: SingleHeadModel | None
    complete: bool
    abl: AblConfig | None = None
    stage2_model: SingleHeadModel | None = None  # isolate/unlearn baseline, pre-unlearning snapshot

    @property
    def first_partition_epoch(self) -> int:
        return self.config.history_epochs + 1

    def detection_epoch(self, post_warm_epoch: int = 10) -> int:
        """Overall epoch id of the n-th partitioned epoch."""
        return self.config.history_epochs + post_warm_epoch


def default_backbone(data: Dataset) -> BackboneSpec:
    shape = data.features.shape[1:]
    if data.kind == "image":
        return image_backbone(data.num_classes, shape)
    return series_backbone(data.num_classes, shape)


def epoch_batches(indices: np.ndarray, batch_size: int, seed: int, epoch: int, stream: int):
    """Seeded shuffle of an index set into minibatches; the stream id keeps
    paired variant runs on identical orders."""
    rng = np.random.default_rng([seed, epoch, stream])
    perm = rng.permutation(np.asarray(indices))
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def _train_pass(forward_fn, opt: SGD, x, y, batches, capture=None):
    """One pass of cross-entropy minimization; returns (mean loss, running accuracy)."""
    total = 0.0
    hits = 0
    count = 0
    for batch in batches:
        logits = forward_fn(x[batch])
        per, mean = softmax_cross_entropy(logits, y[batch])
        opt.zero_grad()
        backward(mean)
        opt.step()
        if capture is not None:
            capture[batch] = per.data
        total += float(per.data.sum())
        hits += int((logits.data.argmax(axis=1) == y[batch]).sum())
        count += len(batch)
    if count == 0:
        return None, None
    return total / count, hits / count


def _unlearn_pass(forward_fn, opt: SGD, x, y, batches, stop_loss: float):
    """Gradient ascent on cross-entropy (minimize the negated loss).

    Batches whose loss already exceeds ``stop_loss`` are skipped so the
    ascent erases the target correlation without blowing up the weights.
    """
    total = 0.0
    count = 0
    for batch in batches:
        logits = forward_fn(x[batch])
        per, mean = softmax_cross_entropy(logits, y[batch])
        total += float(per.data.sum())
        count += len(batch)
        if mean.item() >= stop_loss:
            continue
        opt.zero_grad()
        backward(scale(mean, -1.0))
        opt.step()
    return total / count if count else None


def warm_start_second_head(model, data: PoisonedDataset, config: TrainConfig,
                           ledger: LossLedger, optimizer: SGD | None = None):
    """Train only the second head on the full dataset for the warm epochs,
    recording per-sample losses at their minibatch steps."""
    opt = optimizer or SGD(model.second_parameters(), config.lr_warm, config.momentum)
    x, y = data.data.features, data.data.labels
    n = len(data)
    epoch_losses = []
    for epoch in range(1, config.warm_start_epochs + 1):
        capture = np.full(n, np.nan)
        batches = epoch_batches(np.arange(n), config.batch_size, config.seed, epoch, _STREAM_SECOND_FULL)
        loss, _ = _train_pass(model.forward_second, opt, x, y, batches, capture)
        ledger.record_epoch_losses(epoch, capture)
        epoch_losses.append(loss)
    return opt, epoch_losses


def e2abl_epoch(model, data: PoisonedDataset, ledger: LossLedger, config: TrainConfig,
                epoch: int, opt_main: SGD, opt_second: SGD,
                predictions: tuple[np.ndarray, np.ndarray] | None = None,
                recovery_mode: str = "recover",
                unlearn_stop_loss: float = 6.0,
                main_forward=None, second_forward=None):
    """One defense epoch: partition, clean pass, recovery pass, suspect pass,
    epoch-end loss recording. Returns (partition, row dict, next predictions)."""
    x, y = data.data.features, data.data.labels
    n = len(data)
    main_forward = main_forward or model.forward_main
    second_forward = second_forward or model.forward_second
    if predictions is None:
        logits1, logits2 = model.predict_dual_logits(x)
        predictions = logits2.argmax(axis=1), softmax(logits1)
    preds2, probs1 = predictions

    part = partition(ledger, config.partition, preds2, probs1)

    clean_batches = epoch_batches(part.clean_indices, config.batch_size, config.seed, epoch, _STREAM_CLEAN)
    loss_main, _ = _train_pass(main_forward, opt_main, x, y, clean_batches)

    loss_recovery = None
    if recovery_mode == "recover" and config.recovery_enabled:
        y_rect = y.copy()
        y_rect[part.suspect_indices] = part.rectified_labels
        rec_batches = epoch_batches(part.suspect_indices, config.batch_size, config.seed, epoch, _STREAM_RECOVERY)
        loss_recovery, _ = _train_pass(main_forward, opt_main, x, y_rect, rec_batches)
    elif recovery_mode == "unlearn-core":
        core_batches = epoch_batches(part.core_indices, config.batch_size, config.seed, epoch, _STREAM_RECOVERY)
        loss_recovery = _unlearn_pass(main_forward, opt_main, x, y, core_batches, unlearn_stop_loss)

    capture = np.full(n, np.nan)
    suspect_batches = epoch_batches(part.suspect_indices, config.batch_size, config.seed, epoch, _STREAM_SECOND)
    loss_second, _ = _train_pass(second_forward, opt_second, x, y, suspect_batches, capture)

    # epoch-end evaluation: ledger entries for the clean subset plus the
    # predictions the next epoch's partition will consume
    logits1, logits2 = model.predict_dual_logits(x)
    per2 = cross_entropy_values(logits2, y)
    capture[part.clean_indices] = per2[part.clean_indices]
    ledger.record_epoch_losses(epoch, capture)
    next_predictions = (logits2.argmax(axis=1), softmax(logits1))
    train_accuracy = float((logits1.argmax(axis=1) == y).mean())

    row = {
        "epoch": epoch,
        "phase": "train",
        "loss_main": loss_main,
        "loss_second": loss_second,
        "loss_recovery": loss_recovery,
        "train_accuracy": train_accuracy,
        "clean_size": len(part.clean_indices),
        "suspect_size": len(part.suspect_indices),
        "inferred_class": part.inferred_backdoor_class,
        "vote_share": part.vote_share,
    }
    return part, row, next_predictions


def _dual_eval(model, features, second_eval=None):
    """(main logits, second logits) without recording a graph."""
    if second_eval is None:
        return model.predict_dual_logits(features)
    main_logits = model.predict_logits(features)
    second_logits = second_eval(features)
    return main_logits, second_logits


def _attach_ground_truth(row: dict, part: Partition, data: PoisonedDataset):
    if not data.poison_mask.any():
        return
    p_clean, p_core, r_suspect = detection_metrics(part, data.poison_mask)
    row["precision_clean"] = p_clean
    row["precision_core"] = p_core
    row["recall_suspect"] = r_suspect
    row["recovery_precision"] = recovery_precision(part, data.poison_mask, data.true_labels)


def _partition_log_line(epoch: int, part: Partition) -> str:
    return (
        f"epoch={epoch} clean={len(part.clean_indices)} suspect={len(part.suspect_indices)} "
        f"inferred={part.inferred_backdoor_class} vote_share={part.vote_share:.6f}"
    )


def _train_dual_variant(data: PoisonedDataset, config: TrainConfig, variant: str,
                        recovery_mode: str, separate_detector: bool,
                        out_dir: str | None = None) -> RunRecord:
    x, y = data.data.features, data.data.labels
    n = len(data)
    spec = default_backbone(data.data)

    if separate_detector:
        main_net = SingleHeadModel(spec, config.seed)
        detector = DetectorModel(spec, config.attach_block, config.seed + _DETECTOR_SEED_OFFSET)
        main_forward = main_net.forward
        second_forward = detector.forward_second
        second_eval = lambda feats: _predict_second(detector, feats)
        opt_main = SGD(main_net.parameters(), config.lr_main, config.momentum)
        opt_second = SGD(detector.second_parameters(), config.lr_warm, config.momentum)
        eval_model = _TwoModelView(main_net, detector)
    else:
        net = DualHeadModel(spec, config.attach_block, config.seed)
        main_forward = net.forward_main
        second_forward = net.forward_second
        second_eval = None
        opt_main = SGD(net.main_parameters(), config.lr_main, config.momentum)
        opt_second = SGD(net.second_parameters(), config.lr_warm, config.momentum)
        eval_model = net

    ledger = LossLedger(n)
    rows: list[dict] = []
    partitions: dict[int, Partition] = {}
    plog: list[str] = []
    record = RunRecord(variant, config, config.seed, rows, partitions, plog, None, complete=False)

    warm_model = eval_model if not separate_detector else detector
    if config.cold_start:
        # no dedicated warm phase: both heads see the full data until the
        # drop score has two history points, then partitioning begins
        opt_second.lr = config.lr_second
        for epoch in range(1, config.history_epochs + 1):
            capture = np.full(n, np.nan)
            batches = epoch_batches(np.arange(n), config.batch_size, config.seed, epoch, _STREAM_SECOND_FULL)
            loss_second, _ = _train_pass(second_forward, opt_second, x, y, batches, capture)
            main_batches = epoch_batches(np.arange(n), config.batch_size, config.seed, epoch, _STREAM_CLEAN)
            loss_main, acc = _train_pass(main_forward, opt_main, x, y, main_batches)
            ledger.record_epoch_losses(epoch, capture)
            rows.append({"epoch": epoch, "phase": "cold", "loss_main": loss_main,
                         "loss_second": loss_second, "train_accuracy": acc})
    else:
        warm_start_second_head(warm_model, data, config, ledger, opt_second)
        for epoch_id, row_epoch in enumerate(ledger.epoch_ids, start=0):
            pass
        for epoch in range(1, config.warm_start_epochs + 1):
            rows.append({"epoch": epoch, "phase": "warm"})
        opt_second.lr = config.lr_second

    logits1, logits2 = _dual_eval(eval_model, x, second_eval)
    predictions = (logits2.argmax(axis=1), softmax(logits1))

    try:
        for epoch in range(config.history_epochs + 1, config.total_epochs + 1):
            part, row, predictions = e2abl_epoch(
                eval_model, data, ledger, config, epoch, opt_main, opt_second,
                predictions=predictions, recovery_mode=recovery_mode,
                main_forward=main_forward, second_forward=second_forward,
                second_eval=second_eval,
            )
            partitions[epoch] = part
            plog.append(_partition_log_line(epoch, part))
            _attach_ground_truth(row, part, data)
            rows.append(row)
    except Exception:
        record.complete = False
        if out_dir:
            persist_record(record, out_dir)
        raise

    record.model = export_main(net) if not separate_detector else main_net
    record.complete = True
    if out_dir:
        persist_record(record, out_dir)
    return record


class _TwoModelView:
    """Pairs an independent detector with the main model so evaluation code
    can treat the two-model ablation like a dual-head net."""

    def __init__(self, main_net: SingleHeadModel, detector: DetectorModel):
        self.main_net = main_net
        self.detector = detector

    def predict_logits(self, features):
        return self.main_net.predict_logits(features)

    def predict_dual_logits(self, features):
        return self.main_net.predict_logits(features), _predict_second(self.detector, features)

    def forward_main(self, x):
        return self.main_net.forward(x)

    def forward_second(self, x):
        return self.detector.forward_second(x)


def _predict_second(detector: DetectorModel, features) -> np.ndarray:
    return detector.predict_dual_logits(features)[1]


def train_e2abl(data: PoisonedDataset, config: TrainConfig, out_dir: str | None = None) -> RunRecord:
    """Warm start, then partitioned dual-head epochs, then main-head export."""
    return _train_dual_variant(data, config, "e2abl", "recover", False, out_dir)


def train_standard(data: PoisonedDataset, config: TrainConfig, out_dir: str | None = None) -> RunRecord:
    """Single-head training of the same backbone on all observed labels."""
    x, y = data.data.features, data.data.labels
    n = len(data)
    net = SingleHeadModel(default_backbone(data.data), config.seed)
    opt = SGD(net.parameters(), config.lr_main, config.momentum)
    rows = []
    for epoch in range(1, config.total_epochs + 1):
        batches = epoch_batches(np.arange(n), config.batch_size, config.seed, epoch, _STREAM_STANDARD)
        loss, acc = _train_pass(net.forward, opt, x, y, batches)
        rows.append({"epoch": epoch, "phase": "standard", "loss_main": loss, "train_accuracy": acc})
    record = RunRecord("standard", config, config.seed, rows, {}, [], net, complete=True)
    if out_dir:
        persist_record(record, out_dir)
    return record


def train_abl(data: PoisonedDataset, config: TrainConfig, abl: AblConfig | None = None,
              out_dir: str | None = None) -> RunRecord:
    """Two-stage baseline: isolate lowest-loss samples, fine-tune on all,
    then unlearn the isolated set by gradient ascent at a small rate."""
    abl = abl or AblConfig()
    x, y = data.data.features, data.data.labels
    n = len(data)
    net = SingleHeadModel(default_backbone(data.data), config.seed)
    opt = SGD(net.parameters(), config.lr_main, config.momentum)
    rows = []
    epoch = 0
    for _ in range(abl.isolation_epochs):
        epoch += 1
        batches = epoch_batches(np.arange(n), config.batch_size, config.seed, epoch, _STREAM_STANDARD)
        loss, acc = _train_pass(net.forward, opt, x, y, batches)
        rows.append({"epoch": epoch, "phase": "isolate", "loss_main": loss, "train_accuracy": acc})

    per_sample = cross_entropy_values(net.predict_logits(x), y)
    iso_count = round_count(abl.isolation_rate, n)
    if iso_count < 1:
        raise ValueError(f"isolation produced an empty set: round({abl.isolation_rate} * {n}) = 0")
    isolated = np.argsort(per_sample, kind="stable")[:iso_count]

    for _ in range(abl.finetune_epochs):
        epoch += 1
        batches = epoch_batches(np.arange(n), config.batch_size, config.seed, epoch, _STREAM_STANDARD)
        loss, acc = _train_pass(net.forward, opt, x, y, batches)
        rows.append({"epoch": epoch, "phase": "finetune", "loss_main": loss, "train_accuracy": acc})

    stage2_model = _clone_single(net)

    opt_unlearn = SGD(net.parameters(), abl.unlearn_lr, config.momentum)
    for _ in range(abl.unlearn_epochs):
        epoch += 1
        batches = epoch_batches(isolated, config.batch_size, config.seed, epoch, _STREAM_UNLEARN)
        loss = _unlearn_pass(net.forward, opt_unlearn, x, y, batches, abl.unlearn_stop_loss)
        rows.append({"epoch": epoch, "phase": "unlearn", "loss_main": loss})

    record = RunRecord("abl", config, config.seed, rows, {}, [], net, complete=True,
                       abl=abl, stage2_model=stage2_model)
    if out_dir:
        persist_record(record, out_dir)
    return record


def _clone_single(net: SingleHeadModel) -> SingleHeadModel:
    clone = SingleHeadModel(net.spec, net.seed)
    for (_, dst), (_, src) in zip(clone.named_parameters(), net.named_parameters()):
        dst.data[...] = src.data
    return clone


def train_variant(data: PoisonedDataset, config: TrainConfig, kind: str,
                  abl: AblConfig | None = None, out_dir: str | None = None) -> RunRecord:
    """Dispatch on the variant name (see VARIANTS)."""
    if kind == "e2abl":
        return train_e2abl(data, config, out_dir)
    if kind == "standard":
        return train_standard(data, config, out_dir)
    if kind == "abl":
        return train_abl(data, config, abl, out_dir)
    if kind == "unlearn-top1":
        record = _train_dual_variant(data, config, kind, "unlearn-core", False, out_dir)
        return record
    if kind == "no-control":
        config = replace(config, recovery_enabled=False)
        return _train_dual_variant(data, config, kind, "none", False, out_dir)
    if kind == "two-model":
        return _train_dual_variant(data, config, kind, "recover", True, out_dir)
    raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# persistence

def _row_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return fmt_float(value)
    return str(value)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROW_COLUMNS)
    for row in rows:
        writer.writerow([_row_cell(row.get(col)) for col in ROW_COLUMNS])
    return buf.getvalue()


def config_to_fields(config: TrainConfig) -> dict[str, str]:
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "partition":
            out["partition.clean_fraction"] = fmt_float(value.clean_fraction)
            out["partition.core_fraction"] = fmt_float(value.core_fraction)
        elif isinstance(value, bool):
            out[f"train.{f.name}"] = str(int(value))
        elif isinstance(value, float):
            out[f"train.{f.name}"] = fmt_float(value)
        else:
            out[f"train.{f.name}"] = str(value)
    return out


def config_from_fields(data: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name == "partition":
            continue
        key = f"train.{f.name}"
        if key not in data:
            continue
        if f.name in ("recovery_enabled", "cold_start"):
            kwargs[f.name] = bool(int(data[key]))
        elif f.name in ("lr_warm", "lr_main", "lr_second", "momentum"):
            kwargs[f.name] = float(data[key])
        else:
            kwargs[f.name] = int(data[key])
    part_kwargs = {}
    if "partition.clean_fraction" in data:
        part_kwargs["clean_fraction"] = float(data["partition.clean_fraction"])
    if "partition.core_fraction" in data:
        part_kwargs["core_fraction"] = float(data["partition.core_fraction"])
    kwargs["partition"] = PartitionConfig(**part_kwargs)
    return TrainConfig(**kwargs)


def partitions_to_text(partitions: dict[int, Partition]) -> str:
    chunks = []
    for epoch in sorted(partitions):
        part = partitions[epoch]
        chunks.append(
            "\n".join(
                [
                    f"epoch={epoch}",
                    f"inferred={part.inferred_backdoor_class}",
                    f"vote_share={fmt_float(part.vote_share)}",
                    f"suspect={fmt_ints(part.suspect_indices)}",
                    f"core={fmt_ints(part.core_indices)}",
                    f"rectified={fmt_ints(part.rectified_labels)}",
                ]
            )
        )
    return "\n\n".join(chunks) + ("\n" if chunks else "")


def partitions_from_text(text: str, num_samples: int) -> dict[int, Partition]:
    partitions: dict[int, Partition] = {}
    for chunk in text.strip().split("\n\n"):
        if not chunk.strip():
            continue
        fields_ = dict(line.split("=", 1) for line in chunk.splitlines())
        suspect = parse_ints(fields_["suspect"])
        mask = np.ones(num_samples, dtype=bool)
        mask[suspect] = False
        partitions[int(fields_["epoch"])] = Partition(
            clean_indices=np.nonzero(mask)[0],
            suspect_indices=suspect,
            core_indices=parse_ints(fields_["core"]),
            inferred_backdoor_class=int(fields_["inferred"]),
            rectified_labels=parse_ints(fields_["rectified"]),
            vote_share=float(fields_["vote_share"]),
        )
    return partitions


def persist_record(record: RunRecord, out_dir: str):
    """RunRecord directory: config snapshot, per-epoch metrics table,
    partition log, final checkpoint, completion status."""
    os.makedirs(out_dir, exist_ok=True)
    fields_ = config_to_fields(record.config)
    fields_["variant"] = record.variant
    if record.abl is not None:
        for f in ("isolation_epochs", "finetune_epochs", "unlearn_epochs"):
            fields_[f"abl.{f}"] = str(getattr(record.abl, f))
        fields_["abl.unlearn_lr"] = fmt_float(record.abl.unlearn_lr)
        fields_["abl.isolation_rate"] = fmt_float(record.abl.isolation_rate)
        fields_["abl.unlearn_stop_loss"] = fmt_float(record.abl.unlearn_stop_loss)
    with open(os.path.join(out_dir, "train_config.txt"), "w") as fh:
        fh.write("\n".join(f"{k}={v}" for k, v in sorted(fields_.items())) + "\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(rows_to_csv(record.epoch_rows))
    with open(os.path.join(out_dir, "partition_log.txt"), "w") as fh:
        fh.write("\n".join(record.partition_log) + ("\n" if record.partition_log else ""))
    with open(os.path.join(out_dir, "partitions.txt"), "w") as fh:
        fh.write(partitions_to_text(record.partitions))
    if record.model is not None:
        save_checkpoint(record.model, os.path.join(out_dir, "checkpoint.abl"))
    with open(os.path.join(out_dir, "status.txt"), "w") as fh:
        fh.write("complete\n" if record.complete else "incomplete\n")
