"""Training loop: RMSProp schedule, two parameter groups, validation-loss patience."""

import copy
import json
import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, DatasetError
from .losses import LossConfig, total_loss

LOG_FIELDS = ("epoch", "train_total", "train_focal", "train_separation",
              "train_weight_decay", "train_pixel_acc", "val_loss",
              "lr_backbone", "lr_decoder")


@dataclass
class TrainConfig:
    lr_backbone: float = 1e-6
    lr_decoder: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_backbone", "lr_decoder", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")


@dataclass
class FitResult:
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_epoch: int = -1
    best_state: dict = None


def batch_tensors(samples, device="cpu"):
    """Stack SegSamples into (images, labels, imus) tensors."""
    images = torch.stack([torch.as_tensor(s.image, dtype=torch.float32) for s in samples])
    labels = torch.stack([torch.as_tensor(s.label, dtype=torch.int64) for s in samples])
    imus = torch.stack([torch.as_tensor(s.imu, dtype=torch.float32) for s in samples])
    return images.to(device), labels.to(device), imus.to(device)


def pixel_accuracy(model, samples, ignore_label=4, batch_size=16):
    """Fraction of non-ignored pixels whose argmax class matches the label."""
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            images, labels, imus = batch_tensors(samples[start:start + batch_size])
            probs, _ = model(images, imus)
            pred = probs.argmax(dim=1)
            valid = labels != ignore_label
            correct += int((pred[valid] == labels[valid]).sum())
            total += int(valid.sum())
    return correct / total if total else 0.0


def evaluate_loss(model, samples, loss_cfg, batch_size=16):
    model.eval()
    loss_sum = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images, labels, imus = batch_tensors(chunk)
            probs, feats = model(images, imus)
            breakdown = total_loss(probs, feats, labels, loss_cfg, model.parameters())
            loss_sum += float(breakdown.total) * len(chunk)
    return loss_sum / len(samples)


def fit(model, train_set, val_set, train_cfg=None, loss_cfg=None,
        log_path=None, start_epoch=0):
    """Train with RMSProp (backbone and decoder learning rates), patience stop.

    Deterministic under a fixed seed and the single-threaded in-order data
    path used here.  Keeps the best-validation-loss weights and restores them
    into the model on exit; the per-epoch records are returned and optionally
    appended to ``log_path`` as newline-delimited JSON.
    """
    train_cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if len(train_set) == 0 or len(val_set) == 0:
        raise DatasetError("training and validation sets must be non-empty")

    torch.manual_seed(train_cfg.seed)
    backbone_params = [p for n, p in model.named_parameters() if n.startswith("encoder.")]
    decoder_params = [p for n, p in model.named_parameters() if not n.startswith("encoder.")]
    optimizer = torch.optim.RMSprop(
        [{"params": backbone_params, "lr": train_cfg.lr_backbone},
         {"params": decoder_params, "lr": train_cfg.lr_decoder}],
        momentum=train_cfg.momentum)
    shuffler = torch.Generator().manual_seed(train_cfg.seed)

    result = FitResult()
    log_file = open(log_path, "a") if log_path else None
    epochs_since_best = 0
    try:
        for epoch in range(start_epoch, start_epoch + train_cfg.max_epochs):
            model.train()
            order = torch.randperm(len(train_set), generator=shuffler).tolist()
            sums = dict(total=0.0, focal=0.0, separation=0.0, weight_decay=0.0)
            correct = seen_px = 0
            for start in range(0, len(order), train_cfg.batch_size):
                chunk = [train_set[i] for i in order[start:start + train_cfg.batch_size]]
                images, labels, imus = batch_tensors(chunk)
                probs, feats = model(images, imus)
                breakdown = total_loss(probs, feats, labels, loss_cfg, model.parameters())
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                n = len(chunk)
                for key, value in zip(sums, breakdown):
                    sums[key] += float(value.detach()) * n
                pred = probs.argmax(dim=1)
                valid = labels != loss_cfg.ignore_label
                correct += int((pred[valid] == labels[valid]).sum())
                seen_px += int(valid.sum())

            n_train = len(train_set)
            val = evaluate_loss(model, val_set, loss_cfg, train_cfg.batch_size)
            record = {
                "epoch": epoch,
                "train_total": sums["total"] / n_train,
                "train_focal": sums["focal"] / n_train,
                "train_separation": sums["separation"] / n_train,
                "train_weight_decay": sums["weight_decay"] / n_train,
                "train_pixel_acc": correct / seen_px if seen_px else 0.0,
                "val_loss": val,
                "lr_backbone": train_cfg.lr_backbone,
                "lr_decoder": train_cfg.lr_decoder,
            }
            result.log.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()

            if val < result.best_val_loss:
                result.best_val_loss = val
                result.best_epoch = epoch
                result.best_state = copy.deepcopy(model.state_dict())
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            result.stopped_epoch = epoch
            if epochs_since_best >= train_cfg.patience:
                break
    finally:
        if log_file:
            log_file.close()

    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result
