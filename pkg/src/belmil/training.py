"""Gradients, the BEL training loop, and cross-validation."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .bags import DatasetManifest, FeatureBag, SplitAssignment
from .encoder import EncoderConfig, TransMIL
from .loss import LossConfig, PrototypeBank, cosine_similarity, total_loss
from .metrics import MetricsReport, PredictionSet, aggregate, evaluate
from .optim import Lookahead, RAdam

log = logging.getLogger(__name__)

ENCODER_KEYS = ("dim", "depth", "heads", "landmarks", "attn_dropout", "attention", "pinv_iterations")


@dataclass
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 5e-5
    epochs: int = 100
    seed: int = 0
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    use_bel: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: dict = field(default_factory=dict)

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        unknown = set(self.encoder) - set(ENCODER_KEYS)
        if unknown:
            raise ValueError(f"unknown encoder settings {sorted(unknown)}")
        self.loss.validate()

    def encoder_config(self, input_dim: int, n_classes: int) -> EncoderConfig:
        cfg = EncoderConfig(input_dim=input_dim, n_classes=n_classes, **self.encoder)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training settings {sorted(unknown)}")
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def build_model(config: TrainConfig, input_dim: int, n_classes: int) -> TransMIL:
    return TransMIL(config.encoder_config(input_dim, n_classes), seed=config.seed)


def build_optimizer(model: TransMIL, config: TrainConfig) -> Lookahead:
    inner = RAdam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.adam_eps,
                  weight_decay=config.weight_decay)
    return Lookahead(inner, k=config.lookahead_k, alpha=config.lookahead_alpha)


def _features(bag):
    return bag.features if isinstance(bag, FeatureBag) else bag


def compute_gradients(model, features, label, bank, loss_config, generator=None, use_bel=True):
    """Gradient of the total loss for one bag, keyed by parameter name.

    The bank is read, not updated. Raises FloatingPointError naming the first
    parameter with a non-finite gradient.
    """
    model.zero_grad(set_to_none=True)
    out = model(features, generator)
    loss, breakdown = total_loss(out.p, label, out.b, bank, loss_config, use_bel)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return grads, breakdown


def max_prototype_similarity(bank: PrototypeBank, eps=1e-8) -> float | None:
    """Largest cosine similarity between prototypes of two different classes."""
    if len(bank) < 2:
        return None
    keys = sorted(bank.slots)
    best = -1.0
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            best = max(best, float(cosine_similarity(bank[a], bank[b], eps)))
    return best


class TrainingSession:
    """Owns a model, its prototype bank and its optimizer for one training run."""

    def __init__(self, config: TrainConfig, input_dim: int, n_classes: int):
        config.validate()
        self.config = config
        self.model = build_model(config, input_dim, n_classes)
        self.bank = PrototypeBank(n_classes)
        self.optimizer = build_optimizer(self.model, config)
        self.generator = torch.Generator().manual_seed(config.seed + 1)

    def step(self, features, label: int) -> dict:
        cfg = self.config
        self.model.train()
        self.optimizer.zero_grad()
        out = self.model(features, self.generator)
        loss, breakdown = total_loss(out.p, label, out.b, self.bank, cfg.loss, cfg.use_bel)
        self.bank.update(label, out.b.detach(), cfg.loss.update_ratio)
        loss.backward()
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.optimizer.step()
        return breakdown


@torch.no_grad()
def predict(model: TransMIL, bags: list[FeatureBag]):
    """Eval-mode predictions and attention vectors for a list of bags."""
    model.eval()
    ids, labels, probs, attention = [], [], [], {}
    for bag in bags:
        out = model(bag.features)
        ids.append(bag.bag_id)
        labels.append(bag.label)
        probs.append(out.p.double().numpy())
        attention[bag.bag_id] = out.alpha.double().numpy()
    k = model.config.n_classes
    return PredictionSet(ids, labels, np.reshape(probs, (-1, k))), attention


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_accuracy: float | None = None
    final_max_prototype_similarity: float | None = None
    best_model: TransMIL | None = field(default=None, repr=False, compare=False)
    best_bank: PrototypeBank | None = field(default=None, repr=False, compare=False)
    session: TrainingSession | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "iterations": self.iterations,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "final_max_prototype_similarity": self.final_max_prototype_similarity,
        }


def train_fold(train_bags: list[FeatureBag], val_bags: list[FeatureBag], config: TrainConfig,
               n_classes: int | None = None, progress=None) -> TrainReport:
    """One bag per iteration; keeps the epoch with the best validation accuracy."""
    if not train_bags:
        raise ValueError("no training bags")
    if n_classes is None:
        n_classes = 1 + max(b.label for b in list(train_bags) + list(val_bags))
    missing = set(range(n_classes)) - {b.label for b in train_bags}
    if missing:
        raise ValueError(f"classes {sorted(missing)} absent from the training fold")
    session = TrainingSession(config, train_bags[0].width, n_classes)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(session=session)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_bags))
        sums = {"ce": 0.0, "bel": 0.0, "total": 0.0}
        for i in order:
            bag = train_bags[i]
            br = session.step(bag.features, bag.label)
            report.iterations.append({"epoch": epoch, "bag_id": bag.bag_id, "ce": br["ce"], "bel": br["bel"]})
            for k in sums:
                sums[k] += br[k]
        row = {"epoch": epoch, **{k: v / len(train_bags) for k, v in sums.items()}}
        if val_bags:
            preds, _ = predict(session.model, val_bags)
            row["val_accuracy"] = float(np.mean(preds.predicted == preds.labels))
        else:
            row["val_accuracy"] = None
        report.epochs.append(row)
        # without validation bags the last epoch wins; otherwise the earliest best
        improved = not val_bags or report.best_epoch is None or row["val_accuracy"] > report.best_val_accuracy
        if improved:
            report.best_epoch = epoch
            report.best_val_accuracy = row["val_accuracy"]
            report.best_model = copy.deepcopy(session.model)
            report.best_bank = session.bank.copy()
        if progress is not None:
            progress(row)
        log.debug("epoch %d: %s", epoch, row)
    report.final_max_prototype_similarity = max_prototype_similarity(session.bank, config.loss.eps)
    return report


@dataclass
class CVResult:
    reports: list[TrainReport]
    test_metrics: list[MetricsReport]
    test_predictions: list[PredictionSet]
    test_attention: list[dict]
    summary: dict

    def to_json(self) -> dict:
        return {
            "folds": [
                {"train": r.to_json(), "test_metrics": m.to_json() if m is not None else None}
                for r, m in zip(self.reports, self.test_metrics)
            ],
            "summary": self.summary,
        }


def cross_validate(manifest: DatasetManifest, splits: SplitAssignment, config: TrainConfig,
                   bags: dict[str, FeatureBag] | None = None, progress=None) -> CVResult:
    """Train every fold, score each fold's best model on the shared test set, aggregate."""
    if bags is None:
        bags = manifest.load_all()
    test = [bags[i] for i in sorted(splits.test_ids)]
    reports, metrics, predictions, attention = [], [], [], []
    for f, (train_ids, val_ids) in enumerate(splits.folds):
        log.info("fold %d/%d: %d train, %d validation bags", f + 1, len(splits.folds), len(train_ids), len(val_ids))
        cb = None if progress is None else (lambda row, f=f: progress(f, row))
        rep = train_fold([bags[i] for i in sorted(train_ids)], [bags[i] for i in sorted(val_ids)], config,
                         manifest.class_count, cb)
        reports.append(rep)
        if test:
            preds, att = predict(rep.best_model, test)
            m = evaluate(preds)
            m.meta = {"fold": f, "best_epoch": rep.best_epoch}
            metrics.append(m)
            predictions.append(preds)
            attention.append(att)
    summary = aggregate(metrics) if metrics else {}
    return CVResult(reports, metrics, predictions, attention, summary)
