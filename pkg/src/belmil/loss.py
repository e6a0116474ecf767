"""Cross entropy, the bag embedding loss and the EMA prototype bank."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch


@dataclass
class LossConfig:
    margin: float = 0.25
    update_ratio: float = 0.996
    eps: float = 1e-8

    def validate(self):
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("margin must lie in [0, 1)")
        if not 0.0 <= self.update_ratio < 1.0:
            raise ValueError("update_ratio must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def to_dict(self):
        return asdict(self)


class IncompleteBankError(RuntimeError):
    pass


class PrototypeBank:
    """Per-class EMA of bag embeddings.

    Until every class has a slot, an update simply stores the incoming
    embedding (replacing any earlier one); afterwards slots follow
    ``old <- lam * old + (1 - lam) * new``.
    """

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.slots: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.slots)

    @property
    def complete(self) -> bool:
        return len(self.slots) == self.n_classes

    def __getitem__(self, c):
        return self.slots[c]

    def update(self, c: int, b_new, update_ratio: float) -> None:
        b_new = torch.as_tensor(b_new).detach().clone()
        if not torch.isfinite(b_new).all():
            raise ValueError("bag embedding is not finite")
        if not 0 <= c < self.n_classes:
            raise ValueError(f"class {c} outside [0, {self.n_classes})")
        if not self.complete:
            self.slots[c] = b_new
        else:
            self.slots[c] = update_ratio * self.slots[c] + (1 - update_ratio) * b_new

    def stacked(self) -> torch.Tensor:
        if not self.complete:
            raise IncompleteBankError(f"bank holds {len(self)} of {self.n_classes} classes")
        return torch.stack([self.slots[c] for c in range(self.n_classes)])

    def copy(self) -> "PrototypeBank":
        other = PrototypeBank(self.n_classes)
        other.slots = {c: v.clone() for c, v in self.slots.items()}
        return other

    def to(self, dtype) -> "PrototypeBank":
        other = PrototypeBank(self.n_classes)
        other.slots = {c: v.to(dtype) for c, v in self.slots.items()}
        return other


def cosine_similarity(u, v, eps=1e-8):
    u, v = torch.as_tensor(u), torch.as_tensor(v)
    denom = torch.clamp(u.norm(dim=-1) * v.norm(dim=-1), min=eps)
    # rounding can leave |S| a few ulps above 1
    return torch.clamp((u * v).sum(dim=-1) / denom, -1.0, 1.0)


def bel(b_new, c: int, bank: PrototypeBank, config: LossConfig):
    """Bag embedding loss: pull towards the own-class prototype, hinge away from the rest."""
    protos = bank.stacked().to(torch.as_tensor(b_new).dtype)
    sims = cosine_similarity(torch.as_tensor(b_new)[None], protos, config.eps)
    others = torch.cat([sims[:c], sims[c + 1:]])
    pull = 0.5 * (1 - sims[c])
    push = torch.clamp(others - config.margin, min=0).sum() / (2 * (bank.n_classes - 1))
    return pull + push


def cross_entropy(p, c: int):
    p = torch.as_tensor(p)
    return -torch.log(torch.clamp(p[c], min=torch.finfo(p.dtype).tiny))


def total_loss(p, c: int, b, bank: PrototypeBank, config: LossConfig, use_bel: bool = True):
    """CE plus BEL (BEL only once the bank is complete). Returns ``(loss, breakdown)``."""
    ce = cross_entropy(p, c)
    if use_bel and bank.complete:
        be = bel(b, c, bank, config)
    else:
        be = torch.zeros((), dtype=ce.dtype)
    loss = ce + be
    return loss, {"ce": float(ce.detach()), "bel": float(be.detach()), "total": float(loss.detach())}
