"""RAdam with decoupled weight decay, and a Lookahead wrapper."""
from __future__ import annotations

import math

import torch
from torch.optim.optimizer import Optimizer


def rectification(step: int, beta2: float) -> float | None:
    """RAdam variance rectification term r_t, or None while rho_t <= 4."""
    rho_inf = 2 / (1 - beta2) - 1
    beta2_t = beta2**step
    rho_t = rho_inf - 2 * step * beta2_t / (1 - beta2_t)
    if rho_t <= 4:
        return None
    return math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))


class RAdam(Optimizer):
    def __init__(self, params, lr=2e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-5):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, wd, eps = group["lr"], group["weight_decay"], group["eps"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                if wd:
                    p.mul_(1 - lr * wd)
                m_hat = m / (1 - beta1**t)
                r = rectification(t, beta2)
                if r is None:
                    p.add_(m_hat, alpha=-lr)
                else:
                    v_hat = v / (1 - beta2**t)
                    p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr * r)
        return loss


class Lookahead:
    """Every ``k`` inner steps: ``slow += alpha * (fast - slow)``; ``fast = slow``."""

    def __init__(self, optimizer: Optimizer, k: int = 5, alpha: float = 0.5):
        if k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.optimizer = optimizer
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.params = [p for g in optimizer.param_groups for p in g["params"]]
        self.slow = [p.detach().clone() for p in self.params]

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    @torch.no_grad()
    def sync(self):
        for fast, slow in zip(self.params, self.slow):
            slow.add_(fast - slow, alpha=self.alpha)
            fast.copy_(slow)

    def step(self):
        self.optimizer.step()
        self.counter += 1
        if self.counter % self.k == 0:
            self.sync()

    def state_tensors(self) -> dict[str, torch.Tensor]:
        """Flat name -> tensor view of inner moments and slow weights (for checkpoints)."""
        out = {"lookahead.counter": torch.tensor([float(self.counter)])}
        for i, p in enumerate(self.params):
            st = self.optimizer.state.get(p)
            if st:
                out[f"radam.{i}.step"] = torch.tensor([float(st["step"])])
                out[f"radam.{i}.exp_avg"] = st["exp_avg"]
                out[f"radam.{i}.exp_avg_sq"] = st["exp_avg_sq"]
            out[f"lookahead.{i}.slow"] = self.slow[i]
        return out

    @torch.no_grad()
    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.counter = int(tensors["lookahead.counter"].item())
        for i, p in enumerate(self.params):
            self.slow[i].copy_(tensors[f"lookahead.{i}.slow"].reshape(p.shape))
            if f"radam.{i}.step" in tensors:
                self.optimizer.state[p] = {
                    "step": int(tensors[f"radam.{i}.step"].item()),
                    "exp_avg": tensors[f"radam.{i}.exp_avg"].reshape(p.shape).to(p.dtype).clone(),
                    "exp_avg_sq": tensors[f"radam.{i}.exp_avg_sq"].reshape(p.shape).to(p.dtype).clone(),
                }
