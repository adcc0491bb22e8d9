"""Tensor primitives with reverse-mode gradients, Adam, and a finite-difference checker.

Tensors are ``torch.Tensor`` (float32 by default) and torch records the backward
rules.  The primitives below pin the shape contracts and the numerics the model
relies on: reductions accumulate in float64, ``cross_entropy`` ignores ``-1``
targets and reports how many targets it averaged over.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor
DTYPE = torch.float32


class ShapeError(ValueError):
    pass


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    return a @ b


def _broadcast(op: str, a: Tensor, b: Tensor):
    try:
        torch.broadcast_shapes(torch.as_tensor(a).shape, torch.as_tensor(b).shape)
    except RuntimeError:
        raise _shape_error(op, torch.as_tensor(a).shape, torch.as_tensor(b).shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("mul", a, b)
    return a * b


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x (B, Cin, L), w (Cout, Cin, K)."""
    if x.dim() != 3 or w.dim() != 3 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv1d", x.shape, w.shape)
    return F.conv1d(x, w, b, stride=stride, padding=padding)


def transposed_conv1d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """x (B, Cin, L), w (Cin, Cout, K)."""
    if x.dim() != 3 or w.dim() != 3 or x.shape[1] != w.shape[0]:
        raise _shape_error("transposed_conv1d", x.shape, w.shape)
    return F.conv_transpose1d(x, w, b, stride=stride, padding=padding, output_padding=output_padding)


def max_pool1d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    if x.dim() != 3:
        raise _shape_error("max_pool1d", x.shape)
    return F.max_pool1d(x, kernel, stride if stride is not None else kernel)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)  # exact erf form


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise _shape_error("layer_norm", x.shape, gamma.shape)
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """x (B, C, L); in training mode uses batch statistics and updates the running buffers."""
    if x.dim() != 3 or gamma.shape != (x.shape[1],):
        raise _shape_error("batch_norm1d", x.shape, gamma.shape)
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding ids must lie in [0, {table.shape[0]})")
    return table[ids]


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise _shape_error("concat", xs[0].shape, x.shape)
    return torch.cat(list(xs), dim=axis)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return x.narrow(axis, start, stop - start)


def mean(x: Tensor, axis=None, keepdim: bool = False) -> Tensor:
    acc = x.to(torch.float64)
    out = acc.mean() if axis is None else acc.mean(dim=axis, keepdim=keepdim)
    return out.to(x.dtype)


class CrossEntropy(NamedTuple):
    loss: Tensor
    count: int  # targets averaged over; 0 means the loss is a placeholder zero


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> CrossEntropy:
    """Mean negative log-likelihood over non-ignored targets; logits (..., C)."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[:-1] != targets.shape:
        raise _shape_error("cross_entropy", logits.shape, targets.shape)
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    keep = t != ignore_index
    n = int(keep.sum())
    if n == 0:
        return CrossEntropy(flat.sum() * 0.0, 0)
    kept = t[keep]
    if int(kept.min()) < 0 or int(kept.max()) >= flat.shape[-1]:
        raise IndexError(f"targets must lie in [0, {flat.shape[-1]})")
    logp = torch.log_softmax(flat[keep], dim=-1)
    nll = -logp.gather(1, kept[:, None])[:, 0]
    return CrossEntropy((nll.to(torch.float64).sum() / n).to(logits.dtype), n)


# ---------------------------------------------------------------- backward and Adam


def backward(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update over every trainable tensor, then zero the grads."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        if m.shape != p.shape:
            raise _shape_error("adam_step", m.shape, p.shape)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
        if p.grad is not None:
            p.grad.zero_()


# ---------------------------------------------------------------- gradient check


def _rel_err(a: Tensor, n: Tensor) -> float:
    scale = max(float(a.norm()), float(n.norm()))
    if scale == 0.0:
        return 0.0
    return float((a - n).norm()) / scale


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    directions: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd and central differences on a float64 shadow.

    With ``directions`` set, compares directional derivatives along that many
    random unit directions instead of every coordinate (for large parameter sets).
    """
    shadow = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = fn(*shadow)
    grads = torch.autograd.grad(out, shadow, allow_unused=True)
    grads = [torch.zeros_like(s) if g is None else g for s, g in zip(shadow, grads)]
    base = [s.detach().clone() for s in shadow]

    def f(vals) -> float:
        with torch.no_grad():
            return float(fn(*vals))

    if directions is not None:
        gen = torch.Generator().manual_seed(seed)
        ana, num = [], []
        for _ in range(directions):
            d = [torch.randn(b.shape, generator=gen, dtype=torch.float64) for b in base]
            norm = float(torch.sqrt(sum((x**2).sum() for x in d)))
            d = [x / norm for x in d]
            ana.append(float(sum((g * x).sum() for g, x in zip(grads, d))))
            plus = f([b + h * x for b, x in zip(base, d)])
            minus = f([b - h * x for b, x in zip(base, d)])
            num.append((plus - minus) / (2 * h))
        return _rel_err(torch.tensor(ana, dtype=torch.float64), torch.tensor(num, dtype=torch.float64))

    worst = 0.0
    for k, b in enumerate(base):
        num = torch.zeros_like(b)
        flat = num.view(-1)
        for i in range(b.numel()):
            vals = list(base)
            pert = b.clone().view(-1)
            pert[i] += h
            vals[k] = pert.view(b.shape)
            plus = f(vals)
            pert[i] -= 2 * h
            minus = f(vals)
            flat[i] = (plus - minus) / (2 * h)
        worst = max(worst, _rel_err(grads[k], num))
    return worst


def dropout(x: Tensor, p: float, training: bool) -> Tensor:
    return F.dropout(x, p, training) if training and p > 0 else x
