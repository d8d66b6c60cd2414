"""Dense tensor numerics with reverse-mode gradients.

torch is the storage and autograd engine here; this module pins down the
small op surface the rest of the package relies on, with explicit shape
checks and no implicit broadcasting beyond a trailing-dimension bias.

It also carries the two pieces torch does not give us in a portable form:

* ``Rng`` - a counter-based (Philox) generator from numpy, so parameter
  initialisation is bit-reproducible across platforms.
* ``numerical_grad`` - a central-difference oracle that never touches
  autograd, used to check every gradient rule.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = "") -> None:
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(ValueError):
    pass


class Rng:
    """Seedable Philox generator producing torch tensors.

    ``spawn`` derives an independent child stream from a string key so that
    adding a parameter somewhere does not shift every later draw.
    """

    def __init__(self, seed: int, key: str = "") -> None:
        self.seed = int(seed)
        self.key = key
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        words += list(key.encode("utf-8"))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def spawn(self, key: str) -> "Rng":
        return Rng(self.seed, f"{self.key}/{key}")

    def normal(self, shape: Sequence[int], std: float = 1.0, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        arr = self._gen.standard_normal(tuple(shape)) * std
        return torch.from_numpy(arr).to(dtype)

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        arr = self._gen.uniform(low, high, tuple(shape))
        return torch.from_numpy(arr).to(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())


def tensor(data, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


# ---------------------------------------------------------------------------
# ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expected [m,k] @ [k,n]")
    return a @ b


def _check_finite(x: torch.Tensor, op: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{op}: non-finite input")


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim", x.shape)
    _check_finite(x, "softmax_lastdim")
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise sum; ``b`` may match only the trailing dims of ``a`` (bias)."""
    if a.shape != b.shape and tuple(a.shape[a.dim() - b.dim():]) != tuple(b.shape):
        raise ShapeError("add", a.shape, b.shape, detail="only trailing-dim bias broadcasting")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return a * b


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def log(x: torch.Tensor) -> torch.Tensor:
    if (x.detach() <= 0).any():
        raise ValueError("log: non-positive input")
    return torch.log(x)


def neg(x: torch.Tensor) -> torch.Tensor:
    return -x


def reduce_sum(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def reduce_mean(x: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def transpose(x: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    if x.dim() < 2:
        raise ShapeError("transpose", x.shape, detail="need at least 2 dims")
    return x.transpose(dim0, dim1)


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    if math.prod(shape) != x.numel():
        raise ShapeError("reshape", x.shape, shape, detail="element count differs")
    return x.reshape(tuple(shape))


def concat(xs: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    if not xs:
        raise ValueError("concat: empty input")
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != dim % len(ref)):
            raise ShapeError("concat", xs[0].shape, x.shape)
    return torch.cat(list(xs), dim=dim)


def slice_(x: torch.Tensor, start: int, stop: int, dim: int = 0) -> torch.Tensor:
    n = x.shape[dim]
    if not (0 <= start <= stop <= n):
        raise ShapeError("slice", x.shape, detail=f"range [{start}, {stop}) outside dim {dim} of size {n}")
    return x.narrow(dim, start, stop - start)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    return table[ids]


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits`` [T, V].

    ``mask`` (bool [T]) restricts the mean to selected rows.
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if logits.shape[0] != targets.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    vocab = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: targets outside [0, {vocab})")
    z = logits - logits.max(dim=-1, keepdim=True).values.detach()
    logp = z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.shape != targets.shape:
            raise ShapeError("cross_entropy", targets.shape, mask.shape, detail="mask")
        n = mask.sum()
        if n == 0:
            return nll.sum() * 0.0
        return (nll * mask).sum() / n
    return nll.mean()


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1 or loss.dim() != 0:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    loss.backward()


# ---------------------------------------------------------------------------
# finite-difference oracle


@torch.no_grad()
def numerical_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x``.

    ``x`` is perturbed in place and restored; ``f`` must read it by reference.
    """
    flat = x.data.view(-1)
    grad = torch.zeros(flat.numel(), dtype=CHECK_DTYPE)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.view(x.shape)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """max|a - n| / max(max|n|, max|a|, floor)."""
    a = analytic.detach().to(CHECK_DTYPE)
    n = numeric.detach().to(CHECK_DTYPE)
    scale = max(a.abs().max().item(), n.abs().max().item(), floor)
    return (a - n).abs().max().item() / scale


def gradcheck(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-4) -> float:
    """Worst relative error over ``params`` between autograd and central differences."""
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        worst = max(worst, relative_error(analytic, numerical_grad(f, p, eps)))
    return worst
