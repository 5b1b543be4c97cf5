"""Functional network substrate: parameter sets, MLP/GRU forward passes, Adam, soft updates.

Parameters are plain tensors held in a :class:`ParamSet`. Every tensor may
carry a leading "slot" axis so that one ParamSet stores the disjoint networks
of all agents at once (shape ``(n_agents, fan_in, fan_out)`` for a weight);
inputs shaped ``(n_agents, batch, fan_in)`` then evaluate every agent's
network in one batched matmul. Without a slot axis the same functions act on
a single network.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import torch

from fam.errors import InputError, NumericError

ACTIVATIONS = ("relu", "none", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "affine" | "gru"
    n_in: int
    n_out: int
    activation: str = "none"

    def __post_init__(self) -> None:
        if self.n_in < 1 or self.n_out < 1:
            raise InputError("layer widths must be >= 1")
        if self.kind not in ("affine", "gru"):
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")


class ParamSet:
    """Named tensors of one network (or one network per agent slot).

    ``version`` counts optimizer updates applied through :func:`optimizer_update`
    or :meth:`Adam.step`. Shapes are fixed at construction; assignment via
    :meth:`load_` copies values in place.
    """

    def __init__(self, tensors: dict[str, torch.Tensor] | None = None, version: int = 0):
        self.tensors: OrderedDict[str, torch.Tensor] = OrderedDict(tensors or {})
        self.version = version

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def scope(self, prefix: str) -> "ParamSet":
        """View of the tensors under ``prefix.`` with the prefix stripped (tensors shared)."""
        p = prefix + "."
        return ParamSet({k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}, self.version)

    def clone(self, requires_grad: bool | None = None) -> "ParamSet":
        out = OrderedDict()
        for k, v in self.tensors.items():
            c = v.detach().clone()
            c.requires_grad_(v.requires_grad if requires_grad is None else requires_grad)
            out[k] = c
        return ParamSet(out, self.version)

    def to(self, dtype: torch.dtype) -> "ParamSet":
        return ParamSet(
            {k: v.detach().to(dtype).requires_grad_(v.requires_grad) for k, v in self.tensors.items()},
            self.version,
        )

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self

    @torch.no_grad()
    def load_(self, other: "ParamSet") -> None:
        if other.shapes() != self.shapes():
            raise InputError("ParamSet shapes differ")
        for k, v in self.tensors.items():
            v.copy_(other[k])

    def state_dict(self) -> dict:
        return {"tensors": {k: v.detach().clone() for k, v in self.tensors.items()}, "version": self.version}

    @classmethod
    def from_state_dict(cls, state: dict, requires_grad: bool = True) -> "ParamSet":
        tensors = {k: v.clone().requires_grad_(requires_grad) for k, v in state["tensors"].items()}
        return cls(tensors, state["version"])

    def equal(self, other: "ParamSet") -> bool:
        """Bit-for-bit equality of every tensor."""
        return self.shapes() == other.shapes() and all(torch.equal(v, other[k]) for k, v in self.items())

    def n_params(self) -> int:
        return sum(v.numel() for v in self.tensors.values())


def merge(**parts: ParamSet) -> ParamSet:
    """Combine several ParamSets under name prefixes (tensors are shared, not copied)."""
    out = OrderedDict()
    for prefix, ps in parts.items():
        for k, v in ps.items():
            out[f"{prefix}.{k}"] = v
    return ParamSet(out)


# ---------------------------------------------------------------------------
# initialisation


def _orthogonal(slots: int | None, n_in: int, n_out: int, gain: float, gen: torch.Generator) -> torch.Tensor:
    shape = (n_in, n_out) if slots is None else (slots, n_in, n_out)
    w = torch.empty(shape)
    if slots is None:
        torch.nn.init.orthogonal_(w, gain=gain, generator=gen)
    else:
        for s in range(slots):
            torch.nn.init.orthogonal_(w[s], gain=gain, generator=gen)
    return w


def init_mlp(
    widths: Sequence[int],
    gen: torch.Generator,
    slots: int | None = None,
    out_gain: float = 1.0,
    final_activation: str = "none",
) -> tuple[ParamSet, tuple[LayerSpec, ...]]:
    """Orthogonal weights (gain sqrt(2) on ReLU layers, ``out_gain`` on the last), zero biases."""
    specs = []
    tensors = OrderedDict()
    n_layers = len(widths) - 1
    for i in range(n_layers):
        last = i == n_layers - 1
        specs.append(LayerSpec("affine", widths[i], widths[i + 1], final_activation if last else "relu"))
        gain = out_gain if last else math.sqrt(2.0)
        tensors[f"{i}.w"] = _orthogonal(slots, widths[i], widths[i + 1], gain, gen)
        bshape = (widths[i + 1],) if slots is None else (slots, 1, widths[i + 1])
        tensors[f"{i}.b"] = torch.zeros(bshape)
    return ParamSet(tensors), tuple(specs)


def init_gru(n_in: int, hidden: int, gen: torch.Generator, slots: int | None = None) -> ParamSet:
    """GRU weights laid out as ``[reset | update | candidate]`` column blocks."""
    def block(n_rows: int) -> torch.Tensor:
        return torch.cat([_orthogonal(slots, n_rows, hidden, 1.0, gen) for _ in range(3)], dim=-1)

    bshape = (3 * hidden,) if slots is None else (slots, 1, 3 * hidden)
    return ParamSet(
        OrderedDict(
            w_ih=block(n_in),
            w_hh=block(hidden),
            b_ih=torch.zeros(bshape),
            b_hh=torch.zeros(bshape),
        )
    )


# ---------------------------------------------------------------------------
# forward passes


def _n_layers(params: ParamSet) -> int:
    n = 0
    while f"{n}.w" in params:
        n += 1
    if n == 0:
        raise InputError("ParamSet holds no affine layers")
    return n


def affine(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != w.shape[-2]:
        raise InputError(f"input width {x.shape[-1]} != layer fan-in {w.shape[-2]}")
    return torch.matmul(x, w) + b


def mlp_forward(params: ParamSet, x: torch.Tensor, final_activation: str = "none") -> torch.Tensor:
    """ReLU MLP; the last layer applies ``final_activation`` (linear by default)."""
    n = _n_layers(params)
    for i in range(n):
        x = affine(x, params[f"{i}.w"], params[f"{i}.b"])
        if i < n - 1:
            x = torch.relu(x)
    if final_activation == "relu":
        x = torch.relu(x)
    elif final_activation == "softmax":
        x = torch.softmax(x, dim=-1)
    elif final_activation != "none":
        raise InputError(f"unknown activation {final_activation!r}")
    if not torch.isfinite(x).all():
        raise NumericError("non-finite network output")
    return x


@dataclass
class RecurrentState:
    hidden: torch.Tensor
    step: int = 0

    @classmethod
    def zeros(cls, *shape: int, dtype: torch.dtype = torch.float32) -> "RecurrentState":
        return cls(torch.zeros(*shape, dtype=dtype), 0)


def gru_cell(params: ParamSet, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    w_ih, w_hh = params["w_ih"], params["w_hh"]
    hidden = w_hh.shape[-2]
    if x.shape[-1] != w_ih.shape[-2] or h.shape[-1] != hidden:
        raise InputError("GRU input/hidden width mismatch")
    gi = torch.matmul(x, w_ih) + params["b_ih"]
    gh = torch.matmul(h, w_hh) + params["b_hh"]
    i_r, i_z, i_n = gi.split(hidden, dim=-1)
    h_r, h_z, h_n = gh.split(hidden, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


def gru_step(params: ParamSet, state: RecurrentState, x: torch.Tensor) -> RecurrentState:
    return RecurrentState(gru_cell(params, state.hidden, x), state.step + 1)


# ---------------------------------------------------------------------------
# gradients and updates


def compute_gradients(loss: torch.Tensor, params: ParamSet, retain_graph: bool = False) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss; parameters it does not touch get zeros."""
    if loss.dim() != 0:
        raise InputError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    tensors = params.values()
    grads = torch.autograd.grad(loss, tensors, retain_graph=retain_graph, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


def clip_grad_norm(grads: list[torch.Tensor], max_norm: float, slots: int | None = None) -> list[torch.Tensor]:
    """Global-norm clipping, computed separately for every agent slot when ``slots`` is set."""
    if max_norm is None or max_norm <= 0:
        return grads
    if slots is None:
        norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
        scale = torch.clamp(max_norm / (norm + 1e-6), max=1.0).to(grads[0].dtype)
        return [g * scale for g in grads]
    sq = sum((g.double() ** 2).reshape(slots, -1).sum(1) for g in grads)
    scale = torch.clamp(max_norm / (torch.sqrt(sq) + 1e-6), max=1.0).to(grads[0].dtype)
    return [g * scale.view(slots, *([1] * (g.dim() - 1))) for g in grads]


class Adam:
    """Adam over one ParamSet, backed by :class:`torch.optim.Adam`."""

    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self._opt = torch.optim.Adam(params.values(), lr=lr, betas=betas, eps=eps)

    def step(self, grads: Sequence[torch.Tensor], lr: float | None = None) -> bool:
        """Apply one update. Returns False (and leaves everything untouched) on non-finite grads."""
        lr = self.lr if lr is None else lr
        if any(not torch.isfinite(g).all() for g in grads):
            return False
        if lr == 0:
            return True
        for group in self._opt.param_groups:
            group["lr"] = lr
        for p, g in zip(self.params.values(), grads):
            if g.shape != p.shape:
                raise InputError("gradient shape mismatch")
            p.grad = g.detach().clone()
        self._opt.step()
        for p in self.params.values():
            p.grad = None
        self.params.version += 1
        return True

    def state_dict(self) -> dict:
        return self._opt.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self._opt.load_state_dict(state)


def optimizer_update(params: ParamSet, grads: Sequence[torch.Tensor], lr: float, optimizer: Adam | None = None) -> ParamSet:
    """One Adam step; raises :class:`NumericError` (update skipped) on non-finite gradients."""
    optimizer = optimizer or Adam(params, lr)
    if not optimizer.step(grads, lr):
        raise NumericError("non-finite gradient; update skipped")
    return params


@torch.no_grad()
def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """In place: ``target <- (1 - tau) * target + tau * online``."""
    if not 0.0 <= tau <= 1.0:
        raise InputError("tau must be in [0, 1]")
    if target.shapes() != online.shapes():
        raise InputError("target/online shapes differ")
    for k, t in target.items():
        if tau == 1.0:
            t.copy_(online[k])
        elif tau > 0.0:
            t.mul_(1.0 - tau).add_(online[k], alpha=tau)
    return target


def iter_chunks(n: int, n_chunks: int, perm: torch.Tensor) -> Iterable[torch.Tensor]:
    size = math.ceil(n / n_chunks)
    for start in range(0, n, size):
        yield perm[start:start + size]
