"""Low-rank adaptation of named 2-D weights.

An adapter holds (A, B) with update (alpha/rank) * B @ A against a frozen
base weight W of shape (d_out, d_in). B starts at zero, so a fresh adapter
is exactly transparent. alpha defaults to the rank, making the update scale
alpha/rank equal to 1.

`strict_rank` enforces rank <= min(d_in, d_out). Rank sweeps mirroring the
reference grid up to 256 exceed the toy backbone's dimensions, so the sweep
attaches with strict_rank=False: the update is then merely rank-deficient
while the trainable-parameter count stays exactly r * (d_in + d_out).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError
from .rng import Stream
from . import tensor as T

INIT_STD = 0.02


@dataclass
class LoraAdapter:
    target: str
    rank: int
    alpha: float
    A: T.Tensor  # (rank, d_in)
    B: T.Tensor  # (d_out, rank)
    enabled: bool = True

    def delta(self) -> np.ndarray:
        return (self.alpha / self.rank) * (self.B.data @ self.A.data)


def attach(base: dict[str, T.Tensor], targets: list[str], rank: int,
           alpha: float | None = None, seed: int = 0,
           strict_rank: bool = True) -> dict[str, LoraAdapter]:
    """Freeze the targeted base weights and return zero-initialized adapters."""
    if rank < 1:
        raise ConfigError(f"rank {rank} must be >= 1")
    if alpha is None:
        alpha = float(rank)
    stream = Stream(seed, "lora-init")
    adapters: dict[str, LoraAdapter] = {}
    for name in targets:
        if name not in base:
            raise ConfigError(f"unknown adapter target {name!r}")
        w = base[name]
        if w.data.ndim != 2:
            raise ConfigError(f"target {name!r} is not a 2-D weight")
        d_out, d_in = w.shape
        if strict_rank and rank > min(d_in, d_out):
            raise ConfigError(f"rank {rank} exceeds min dim of {name!r} ({min(d_in, d_out)})")
        w.requires_grad = False
        a = T.Tensor(stream.normal((rank, d_in)) * INIT_STD, requires_grad=True)
        b = T.Tensor(np.zeros((d_out, rank)), requires_grad=True)
        adapters[name] = LoraAdapter(target=name, rank=rank, alpha=alpha, A=a, B=b)
    return adapters


def adapted_forward(x: T.Tensor, base_w: T.Tensor, adapter: LoraAdapter) -> T.Tensor:
    """W x + (alpha/rank) B (A x) for column-stacked x of shape (d_in, n)."""
    y = T.matmul(base_w, x)
    if not adapter.enabled:
        return y
    low = T.matmul(adapter.B, T.matmul(adapter.A, x))
    return T.add(y, T.scale(low, adapter.alpha / adapter.rank))


def merge(base_w: T.Tensor, adapter: LoraAdapter) -> T.Tensor:
    return T.Tensor(base_w.data + adapter.delta())


def unmerge(merged_w: T.Tensor, adapter: LoraAdapter) -> T.Tensor:
    return T.Tensor(merged_w.data - adapter.delta())


def trainable_param_count(adapters, plus_trainable_extras: int = 0) -> int:
    vals = adapters.values() if isinstance(adapters, dict) else adapters
    total = plus_trainable_extras
    for a in vals:
        r, d_in = a.A.shape
        d_out = a.B.shape[0]
        total += r * (d_in + d_out)
    return total


def trainable_params(adapters: dict[str, LoraAdapter]) -> list[T.Tensor]:
    out: list[T.Tensor] = []
    for a in adapters.values():
        out += [a.A, a.B]
    return out


def save_adapters(path: str | Path, adapters: dict[str, LoraAdapter]) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, a in adapters.items():
        tensors[f"lora.{name}.A"] = a.A.data
        tensors[f"lora.{name}.B"] = a.B.data
    save_checkpoint(path, tensors)
    any_a = next(iter(adapters.values()))
    sidecar = Path(path).with_suffix(".lora.txt")
    sidecar.write_text(
        f"rank = {any_a.rank}\nalpha = {any_a.alpha}\n"
        f"targets = {','.join(sorted(adapters))}\n"
    )


def load_adapters(path: str | Path, base: dict[str, T.Tensor]) -> dict[str, LoraAdapter]:
    tensors = load_checkpoint(path)
    sidecar = Path(path).with_suffix(".lora.txt")
    meta = dict(line.split(" = ", 1) for line in sidecar.read_text().splitlines())
    rank = int(meta["rank"])
    alpha = float(meta["alpha"])
    adapters: dict[str, LoraAdapter] = {}
    for name in meta["targets"].split(","):
        adapters[name] = LoraAdapter(
            target=name, rank=rank, alpha=alpha,
            A=T.Tensor(tensors[f"lora.{name}.A"], requires_grad=True),
            B=T.Tensor(tensors[f"lora.{name}.B"], requires_grad=True),
        )
        base[name].requires_grad = False
    return adapters
