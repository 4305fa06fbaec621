"""Bundled mini-kernels with reference inputs and random-input generators."""

from __future__ import annotations

import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

from ..mir import Module, parse_module
from ..vm import parse_inputs


def _floats(rng: random.Random, n: int) -> list[float]:
    return [round(rng.uniform(-8.0, 8.0), 3) for _ in range(n)]


def _dot(rng):
    n = rng.randint(1, 64)
    return {"n": n, "x": _floats(rng, n), "y": _floats(rng, n)}


def _saxpy(rng):
    n = rng.randint(1, 64)
    return {"n": n, "a": round(rng.uniform(-4, 4), 3), "x": _floats(rng, n), "y": _floats(rng, n)}


def _saxpy_even(rng):
    n = 2 * rng.randint(1, 32)
    return {"n": n, "a": round(rng.uniform(-4, 4), 3), "x": _floats(rng, n), "y": _floats(rng, n)}


def _stencil(rng):
    n = rng.randint(3, 64)
    return {"n": n, "c": round(rng.uniform(-2, 2), 3), "a": _floats(rng, n)}


def _gather2d(rng):
    return {
        "ni": rng.randint(1, 8), "nm": rng.randint(1, 16), "n": rng.randint(1, 8),
        "mzeta": rng.randint(0, 8),
        "kidx": [rng.randint(1, 16) for _ in range(16)],
        "wtp_g": _floats(rng, 512), "phitmp_g": _floats(rng, 256),
        "phism": _floats(rng, 16),
    }


def _ptrwalk(rng):
    n = rng.randint(1, 40)
    return {"n": n, "start": rng.randint(0, 80 - n), "arr": [rng.randint(-99, 99) for _ in range(80)]}


def _sr(rng):
    n = rng.randint(1, 64)
    return {"n": n, "off": rng.randint(0, 128 - n), "a": round(rng.uniform(-4, 4), 3),
            "x": _floats(rng, 128)}


@dataclass(frozen=True)
class KernelSpec:
    name: str
    baseline: str  # passes a conventional compiler would already have applied
    description: str
    input_gen: Callable[[random.Random], dict]

    def source(self) -> str:
        return resources.files(__package__).joinpath(f"{self.name}.mir").read_text()

    def module(self) -> Module:
        return parse_module(self.source(), f"{self.name}.mir")

    def reference_input(self) -> dict:
        return parse_inputs(resources.files(__package__).joinpath(f"{self.name}.in").read_text())

    def random_input(self, seed: int) -> dict:
        return self.input_gen(random.Random(seed))


KERNELS: dict[str, KernelSpec] = {k.name: k for k in (
    KernelSpec("dot", "unroll:4", "dot product with a float reduction, unrolled by 4", _dot),
    KernelSpec("saxpy", "", "y = a*x + y, single induction variable", _saxpy),
    KernelSpec("saxpy_unrolled", "", "saxpy hand-unrolled twice (i and i+1 accesses)", _saxpy_even),
    KernelSpec("stencil", "", "three-point stencil reading a[i-1], a[i], a[i+1]", _stencil),
    KernelSpec("gather2d", "", "nested indexed gather with a loaded index k", _gather2d),
    KernelSpec("ptrwalk", "", "pointer walk *A++ = i++ with a dead base pointer", _ptrwalk),
    KernelSpec("sr_showcase", "sr", "y[3*i+5] = x[j]*a, strength-reduced", _sr),
)}


def kernel_names() -> list[str]:
    return list(KERNELS)


def get_kernel(name: str) -> KernelSpec:
    try:
        return KERNELS[name]
    except KeyError:
        raise KeyError(f"unknown kernel {name!r}; bundled: {', '.join(KERNELS)}") from None


@dataclass(frozen=True)
class FileKernel:
    """A kernel read from disk; quacks like KernelSpec for campaigns."""

    path: str
    input_path: str | None = None
    baseline: str = ""

    @property
    def name(self) -> str:
        return Path(self.path).stem

    def source(self) -> str:
        return Path(self.path).read_text()

    def module(self) -> Module:
        return parse_module(self.source(), Path(self.path).name)

    def reference_input(self) -> dict:
        if self.input_path is None:
            sibling = Path(self.path).with_suffix(".in")
            return parse_inputs(sibling.read_text()) if sibling.exists() else {}
        return parse_inputs(Path(self.input_path).read_text())


def resolve_kernel(target: str, input_path: str | None = None) -> KernelSpec | FileKernel:
    """A bundled kernel by name, or a ``.mir`` file on disk."""
    if target in KERNELS and input_path is None and not Path(target).exists():
        return KERNELS[target]
    if not Path(target).exists():
        raise KeyError(f"no such file or bundled kernel: {target!r}")
    return FileKernel(target, input_path)
