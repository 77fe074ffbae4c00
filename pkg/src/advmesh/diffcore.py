"""Learnable-parameter blocks, ADAM updates, and a finite-difference checker.

Gradients are hand-derived adjoints accumulated into each block's `grad`
buffer by explicit backward calls; there is no tape. Everything runs in
float64. Checkpoints are a JSON header plus a flat binary blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ParamBlock:
    """Named learnable array with a gradient accumulator and optional bounds."""

    name: str
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        for bound in ("lower", "upper"):
            b = getattr(self, bound)
            if b is not None:
                b = np.broadcast_to(np.asarray(b, dtype=np.float64), self.values.shape)
                setattr(self, bound, np.ascontiguousarray(b))
        if self.lower is not None and self.upper is not None:
            if np.any(self.lower > self.upper):
                raise ValueError(f"{self.name}: lower bound exceeds upper bound")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def add_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.grad.shape:
            raise ValueError(f"{self.name}: gradient shape {g.shape} != {self.grad.shape}")
        self.grad += g

    def clamp_to_bounds(self) -> None:
        if self.lower is not None:
            np.maximum(self.values, self.lower, out=self.values)
        if self.upper is not None:
            np.minimum(self.values, self.upper, out=self.values)

    def in_bounds(self) -> bool:
        ok = True
        if self.lower is not None:
            ok = ok and bool(np.all(self.values >= self.lower))
        if self.upper is not None:
            ok = ok and bool(np.all(self.values <= self.upper))
        return ok


@dataclass
class AdamState:
    """Per-block ADAM moments and hyperparameters."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ensure_shape(self, shape) -> None:
        if self.m is None:
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)
        elif self.m.shape != tuple(shape):
            raise ValueError(f"moment shape {self.m.shape} != parameter shape {tuple(shape)}")


def adam_step(params: ParamBlock, state: AdamState) -> None:
    """One bias-corrected ADAM update in place; bounded values are clamped after.

    Gradients are left untouched; the caller zeroes them between steps.
    """
    state.ensure_shape(params.values.shape)
    if params.grad.shape != params.values.shape:
        raise ValueError("gradient/value shape mismatch")
    state.step_count += 1
    t = state.step_count
    g = params.grad
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.clamp_to_bounds()


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing: list[tuple[int, float, float, float]]  # (flat index, analytic, numeric, rel err)
    n_checked: int

    @property
    def passed(self) -> bool:
        return not self.failing


def finite_diff_check(
    f,
    params: ParamBlock,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    indices=None,
) -> GradCheckReport:
    """Compare accumulated analytic grads against central differences of f.

    `f` takes the ParamBlock and returns a scalar; it must be deterministic.
    Relative error uses max(1, |analytic|, |numeric|) as the denominator.
    `indices` optionally restricts the check to a subset of flat indices.
    """
    flat = params.values.reshape(-1)
    grad = params.grad.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    failing = []
    max_err = 0.0
    n = 0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(f(params))
        flat[i] = orig - epsilon
        f_minus = float(f(params))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite objective at {params.name}[{i}]")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = grad[i]
        rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        max_err = max(max_err, rel)
        if rel > tolerance:
            failing.append((int(i), float(analytic), float(numeric), float(rel)))
        n += 1
    return GradCheckReport(max_rel_error=max_err, failing=failing, n_checked=n)


_MAGIC = b"ADVMESHCKPT1"


def save_checkpoint(path, blocks: list[ParamBlock], meta: dict | None = None, step: int = 0) -> None:
    """Serialize blocks as a JSON header plus concatenated float64 arrays."""
    header = {
        "step": int(step),
        "meta": meta or {},
        "blocks": [
            {
                "name": b.name,
                "shape": list(b.values.shape),
                "bounded": b.lower is not None or b.upper is not None,
            }
            for b in blocks
        ],
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for b in blocks:
            fh.write(np.ascontiguousarray(b.values, dtype="<f8").tobytes())
            if b.lower is not None or b.upper is not None:
                lo = b.lower if b.lower is not None else np.full_like(b.values, -np.inf)
                hi = b.upper if b.upper is not None else np.full_like(b.values, np.inf)
                fh.write(np.ascontiguousarray(lo, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(hi, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[list[ParamBlock], dict, int]:
    """Inverse of save_checkpoint; returns (blocks, meta, step)."""
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not an advmesh checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    blocks = []
    for spec in header["blocks"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += count * 8
        lo = hi = None
        if spec["bounded"]:
            lo = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += count * 8
            hi = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += count * 8
            if np.all(np.isneginf(lo)):
                lo = None
            if np.all(np.isposinf(hi)):
                hi = None
        blocks.append(ParamBlock(spec["name"], vals, lower=lo, upper=hi))
    return blocks, header["meta"], header["step"]
