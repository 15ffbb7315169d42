"""Reverse-mode autodiff on an execution-ordered tape.

A forward pass appends one node per kernel call; nodes hold the output
value, references to their input nodes, and a closure mapping the output
gradient to input-gradient contributions. Backward sweeps the tape once in
reverse, accumulating additively wherever a node (for example a shared
recursive weight) fans out to several consumers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "tape", "name")

    def __init__(self, value, parents=(), vjp=None, tape=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Node(shape={shape}, name={self.name!r})"


class Tape:
    """Append-only record of one forward pass; single-owner, one backward."""

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}
        self._done = False

    def leaf(self, value: np.ndarray, name: str | None = None) -> Node:
        """Enroll a parameter array; repeated enrollment of the same array
        returns the same node, which is what makes parameter sharing work."""
        node = self._leaves.get(id(value))
        if node is None:
            node = Node(value, tape=self if self.recording else None, name=name)
            self._leaves[id(value)] = node
            if self.recording:
                self._nodes.append(node)
        return node

    def constant(self, value: np.ndarray, name: str | None = None) -> Node:
        """A value that participates in the computation but gets no gradient."""
        return Node(np.asarray(value), tape=None, name=name)

    def record(self, value: np.ndarray, parents: tuple[Node, ...], vjp, name: str | None = None) -> Node:
        if not self.recording or not any(p.requires_grad for p in parents):
            return Node(value, name=name)
        node = Node(value, parents=parents, vjp=vjp, tape=self, name=name)
        self._nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate in reverse execution order.

        Gradients of enrolled parameters are left on their leaf nodes (see
        grad_for); intermediate gradients are freed as soon as consumed.
        """
        if self._done:
            raise RuntimeError("backward() already ran on this tape; build a new tape per forward pass")
        if loss.tape is not self:
            raise RuntimeError("loss node is not on this tape")
        if np.asarray(loss.value).size != 1:
            raise InputError(f"backward needs a scalar loss, got shape {np.asarray(loss.value).shape}")
        self._done = True
        loss.grad = np.ones_like(np.asarray(loss.value))
        for node in reversed(self._nodes):
            if node.grad is None or node.vjp is None:
                continue
            contributions = node.vjp(node.grad)
            for parent, g in zip(node.parents, contributions):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.value.shape:
                    raise RuntimeError(
                        f"gradient shape {g.shape} does not match value shape {parent.value.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g
            node.grad = None
            node.vjp = None
            node.parents = ()

    def grad_for(self, value: np.ndarray) -> np.ndarray | None:
        node = self._leaves.get(id(value))
        return None if node is None else node.grad


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class CoordinateRecord:
    tensor: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: float = 0.0
    per_tensor: dict = field(default_factory=dict)
    worst: CoordinateRecord | None = None
    non_finite: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.max_rel_err < self.tol

    def lines(self) -> list[str]:
        out = [f"{name}: max rel err {err:.3e}" for name, err in sorted(self.per_tensor.items())]
        status = "PASS" if self.passed else "FAIL"
        out.append(f"overall max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) -> {status}")
        return out


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    loss_fn,
    params: dict[str, np.ndarray],
    analytic,
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences of loss_fn.

    loss_fn() must be a deterministic float function of the live arrays in
    `params` (dropout off, batchnorm mode pinned). `analytic` is either a
    dict name -> gradient or a zero-argument callable producing one. Each
    tensor gets `samples` randomly chosen coordinates (all of them when the
    tensor is smaller). float64 only: the step h is meaningless in float32.
    """
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise InputError(f"grad_check runs in float64 only; {name} has dtype {arr.dtype}")
    grads = analytic() if callable(analytic) else analytic
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, arr in params.items():
        ga = grads[name].reshape(-1)
        flat = arr.reshape(-1)
        n_probe = min(samples, flat.size)
        idxs = rng.choice(flat.size, size=n_probe, replace=False)
        worst_t = 0.0
        for idx in idxs:
            old = flat[idx]
            flat[idx] = old + h
            f_plus = loss_fn()
            flat[idx] = old - h
            f_minus = loss_fn()
            flat[idx] = old
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.non_finite.append((name, int(idx)))
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _rel_err(float(ga[idx]), numeric)
            if err > worst_t:
                worst_t = err
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = CoordinateRecord(name, int(idx), float(ga[idx]), numeric, err)
        report.per_tensor[name] = worst_t
    return report
