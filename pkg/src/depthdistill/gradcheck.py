"""Finite-difference verification of reverse-mode gradients.

Central differences with a fixed probe step; coordinates are subsampled
per tensor with a seeded generator so reports are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor

EPS = 1e-5
REL_TOL = 1e-4
COORDS_PER_TENSOR = 32


@dataclass
class GradReport:
    """Outcome of one finite-difference sweep."""

    name: str
    checked: int = 0
    worst_rel: float = 0.0
    worst_coord: tuple = ()
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _rel_err(a: float, f: float) -> float:
    # central differences of an O(1) scalar carry ~|f|*2^-52/eps absolute
    # noise (~1e-11 at eps 1e-5), so gradients below the floor are compared
    # absolutely; a wrong sign or scale there still lands far above tol
    return abs(a - f) / max(abs(a), abs(f), 1e-6)


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    seed: int = 0,
    eps: float = EPS,
    rel_tol: float = REL_TOL,
    coords: int = COORDS_PER_TENSOR,
) -> list[GradReport]:
    """Compare analytic grads of scalar ``fn()`` against central differences.

    ``fn`` must be a pure function of the tensors in ``params`` (re-invoked
    many times with perturbed data). Checks min(coords, size) coordinates
    per tensor, chosen by a generator seeded from ``seed`` and the param
    order, so runs are reproducible. Non-finite analytic or numeric values
    fail the coordinate outright with the parameter named in the report.
    """
    for p in params.values():
        p.grad = None
    out = fn()
    out.backward()
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} received no gradient")
        analytic[name] = p.grad.copy()

    reports = []
    for idx, (name, p) in enumerate(params.items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        n = p.data.size
        flat = p.data.reshape(-1)
        take = min(coords, n)
        picks = rng.choice(n, size=take, replace=False)
        rep = GradReport(name=name, checked=take)
        for ci in picks:
            ci = int(ci)
            keep = flat[ci]
            flat[ci] = keep + eps
            f_plus = float(fn().data.reshape(()))
            flat[ci] = keep - eps
            f_minus = float(fn().data.reshape(()))
            flat[ci] = keep
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(analytic[name].reshape(-1)[ci])
            coord = tuple(int(v) for v in np.unravel_index(ci, p.data.shape))
            if not (np.isfinite(fd) and np.isfinite(an)):
                rep.failures.append((coord, an, fd, float("inf")))
                continue
            rel = _rel_err(an, fd)
            if rel > rep.worst_rel:
                rep.worst_rel = rel
                rep.worst_coord = coord
            if rel >= rel_tol:
                rep.failures.append((coord, an, fd, rel))
        reports.append(rep)
    return reports


def format_reports(reports: Sequence[GradReport]) -> str:
    lines = []
    for r in reports:
        if r.ok:
            lines.append(f"PASS {r.name}: {r.checked} coords, worst rel {r.worst_rel:.3e}")
        else:
            c, an, fd, rel = r.failures[0]
            lines.append(
                f"FAIL {r.name}: {len(r.failures)}/{r.checked} coords off, "
                f"first at {c}: analytic {an:.6e} vs numeric {fd:.6e} (rel {rel:.3e})"
            )
    return "\n".join(lines)
