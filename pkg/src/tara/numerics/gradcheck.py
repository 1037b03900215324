"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .matrix import Matrix
from .tape import Tape

LossFn = Callable[[Mapping[str, Matrix], "Tape | None"], Matrix]


@dataclass(slots=True)
class BlockReport:
    """Worst-case comparison for one parameter block."""

    name: str
    checked: int
    max_rel_err: float
    worst_index: tuple[int, int]
    analytic: float
    numeric: float


@dataclass(slots=True)
class FdReport:
    blocks: dict[str, BlockReport] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        if not self.blocks:
            return 0.0
        return max(b.max_rel_err for b in self.blocks.values())

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks.values():
            out.append(
                f"{b.name}: max_rel_err={b.max_rel_err:.3e} at {b.worst_index} "
                f"(analytic={b.analytic:.6e}, numeric={b.numeric:.6e}, n={b.checked})"
            )
        return out


def fd_check(
    loss_fn: LossFn,
    params: Mapping[str, Matrix],
    *,
    step: float = 1e-5,
    floor: float = 1e-6,
    samples_per_block: int | None = None,
    seed: int = 0,
) -> FdReport:
    """Compare tape gradients of `loss_fn` against central differences.

    `loss_fn(params, tape)` must return a 1x1 Matrix; when `tape` is not None
    the implementation is expected to watch each entry of `params` on it under
    its dict key. The step for entry w is `step * max(1, |w|)`, and relative
    error uses a `floor` in the denominator so near-zero gradients do not
    blow up the ratio. `samples_per_block` caps how many entries per block
    are probed (seeded choice without replacement); None checks all.
    """
    with Tape() as tape:
        watched = {k: tape.watch(m, k) for k, m in params.items()}
        loss = loss_fn(watched, tape)
    if tape.tracks(loss):
        grads = tape.grad(loss)
    else:
        # loss never touched a watched leaf: the gradient field is zero
        grads = {k: Matrix.zeros(m.rows, m.cols) for k, m in params.items()}

    rng = np.random.default_rng(seed)
    report = FdReport()
    for name, m in params.items():
        g = grads[name].array
        n_entries = m.rows * m.cols
        if samples_per_block is None or samples_per_block >= n_entries:
            flat_idx = np.arange(n_entries)
        else:
            flat_idx = rng.choice(n_entries, size=samples_per_block, replace=False)

        worst = BlockReport(name, len(flat_idx), 0.0, (0, 0), g.flat[0], 0.0)
        base = m.array
        for k in flat_idx:
            i, j = divmod(int(k), m.cols)
            w = base[i, j]
            h = step * max(1.0, abs(w))

            plus = base.copy()
            plus[i, j] = w + h
            minus = base.copy()
            minus[i, j] = w - h
            p_plus = dict(params)
            p_plus[name] = Matrix(plus)
            p_minus = dict(params)
            p_minus[name] = Matrix(minus)

            f_plus = loss_fn(p_plus, None).item()
            f_minus = loss_fn(p_minus, None).item()
            fd = (f_plus - f_minus) / (2.0 * h)
            an = g[i, j]
            rel = abs(an - fd) / max(abs(an), abs(fd), floor)
            if rel >= worst.max_rel_err:
                worst.max_rel_err = rel
                worst.worst_index = (i, j)
                worst.analytic = an
                worst.numeric = fd
        report.blocks[name] = worst
    return report
