"""Diagnostics over finished runs: which tokens an adapter touches, where
each token's attention mass lands, and how much composition perturbs each
concept's region.

All aggregation defaults are declared here rather than tuned: influence and
attention summaries average over every layer and every collected sampler
step, and top-mass sets take the top 20% of cells. Artifacts (CSV, PGM,
JSON) are bitwise-reproducible under fixed seeds; floats are written with
repr so round-tripping is exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterRegistry
from .attention import MapCollector
from .diffusion import LatentSample, ToyDenoiser
from .fileio import write_pgm16
from .text import TokenSequence


class AnalysisError(ValueError):
    pass


DEFAULT_TOP_FRACTION = 0.2


# -- token influence ---------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TokenInfluenceReport:
    """Mean L2 magnitude of each adapter's output column, per projection and
    token position, averaged over layers and sampler steps."""

    concepts: tuple[str, ...]
    n_tokens: int
    steps: int
    magnitudes: dict  # (concept, projection, position) -> float

    def magnitude(self, concept: str, projection: str, position: int) -> float:
        return self.magnitudes[(concept, projection, position)]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["concept", "projection", "position", "mean_l2"])
            for (c, p, j) in sorted(self.magnitudes):
                w.writerow([c, p, j, repr(self.magnitudes[(c, p, j)])])


def token_influence(
    model: ToyDenoiser,
    registry: AdapterRegistry,
    seq: TokenSequence,
    collector: MapCollector,
) -> TokenInfluenceReport:
    """Per-token adapter output magnitudes for a completed sampling run.

    The adapter's K/V output depends only on the text side, so the per-step
    values are constant; the step average equals the single-step value, and
    the collector is required only as evidence that a run actually happened.
    """
    if not collector.records:
        raise AnalysisError("no probes collected; run sampling with a collector first")
    steps = len({t for (_, t, _) in collector.records})
    mags: dict = {}
    for adapter in registry.adapters:
        mask = adapter.mask_for(seq)
        for proj in ("K", "V"):
            per_token = np.zeros(seq.X.shape[1])
            for layer in adapter.layers:
                delta = adapter.delta(layer, proj)
                out = delta.array @ seq.X.array
                keep = np.zeros(seq.X.shape[1])
                keep[list(mask.columns)] = 1.0
                out = out * keep
                per_token += np.sqrt((out * out).sum(axis=0))
            per_token /= len(adapter.layers)
            for j in range(seq.X.shape[1]):
                mags[(adapter.concept.concept, proj, j)] = float(per_token[j])
    return TokenInfluenceReport(
        concepts=tuple(a.concept.concept for a in registry.adapters),
        n_tokens=seq.X.shape[1],
        steps=steps,
        magnitudes=mags,
    )


# -- attention aggregation -----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TokenAttentionSummary:
    """DAAM-style aggregation: per token position, the mean attention column
    over layers and steps, normalized to unit mass."""

    positions: tuple[int, ...]
    m: int
    top_fraction: float
    aggregated: dict  # position -> np.ndarray (m,), sums to 1

    def vector(self, position: int) -> np.ndarray:
        return self.aggregated[position]

    def entropy(self, position: int) -> float:
        p = self.aggregated[position]
        nz = p[p > 0]
        return float(-(nz * np.log(nz)).sum())

    def top_cells(self, position: int) -> frozenset[int]:
        k = math.ceil(self.top_fraction * self.m)
        p = self.aggregated[position]
        # stable: ties broken by cell index
        order = np.argsort(-p, kind="stable")
        return frozenset(int(i) for i in order[:k])

    def iou_pair(self, pos_a: int, pos_b: int) -> float:
        a, b = self.top_cells(pos_a), self.top_cells(pos_b)
        return len(a & b) / len(a | b)

    def iou_region(self, position: int, region: frozenset[int] | tuple[int, ...]) -> float:
        a, b = self.top_cells(position), frozenset(region)
        return len(a & b) / len(a | b)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["position", "entropy", "top_fraction"]
                       + [f"cell{i}" for i in range(self.m)])
            for pos in self.positions:
                vec = self.aggregated[pos]
                w.writerow([pos, repr(self.entropy(pos)), repr(self.top_fraction)]
                           + [repr(float(v)) for v in vec])


def attention_summary(
    collector: MapCollector,
    positions: tuple[int, ...] | list[int],
    step_range: tuple[int, int] | None = None,
    top_fraction: float = DEFAULT_TOP_FRACTION,
) -> TokenAttentionSummary:
    """Aggregate collected maps into per-token spatial mass vectors.

    step_range is an inclusive (t_lo, t_hi) filter on the recorded timestep;
    None keeps every record. An empty selection is an error, not an empty
    report."""
    if not collector.records:
        raise AnalysisError("no attention maps collected")
    if not 0 < top_fraction <= 1:
        raise AnalysisError(f"top fraction must be in (0, 1], got {top_fraction}")
    records = collector.records
    if step_range is not None:
        lo, hi = step_range
        records = [r for r in records if lo <= r[1] <= hi]
        if not records:
            raise AnalysisError(f"no maps recorded in step range [{lo}, {hi}]")
    m = records[0][2].m
    agg: dict = {}
    for pos in positions:
        acc = np.zeros(m)
        for (_, _, amap) in records:
            if not 0 <= pos < amap.n:
                raise AnalysisError(f"token position {pos} outside prompt of length {amap.n}")
            acc += amap.a.array[:, pos]
        acc /= acc.sum()
        agg[pos] = acc
    return TokenAttentionSummary(
        positions=tuple(positions), m=m, top_fraction=top_fraction, aggregated=agg
    )


# -- interference --------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class InterferenceReport:
    """Per-concept MSE between solo and composed generations, restricted to
    the concept's own template region."""

    method: str
    region_mse: dict  # concept -> float

    def mean(self) -> float:
        return sum(self.region_mse.values()) / len(self.region_mse)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "concept", "region_mse"])
            for c in sorted(self.region_mse):
                w.writerow([self.method, c, repr(self.region_mse[c])])


def interference(
    solo: dict[str, LatentSample],
    composed: LatentSample,
    regions: dict[str, tuple[int, ...] | frozenset[int]],
    method: str = "tara",
) -> InterferenceReport:
    """MSE over each concept's region rows between its solo sample and the
    composed sample. Solo and composed runs must share seeds and scaffolds
    for the number to mean anything; that is the caller's contract."""
    mse: dict = {}
    for concept, sample in solo.items():
        if concept not in regions:
            raise AnalysisError(f"no region defined for concept {concept!r}")
        rows = sorted(regions[concept])
        a = sample.z.array[rows, :]
        b = composed.z.array[rows, :]
        if a.shape != b.shape:
            raise AnalysisError(
                f"solo and composed latents disagree in shape for {concept!r}"
            )
        mse[concept] = float(((a - b) ** 2).mean())
    return InterferenceReport(method=method, region_mse=mse)


def interference_table(reports: list[InterferenceReport], path: str | Path) -> None:
    """One CSV row per (method, concept) so methods can be compared side by side."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "concept", "region_mse", "method_mean"])
        for rep in reports:
            for c in sorted(rep.region_mse):
                w.writerow([rep.method, c, repr(rep.region_mse[c]), repr(rep.mean())])


# -- artifact emission ----------------------------------------------------------------


def heatmap_to_pgm(vec: np.ndarray, g: int, path: str | Path) -> None:
    if vec.size != g * g:
        raise AnalysisError(f"vector of size {vec.size} is not a {g}x{g} grid")
    write_pgm16(np.asarray(vec, dtype=np.float64).reshape(g, g), path)


def dump_attention_maps(
    collector: MapCollector,
    positions: tuple[int, ...] | list[int],
    g: int,
    out_dir: str | Path,
) -> list[str]:
    """Write one PGM per (layer, step, token) plus an index CSV; returns the
    written filenames in index order."""
    if not collector.records:
        raise AnalysisError("no attention maps collected")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names: list[str] = []
    rows: list[tuple] = []
    for (layer, t, amap) in collector.records:
        for pos in positions:
            name = f"l{layer}_t{t}_tok{pos}.pgm"
            heatmap_to_pgm(amap.a.array[:, pos], g, out / name)
            names.append(name)
            rows.append((layer, t, pos, name))
    with open(out / "index.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "timestep", "position", "file"])
        w.writerows(rows)
    return names


def write_summary_json(path: str | Path, payload: dict) -> None:
    """Stable machine-readable rollup: sorted keys, no timestamps."""
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
