"""Single-concept adapter training: alignment loss, combined objective, loop.

The alignment term pulls the rare token's adapted key toward the class
token's frozen key, layer by layer, in L1. Only the Key-path adapter enters
that expression, so its gradient into Value-path weights is exactly zero;
the Value path trains purely from the denoising error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

from .adapters import AdapterRegistry, LoraAdapter, init_adapter
from .diffusion import LatentSample, NoiseSchedule, ToyDenoiser, denoise_loss
from .numerics import (
    Matrix,
    NonFiniteError,
    Tape,
    add,
    col_select,
    l1_norm,
    matmul,
    scale,
    sub,
)
from .optim import make_optimizer
from .seeding import TAG_TRAIN_NOISE, rng_stream
from .text import TokenSequence
from .worlds import ConceptSpec, ToyWorld


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"training diverged at step {step}")
        self.step = step


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Hyperparameters. The stock defaults are the reference recipe
    (rank 8, lr 1e-5, batch 1, 1000 epochs, unit alignment weight); desk-scale
    runs override epochs/steps and learning rate explicitly."""

    learning_rate: float = 1e-5
    batch_size: int = 1
    epochs: int = 1000
    lam: float = 1.0
    rank: int = 8
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0
    max_steps: int | None = None
    t_lo: int = 20
    t_hi: int = 40

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.lam < 0:
            raise TrainingError(f"alignment weight must be >= 0, got {self.lam}")
        if self.rank < 1:
            raise TrainingError(f"rank must be >= 1, got {self.rank}")
        if self.batch_size < 1 or self.epochs < 0:
            raise TrainingError("batch size must be >= 1 and epochs >= 0")

    def total_steps(self, n_refs: int) -> int:
        per_epoch = max(1, -(-n_refs // self.batch_size))  # ceil
        steps = self.epochs * per_epoch
        if self.max_steps is not None:
            steps = min(steps, self.max_steps)
        return steps


def desk_recipe(seed: int = 0, **overrides) -> TrainConfig:
    """Fast validated recipe for the miniature setting: Adam with a large
    step works where SGD cannot, because the L1 alignment gradient is a
    constant-magnitude sign pattern per coordinate."""
    base = dict(learning_rate=0.01, optimizer="adam", epochs=10**9,
                max_steps=400, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True, slots=True)
class ConceptDataset:
    """A concept's reference latents plus its training prompt."""

    spec: ConceptSpec
    references: tuple[LatentSample, ...]
    prompt: tuple[str, ...]
    seq: TokenSequence

    def __post_init__(self):
        if not 4 <= len(self.references) <= 6:
            raise TrainingError(f"need 4..6 references, got {len(self.references)}")


def make_dataset(world: ToyWorld, spec: ConceptSpec, ref_seed: int | None = None) -> ConceptDataset:
    prompt = tuple(world.prompt_solo(spec))
    seq = world.encode([world.binding(spec)], prompt)
    return ConceptDataset(
        spec=spec,
        references=tuple(world.references(spec, ref_seed)),
        prompt=prompt,
        seq=seq,
    )


# -- losses -----------------------------------------------------------------------


def align_loss(model: ToyDenoiser, adapter: LoraAdapter, seq: TokenSequence) -> Matrix:
    """Mean over layers of L1 distance between the class token's frozen key
    and the rare token's adapted key."""
    concept = adapter.concept.concept
    rare = sorted(seq.rare_positions_of(concept))
    klass = sorted(seq.class_positions_of(concept))
    if len(rare) != 1 or len(klass) != 1:
        raise TrainingError(
            f"alignment needs exactly one rare and one class position for {concept!r}, "
            f"got rare={rare}, class={klass}"
        )
    x_r = col_select(seq.X, (rare[0],))
    x_c = col_select(seq.X, (klass[0],))
    total = None
    for layer in adapter.layers:
        w_k = model.blocks[layer].attn.w_k
        b, a = adapter.factors(layer, "K")
        adapted = add(matmul(w_k, x_r), matmul(b, matmul(a, x_r)))
        term = l1_norm(sub(matmul(w_k, x_c), adapted))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(adapter.layers))


def total_loss(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    adapter: LoraAdapter,
    registry: AdapterRegistry,
    seq: TokenSequence,
    z0: LatentSample,
    t: int,
    eps: Matrix,
    lam: float,
) -> tuple[Matrix, Matrix, Matrix | None]:
    """(total, denoise, align) losses; align is None when lam == 0.

    With lam == 0 the alignment term is skipped outright, so the total is
    the denoising loss object itself, not a sum with a zero."""
    d_loss = denoise_loss(model, schedule, registry, seq, z0, t, eps)
    if lam == 0.0:
        return d_loss, d_loss, None
    a_loss = align_loss(model, adapter, seq)
    return add(d_loss, scale(a_loss, lam)), d_loss, a_loss


# -- loop -------------------------------------------------------------------------


@dataclass(slots=True)
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, step: int, denoise: float, align: float, total: float) -> None:
        self.rows.append((step, denoise, align, total))

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "denoise", "align", "total"])
            for row in self.rows:
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])

    @classmethod
    def load_csv(cls, path: str | Path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as f:
            r = csv.reader(f)
            next(r)
            for row in r:
                log.append(int(row[0]), float(row[1]), float(row[2]), float(row[3]))
        return log


def _run_loop(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    dataset: ConceptDataset,
    config: TrainConfig,
    adapter: LoraAdapter,
) -> tuple[LoraAdapter, TrainLog]:
    base_sum = model.checksum()
    reg = AdapterRegistry()
    reg.register(adapter)
    opt = make_optimizer(config.optimizer, config.learning_rate, config.momentum)
    rng = rng_stream(config.seed, TAG_TRAIN_NOISE)
    refs = dataset.references
    steps = config.total_steps(len(refs))
    log = TrainLog()

    for step in range(steps):
        batch = [refs[(step * config.batch_size + i) % len(refs)] for i in range(config.batch_size)]
        draws = [
            (int(rng.integers(config.t_lo, config.t_hi + 1)),
             Matrix(rng.standard_normal((model.m, model.d_model))))
            for _ in batch
        ]
        try:
            with Tape() as tape:
                params = {n: adapter.get_param(n) for n in adapter.param_names()}
                for pname, mat in params.items():
                    tape.watch(mat, pname)
                tot = d_acc = a_acc = None
                for z0, (t, eps) in zip(batch, draws):
                    t_l, d_l, a_l = total_loss(
                        model, schedule, adapter, reg, dataset.seq, z0, t, eps, config.lam
                    )
                    tot = t_l if tot is None else add(tot, t_l)
                    d_acc = d_l if d_acc is None else add(d_acc, d_l)
                    if a_l is not None:
                        a_acc = a_l if a_acc is None else add(a_acc, a_l)
                if config.batch_size > 1:
                    tot = scale(tot, 1.0 / config.batch_size)
            grads = tape.grad(tot)
        except NonFiniteError:
            raise TrainingDiverged(step) from None
        try:
            new = opt.step(params, grads)
        except NonFiniteError:
            raise TrainingDiverged(step) from None
        for pname, mat in new.items():
            adapter.set_param(pname, mat)

        denom = float(config.batch_size)
        d_val = d_acc.item() / denom
        a_val = (a_acc.item() / denom) if a_acc is not None else 0.0
        log.append(step, d_val, a_val, d_val + config.lam * a_val)

    if model.checksum() != base_sum:
        raise TrainingError("base model weights changed during adapter training")
    return adapter, log


def train_concept(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    dataset: ConceptDataset,
    config: TrainConfig,
    world_seed: int = 0,
) -> tuple[LoraAdapter, TrainLog]:
    """Token-focused adapter trained with the combined objective."""
    binding = _binding_of(dataset)
    adapter = init_adapter(
        binding,
        config.rank,
        tuple(range(model.L)),
        "gaussian",
        config.seed,
        d_model=model.d_model,
        d_text=model.d_text,
        mask_policy="token-focused",
    )
    return _run_loop(model, schedule, dataset, config, adapter)


def train_baseline(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    dataset: ConceptDataset,
    config: TrainConfig,
    mode: str,
) -> tuple[LoraAdapter, TrainLog]:
    """Unmasked baseline: no token masking, no alignment term.

    db-lora-unmasked trains both factors; rob additionally freezes a
    randomized orthonormal A so concepts occupy fixed distinct subspaces."""
    if mode not in ("db-lora-unmasked", "rob"):
        raise TrainingError(f"unknown baseline mode {mode!r}")
    binding = _binding_of(dataset)
    adapter = init_adapter(
        binding,
        config.rank,
        tuple(range(model.L)),
        "rob" if mode == "rob" else "gaussian",
        config.seed,
        d_model=model.d_model,
        d_text=model.d_text,
        mask_policy="unmasked-baseline",
    )
    cfg = replace(config, lam=0.0)
    return _run_loop(model, schedule, dataset, cfg, adapter)


def _binding_of(dataset: ConceptDataset):
    from .text import ConceptBinding

    concept = dataset.spec.name
    rare = sorted(dataset.seq.rare_positions_of(concept))
    klass = sorted(dataset.seq.class_positions_of(concept))
    if len(rare) != 1 or len(klass) != 1:
        raise TrainingError(f"dataset prompt must mention {concept!r} exactly once")
    return ConceptBinding(concept, dataset.seq.ids[rare[0]], dataset.seq.ids[klass[0]])


# -- fixed-probe evaluation ---------------------------------------------------------


def probe_losses(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    adapter: LoraAdapter | None,
    dataset: ConceptDataset,
    probe_seed: int = 7,
    n_probes: int = 16,
    t_lo: int = 20,
    t_hi: int = 40,
) -> tuple[float, float]:
    """(denoise, align) means over a fixed probe batch.

    The probe draws depend only on probe_seed, so step-0 and end-of-run
    calls measure the same integrand with different adapter states."""
    reg = AdapterRegistry()
    if adapter is not None:
        reg.register(adapter)
    rng = rng_stream(probe_seed, TAG_TRAIN_NOISE, 999)
    refs = dataset.references
    d_tot = 0.0
    for i in range(n_probes):
        z0 = refs[i % len(refs)]
        t = int(rng.integers(t_lo, t_hi + 1))
        eps = Matrix(rng.standard_normal((model.m, model.d_model)))
        d_tot += denoise_loss(model, schedule, reg if adapter else None, dataset.seq, z0, t, eps).item()
    a_val = align_loss(model, adapter, dataset.seq).item() if adapter is not None else 0.0
    return d_tot / n_probes, a_val
