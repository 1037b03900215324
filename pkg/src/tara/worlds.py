"""Synthetic concept world and base-model pretraining.

The desk-scale stand-in for a photo dataset: four object classes, each
owning one quadrant of the g x g patch grid and one unit channel direction.
A class template is the rank-one pattern (region indicator) x (direction);
a personalized concept is the same template plus a rank-one deviation in a
concept-specific channel direction on the same region. Scenes are sums of
templates over disjoint regions, so ground-truth regions are known and the
analysis layer never needs segmentation.

The base denoiser is pretrained here on class-level scenes with an
auxiliary attention-guide term that teaches each class token to attend to
its own region. That localization is what makes the alignment loss
meaningful downstream: a rare token pulled onto its class's keys inherits
a spatially correct attention column. After pretraining the base is
frozen; training adapters never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import LatentSample, NoiseSchedule, ToyDenoiser, noise
from .numerics import (
    Matrix,
    Tape,
    add,
    col_select,
    mean_sq_error,
    scale,
)
from .attention import MapCollector
from .optim import Adam
from .seeding import TAG_BASE_MODEL, TAG_REFERENCES, TAG_WORLD, rng_stream
from .text import ConceptBinding, TokenSequence, Vocabulary, build_vocab, encode_prompt

CLASS_NAMES = ("dog", "cat", "toy", "vase")
RARE_WORDS = ("v1*", "v2*", "v3*", "v4*")
FILLER_WORDS = ("a", "and", "photo", "of", "the")


class WorldError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class ToyConfig:
    """Everything needed to rebuild the world and its base model bitwise."""

    seed: int = 0
    g: int = 8
    d_model: int = 32
    d_text: int = 32
    layers: int = 4
    hidden: int = 32
    heads: int = 1
    T: int = 100
    # beta_end is chosen so abar(T) ~ 5e-5: the forward process must actually
    # reach the Gaussian prior the sampler starts from, or from-scratch
    # generation sees inputs it was never trained on and cannot place content
    beta_start: float = 1e-4
    beta_end: float = 0.2
    # template amplitude sets the query signal-to-noise ratio inside the
    # adapter timestep band; below ~4 the class-token attention columns blur
    # and a static adapter cannot recover the concept deviation cleanly
    template_amplitude: float = 6.0
    concept_amplitude: float = 5.0
    jitter_sigma: float = 0.1
    n_references: int = 5
    # adapter training (and its probes) sample timesteps from this band,
    # where the deviation gain sqrt(abar/(1-abar)) stays near 1; toward t=1
    # it needs unbounded gain and toward t=T it vanishes, and a static
    # adapter can only express a constant
    t_lo: int = 20
    t_hi: int = 40
    # pretraining skips t below this floor: there the target is a difference
    # of two near-equal large terms (gain 1/sqrt(1-abar) approaches 100) that
    # the network cannot cancel, and the sampler weights predictions at those
    # steps by sqrt(1-abar), which is nearly zero
    pretrain_t_floor: int = 15
    # every forward pass scales the latent by min(1/sqrt(1-abar(t)), cap) so
    # the pass-through part of the target keeps unit weight at all t
    input_gain_cap: float = 3.0
    pretrain_steps: int = 3000
    pretrain_lr: float = 3e-3
    guide_weight: float = 3.0

    def __post_init__(self):
        if self.g < 2 or self.g % 2:
            raise WorldError(f"grid side must be even and >= 2, got {self.g}")
        if not 1 <= self.t_lo <= self.t_hi <= self.T:
            raise WorldError(f"timestep band [{self.t_lo}, {self.t_hi}] outside [1, {self.T}]")
        if not 1 <= self.pretrain_t_floor <= self.T:
            raise WorldError(f"pretrain floor {self.pretrain_t_floor} outside [1, {self.T}]")
        if not 4 <= self.n_references <= 6:
            raise WorldError(f"reference count must be 4..6, got {self.n_references}")

    @property
    def m(self) -> int:
        return self.g * self.g


@dataclass(frozen=True, slots=True)
class ClassSpec:
    name: str
    region: tuple[int, ...]  # patch indices, row-major
    direction: Matrix  # 1 x d_model unit vector


@dataclass(frozen=True, slots=True)
class ConceptSpec:
    name: str
    class_name: str
    rare_word: str
    direction: Matrix  # 1 x d_model unit vector, the concept's deviation
    amplitude: float


def quadrant_region(g: int, which: int) -> tuple[int, ...]:
    """Patch indices of quadrant 0..3 (row-major: TL, TR, BL, BR)."""
    half = g // 2
    r0 = (which // 2) * half
    c0 = (which % 2) * half
    return tuple(r * g + c for r in range(r0, r0 + half) for c in range(c0, c0 + half))


def _unit(rng: np.random.Generator, d: int) -> Matrix:
    v = rng.standard_normal(d)
    return Matrix((v / np.linalg.norm(v)).reshape(1, d))


@dataclass(frozen=True, slots=True)
class ToyWorld:
    config: ToyConfig
    vocab: Vocabulary
    schedule: NoiseSchedule
    classes: dict[str, ClassSpec] = field(repr=False)

    # -- scenes -------------------------------------------------------------

    def class_template(self, name: str) -> Matrix:
        spec = self._class(name)
        z = np.zeros((self.config.m, self.config.d_model))
        z[list(spec.region), :] = self.config.template_amplitude * spec.direction.array
        return Matrix(z)

    def scene(self, class_names: Sequence[str]) -> Matrix:
        names = list(class_names)
        if len(set(names)) != len(names):
            raise WorldError(f"repeated classes in scene: {names}")
        z = np.zeros((self.config.m, self.config.d_model))
        for n in names:
            z = z + self.class_template(n).array
        return Matrix(z)

    def region(self, class_name: str) -> tuple[int, ...]:
        return self._class(class_name).region

    def _class(self, name: str) -> ClassSpec:
        try:
            return self.classes[name]
        except KeyError:
            raise WorldError(f"unknown class {name!r}") from None

    # -- concepts -----------------------------------------------------------

    def concept(self, index: int, class_name: str) -> ConceptSpec:
        """Deterministic concept #index riding on the given class."""
        self._class(class_name)
        if not 0 <= index < len(RARE_WORDS):
            raise WorldError(f"concept index {index} out of range")
        rng = rng_stream(self.config.seed, TAG_WORLD, 100 + index)
        return ConceptSpec(
            name=f"c{index + 1}",
            class_name=class_name,
            rare_word=RARE_WORDS[index],
            direction=_unit(rng, self.config.d_model),
            amplitude=self.config.concept_amplitude,
        )

    def concept_latent(self, spec: ConceptSpec) -> Matrix:
        """The concept's clean scene: class template + rank-one deviation."""
        base = self.class_template(spec.class_name).array.copy()
        region = list(self.region(spec.class_name))
        base[region, :] += spec.amplitude * spec.direction.array
        return Matrix(base)

    def references(self, spec: ConceptSpec, seed: int | None = None) -> list[LatentSample]:
        """Jittered copies of the concept latent (the 'reference images')."""
        cfg = self.config
        rng = rng_stream(cfg.seed if seed is None else seed, TAG_REFERENCES, _concept_tag(spec))
        clean = self.concept_latent(spec).array
        region = list(self.region(spec.class_name))
        out = []
        for _ in range(cfg.n_references):
            jd = rng.standard_normal(cfg.d_model)
            jd /= np.linalg.norm(jd)
            z = clean.copy()
            z[region, :] += cfg.jitter_sigma * rng.normal() * jd
            out.append(LatentSample(Matrix(z), "data"))
        return out

    def binding(self, spec: ConceptSpec) -> ConceptBinding:
        return ConceptBinding(
            spec.name, self.vocab.id_of(spec.rare_word), self.vocab.id_of(spec.class_name)
        )

    # -- prompts ------------------------------------------------------------

    def prompt_solo(self, spec: ConceptSpec) -> list[str]:
        return ["a", spec.rare_word, spec.class_name]

    def prompt_composed(self, specs: Sequence[ConceptSpec]) -> list[str]:
        toks = ["a"]
        for s in specs:
            toks += [s.rare_word, s.class_name]
        return toks

    def prompt_classes(self, class_names: Sequence[str]) -> list[str]:
        return ["a"] + list(class_names)

    def encode(self, bindings, prompt) -> TokenSequence:
        return encode_prompt(self.vocab, bindings, prompt)


def _concept_tag(spec: ConceptSpec) -> int:
    return 1000 + RARE_WORDS.index(spec.rare_word)


def build_world(config: ToyConfig = ToyConfig()) -> ToyWorld:
    vocab = build_vocab(config.seed, config.d_text, FILLER_WORDS + CLASS_NAMES + RARE_WORDS)
    schedule = NoiseSchedule.linear(config.T, config.beta_start, config.beta_end)
    rng = rng_stream(config.seed, TAG_WORLD)
    classes = {}
    for i, name in enumerate(CLASS_NAMES):
        classes[name] = ClassSpec(
            name=name, region=quadrant_region(config.g, i), direction=_unit(rng, config.d_model)
        )
    return ToyWorld(config=config, vocab=vocab, schedule=schedule, classes=classes)


# -- base-model pretraining ----------------------------------------------------


def _guide_targets(world: ToyWorld, names: Sequence[str], seq: TokenSequence) -> list[tuple[int, Matrix]]:
    """(token position, target m x 1 attention column) per class in the scene."""
    cfg = world.config
    out = []
    for name in names:
        region = set(world.region(name))
        # out-of-region target is 0, not merely small: the residual leak sets
        # how much class color integrates into foreign regions while sampling
        target = np.zeros((cfg.m, 1))
        target[sorted(region), 0] = 0.75
        pos = [j for j, t in enumerate(seq.ids) if t == world.vocab.id_of(name)]
        out.append((pos[0], Matrix(target)))
    return out


def pretrain_base(world: ToyWorld, progress: bool = False) -> ToyDenoiser:
    """Train the base denoiser on class-level scenes, then freeze it.

    The objective is noise prediction plus an attention-guide term pulling
    each class token's attention column toward its region indicator. Scene
    class subsets, timesteps, and noise draws all come from one seeded
    stream, so the result is a pure function of the config.
    """
    cfg = world.config
    gains = tuple(
        min((1.0 - world.schedule.abar(t)) ** -0.5, cfg.input_gain_cap)
        for t in range(1, cfg.T + 1)
    )
    model = ToyDenoiser.build(
        cfg.seed, g=cfg.g, d_model=cfg.d_model, d_text=cfg.d_text,
        layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads, input_gains=gains,
    )
    opt = Adam(cfg.pretrain_lr)
    rng = rng_stream(cfg.seed, TAG_BASE_MODEL, 1)
    sizes = (1, 1, 1, 1, 1, 2, 2, 3, 4)  # mostly single-class scenes

    for step in range(cfg.pretrain_steps):
        k = sizes[rng.integers(0, len(sizes))]
        names = [CLASS_NAMES[i] for i in sorted(rng.choice(4, size=k, replace=False))]
        z0 = LatentSample(world.scene(names), "data")
        # near-full schedule here: the sampler visits every timestep, so the
        # base must be in-distribution everywhere that matters; the adapter
        # band is separate and the ill-conditioned low-t tail is skipped
        t = int(rng.integers(cfg.pretrain_t_floor, cfg.T + 1))
        eps = Matrix(rng.standard_normal((cfg.m, cfg.d_model)))
        seq = world.encode([], world.prompt_classes(names))

        with Tape() as tape:
            params = model.param_dict()
            for pname, mat in params.items():
                tape.watch(mat, pname)
            z_t = noise(z0, t, eps, world.schedule)
            coll = MapCollector()
            eps_hat = model.forward(z_t.z, t, seq, None, coll)
            loss = mean_sq_error(eps_hat, eps)
            if cfg.guide_weight > 0:
                guide = None
                for pos, target in _guide_targets(world, names, seq):
                    for _, _, amap in coll.records:
                        term = mean_sq_error(col_select(amap.a, (pos,)), target)
                        guide = term if guide is None else add(guide, term)
                n_terms = len(names) * len(coll.records)
                loss = add(loss, scale(guide, cfg.guide_weight / n_terms))
        grads = tape.grad(loss)
        model = model.with_params(opt.step(params, grads))
        if progress and step % 200 == 0:
            print(f"pretrain step {step}: loss {loss.item():.4f}")
    return model


def base_for(config: ToyConfig = ToyConfig(), progress: bool = False) -> tuple[ToyWorld, ToyDenoiser]:
    world = build_world(config)
    return world, pretrain_base(world, progress)
