"""Miniature latent-diffusion surrogate.

Latents are m x d_model matrices: m = g*g spatial patches in row-major grid
order, each carrying a d_model-channel vector. The denoiser stacks L blocks
of cross-attention plus a two-layer tanh MLP, both residual and bias-free.
A sinusoidal timestep embedding and a fixed per-patch position code are
added to every patch on the way in and subtracted from the prediction on
the way out.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterRegistry
from .attention import CrossAttentionLayer, MapCollector, attention_forward
from .fileio import read_sidecar, write_sidecar
from .numerics import Matrix, ShapeError, add, add_rowvec, matmul, mean_sq_error, scale, sub, tanh
from .seeding import TAG_BASE_MODEL, TAG_SAMPLER, rng_stream
from .text import TokenSequence


class DiffusionError(ValueError):
    pass


# -- schedule -------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class NoiseSchedule:
    """Variance schedule; timesteps are 1-based, t in [1, T]."""

    betas: tuple[float, ...]
    alphas_bar: tuple[float, ...]

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 2:
            raise DiffusionError(f"schedule needs at least 2 steps, got {T}")
        if not 0.0 < beta_start < beta_end < 1.0:
            raise DiffusionError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T)
        abar = np.cumprod(1.0 - betas)
        return cls(betas=tuple(betas), alphas_bar=tuple(abar))

    @property
    def T(self) -> int:
        return len(self.betas)

    def abar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")
        return self.alphas_bar[t - 1]


def timestep_embedding(t: int, d: int) -> Matrix:
    """Sinusoidal 1 x d embedding; d must be even."""
    if d % 2:
        raise DiffusionError(f"model width must be even for the timestep embedding, got {d}")
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return Matrix(np.concatenate([np.sin(ang), np.cos(ang)]).reshape(1, d))


# -- latents --------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class LatentSample:
    """One latent scene plus where it came from."""

    z: Matrix  # m x d_model
    provenance: str  # "data" | "noised(t)" | "generated(seed=...)"

    @property
    def m(self) -> int:
        return self.z.rows

    def save(self, path: str | Path) -> None:
        p = Path(path)
        p.write_bytes(self.z.tobytes())
        write_sidecar(
            p.with_suffix(p.suffix + ".json"),
            {"rows": self.z.rows, "cols": self.z.cols, "provenance": self.provenance},
        )

    @classmethod
    def load(cls, path: str | Path) -> "LatentSample":
        p = Path(path)
        doc = read_sidecar(p.with_suffix(p.suffix + ".json"))
        blob = p.read_bytes()
        rows, cols = int(doc["rows"]), int(doc["cols"])
        if len(blob) != rows * cols * 8:
            raise DiffusionError(f"{p}: latent payload does not match sidecar shape")
        z = Matrix(np.frombuffer(blob, dtype="<f8").reshape(rows, cols))
        return cls(z=z, provenance=str(doc["provenance"]))


def noise(z0: LatentSample, t: int, eps: Matrix, schedule: NoiseSchedule) -> LatentSample:
    """Forward noising: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.z.shape:
        raise ShapeError(f"noise draw shape {eps.shape} != latent shape {z0.z.shape}")
    ab = schedule.abar(t)
    z_t = np.sqrt(ab) * z0.z.array + np.sqrt(1.0 - ab) * eps.array
    return LatentSample(z=Matrix(z_t), provenance=f"noised({t})")


# -- denoiser -------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class DenoiserBlock:
    attn: CrossAttentionLayer
    w1: Matrix  # d_model x hidden, applied as z @ w1
    w2: Matrix  # hidden x d_model


BLOCK_WEIGHTS = ("wq", "wk", "wv", "wo", "w1", "w2")

MODEL_MAGIC = b"TOYM"
MODEL_VERSION = 1


@dataclass(frozen=True, slots=True)
class ToyDenoiser:
    """Frozen noise predictor over g*g latent patches.

    pos is a fixed per-patch code added to the latent alongside the timestep
    embedding and subtracted from the output. Without it the network is
    permutation-equivariant over patches and cannot decide where to place
    content when sampling starts from pure noise.

    input_gains, when set, holds one multiplier per timestep applied to the
    latent before the blocks. Choosing gain(t) = 1/sqrt(1-abar(t)) (capped)
    gives the identity component of the noise-prediction target unit weight
    at every t, so the residual blocks only model the content term."""

    g: int
    d_text: int
    hidden: int
    heads: int
    blocks: tuple[DenoiserBlock, ...]
    pos: Matrix
    input_gains: tuple[float, ...] | None = None

    @property
    def m(self) -> int:
        return self.g * self.g

    @property
    def d_model(self) -> int:
        return self.blocks[0].attn.d_model

    @property
    def L(self) -> int:
        return len(self.blocks)

    @classmethod
    def build(
        cls,
        seed: int,
        g: int = 8,
        d_model: int = 32,
        d_text: int = 32,
        layers: int = 4,
        hidden: int | None = None,
        heads: int = 1,
        input_gains: tuple[float, ...] | None = None,
    ) -> "ToyDenoiser":
        """Random frozen weights at 1/sqrt(width) scale."""
        if hidden is None:
            hidden = d_model
        rng = rng_stream(seed, TAG_BASE_MODEL)
        blocks = []
        for l in range(layers):
            s = d_model**-0.5
            attn = CrossAttentionLayer(
                layer_id=l,
                w_q=Matrix(rng.normal(0, s, (d_model, d_model))),
                w_k=Matrix(rng.normal(0, d_text**-0.5, (d_model, d_text))),
                w_v=Matrix(rng.normal(0, d_text**-0.5, (d_model, d_text))),
                w_o=Matrix(rng.normal(0, s, (d_model, d_model))),
                heads=heads,
            )
            w1 = Matrix(rng.normal(0, s, (d_model, hidden)))
            w2 = Matrix(rng.normal(0, hidden**-0.5, (hidden, d_model)))
            blocks.append(DenoiserBlock(attn=attn, w1=w1, w2=w2))
        pos = Matrix(rng.standard_normal((g * g, d_model)))
        return cls(g=g, d_text=d_text, hidden=hidden, heads=heads, blocks=tuple(blocks),
                   pos=pos, input_gains=input_gains)

    # base weights as a flat named dict (pretraining, checksums, serialization)

    def param_dict(self) -> dict[str, Matrix]:
        out = {}
        for l, blk in enumerate(self.blocks):
            out[f"b{l}.wq"] = blk.attn.w_q
            out[f"b{l}.wk"] = blk.attn.w_k
            out[f"b{l}.wv"] = blk.attn.w_v
            out[f"b{l}.wo"] = blk.attn.w_o
            out[f"b{l}.w1"] = blk.w1
            out[f"b{l}.w2"] = blk.w2
        return out

    def with_params(self, params: dict[str, Matrix]) -> "ToyDenoiser":
        """Same architecture, replaced weights (used by base-model pretraining)."""
        blocks = []
        for l in range(self.L):
            attn = CrossAttentionLayer(
                layer_id=l,
                w_q=params[f"b{l}.wq"],
                w_k=params[f"b{l}.wk"],
                w_v=params[f"b{l}.wv"],
                w_o=params[f"b{l}.wo"],
                heads=self.heads,
            )
            blocks.append(DenoiserBlock(attn=attn, w1=params[f"b{l}.w1"], w2=params[f"b{l}.w2"]))
        return ToyDenoiser(
            g=self.g, d_text=self.d_text, hidden=self.hidden, heads=self.heads,
            blocks=tuple(blocks), pos=self.pos, input_gains=self.input_gains,
        )

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        params = self.param_dict()
        for name in sorted(params):
            h.update(name.encode())
            h.update(params[name].tobytes())
        h.update(b"pos")
        h.update(self.pos.tobytes())
        if self.input_gains is not None:
            h.update(b"gains")
            h.update(np.asarray(self.input_gains, dtype="<f8").tobytes())
        return h.hexdigest()

    def forward(
        self,
        z_t: Matrix,
        t: int,
        seq: TokenSequence,
        registry: AdapterRegistry | None = None,
        collector: MapCollector | None = None,
    ) -> Matrix:
        """Predicted noise for z_t at timestep t under conditioning seq."""
        if z_t.shape != (self.m, self.d_model):
            raise ShapeError(f"latent must be {self.m}x{self.d_model}, got {z_t.shape}")
        if self.input_gains is not None:
            if not 1 <= t <= len(self.input_gains):
                raise DiffusionError(f"timestep {t} outside gain table [1, {len(self.input_gains)}]")
            z_t = scale(z_t, self.input_gains[t - 1])
        temb = timestep_embedding(t, self.d_model)
        neg_temb = Matrix(-temb.array)
        z = add(add_rowvec(z_t, temb), self.pos)
        for l, blk in enumerate(self.blocks):
            k_terms = registry.terms(l, "K", seq) if registry is not None else ()
            v_terms = registry.terms(l, "V", seq) if registry is not None else ()
            attn_out, amap = attention_forward(blk.attn, z, seq, k_terms, v_terms)
            if collector is not None:
                collector.record(t, amap)
            z = add(z, attn_out)
            h = tanh(matmul(z, blk.w1))
            z = add(z, matmul(h, blk.w2))
        return add_rowvec(sub(z, self.pos), neg_temb)


def save_model(model: ToyDenoiser, path: str | Path) -> None:
    header = {
        "g": model.g,
        "d_model": model.d_model,
        "d_text": model.d_text,
        "hidden": model.hidden,
        "heads": model.heads,
        "layers": model.L,
        # json floats round-trip exactly (shortest-repr), so the gain table
        # survives save/load bitwise
        "input_gains": list(model.input_gains) if model.input_gains is not None else None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION), struct.pack("<I", len(hbytes)), hbytes]
    parts.append(model.pos.tobytes())
    params = model.param_dict()
    for l in range(model.L):
        for w in BLOCK_WEIGHTS:
            parts.append(params[f"b{l}.{w}"].tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> ToyDenoiser:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MODEL_MAGIC:
        raise DiffusionError(f"{path}: not a model file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MODEL_VERSION:
        raise DiffusionError(f"{path}: unsupported model version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    g, d_model, d_text = header["g"], header["d_model"], header["d_text"]
    hidden, heads, layers = header["hidden"], header["heads"], header["layers"]
    raw_gains = header.get("input_gains")
    gains = tuple(float(v) for v in raw_gains) if raw_gains is not None else None
    shapes = {
        "wq": (d_model, d_model),
        "wk": (d_model, d_text),
        "wv": (d_model, d_text),
        "wo": (d_model, d_model),
        "w1": (d_model, hidden),
        "w2": (hidden, d_model),
    }
    off = 12 + hlen
    npos = g * g * d_model * 8
    if len(blob) < off + npos:
        raise DiffusionError(f"{path}: truncated at offset {len(blob)}")
    pos = Matrix(np.frombuffer(blob, dtype="<f8", count=g * g * d_model, offset=off).reshape(g * g, d_model))
    off += npos
    params: dict[str, Matrix] = {}
    for l in range(layers):
        for w in BLOCK_WEIGHTS:
            r, c = shapes[w]
            n = r * c * 8
            if len(blob) < off + n:
                raise DiffusionError(f"{path}: truncated at offset {len(blob)}")
            params[f"b{l}.{w}"] = Matrix(
                np.frombuffer(blob, dtype="<f8", count=r * c, offset=off).reshape(r, c)
            )
            off += n
    if off != len(blob):
        raise DiffusionError(f"{path}: {len(blob) - off} trailing bytes")
    blocks = []
    for l in range(layers):
        attn = CrossAttentionLayer(
            layer_id=l,
            w_q=params[f"b{l}.wq"],
            w_k=params[f"b{l}.wk"],
            w_v=params[f"b{l}.wv"],
            w_o=params[f"b{l}.wo"],
            heads=heads,
        )
        blocks.append(DenoiserBlock(attn=attn, w1=params[f"b{l}.w1"], w2=params[f"b{l}.w2"]))
    return ToyDenoiser(g=g, d_text=d_text, hidden=hidden, heads=heads, blocks=tuple(blocks),
                       pos=pos, input_gains=gains)


# -- objective & sampling ---------------------------------------------------------


def denoise_loss(
    model,
    schedule: NoiseSchedule,
    registry: AdapterRegistry | None,
    seq: TokenSequence,
    z0: LatentSample,
    t: int,
    eps: Matrix,
) -> Matrix:
    """Mean squared error between the true and predicted noise (1x1 Matrix)."""
    z_t = noise(z0, t, eps, schedule)
    eps_hat = model.forward(z_t.z, t, seq, registry)
    return mean_sq_error(eps_hat, eps)


def sampling_grid(T: int, steps: int) -> tuple[int, ...]:
    """Decreasing timestep grid from T to 1 with `steps` entries."""
    if not 1 <= steps <= T:
        raise DiffusionError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return (T,)
    grid = np.round(np.linspace(T, 1, steps)).astype(int)
    return tuple(int(t) for t in grid)


def sample(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    registry: AdapterRegistry | None,
    seq: TokenSequence,
    seed: int,
    steps: int = 20,
    collector: MapCollector | None = None,
) -> LatentSample:
    """Deterministic reverse process (eta = 0) from a seeded Gaussian start."""
    rng = rng_stream(seed, TAG_SAMPLER)
    z = Matrix(rng.standard_normal((model.m, model.d_model)))
    grid = sampling_grid(schedule.T, steps)
    for i, t in enumerate(grid):
        eps_hat = model.forward(z, t, seq, registry, collector)
        ab_t = schedule.abar(t)
        z0_hat = (z.array - np.sqrt(1.0 - ab_t) * eps_hat.array) / np.sqrt(ab_t)
        if i + 1 < len(grid):
            ab_next = schedule.abar(grid[i + 1])
            z = Matrix(np.sqrt(ab_next) * z0_hat + np.sqrt(1.0 - ab_next) * eps_hat.array)
        else:
            z = Matrix(z0_hat)
    return LatentSample(z=z, provenance=f"generated(seed={seed})")
