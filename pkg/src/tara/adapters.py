"""Low-rank adapter lifecycle: init, registry, bit-exact files.

An adapter is a set of (A, B) factor pairs, one pair per projection (K, V)
per cross-attention layer. The realized update is Δ = B A with no extra
scaling factor. B starts at zero so an untrained adapter is a no-op and the
base model is recovered exactly at step 0.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AdapterTerm, TokenMask
from .numerics import Matrix
from .seeding import TAG_ADAPTER_INIT, rng_stream
from .text import ConceptBinding, TokenSequence

PROJECTIONS = ("K", "V")
MASK_POLICIES = ("token-focused", "unmasked-baseline")
INIT_MODES = ("gaussian", "rob")

MAGIC = b"TARA"
FORMAT_VERSION = 1


class AdapterError(ValueError):
    """Invalid adapter configuration or registry misuse."""


class AdapterFormatError(ValueError):
    """Malformed adapter file; message carries the byte offset."""


@dataclass(slots=True)
class LoraAdapter:
    """Trainable low-rank K/V updates for one concept.

    `weights` maps (layer_id, projection, factor) to the current Matrix;
    training replaces entries (Matrix itself is immutable). In rob mode the
    A factors are frozen and excluded from the trainable set.
    """

    concept: ConceptBinding
    rank: int
    layers: tuple[int, ...]
    mask_policy: str
    init_mode: str
    d_model: int
    d_text: int
    weights: dict[tuple[int, str, str], Matrix] = field(repr=False)

    def __post_init__(self):
        if self.mask_policy not in MASK_POLICIES:
            raise AdapterError(f"unknown mask policy {self.mask_policy!r}")
        if self.init_mode not in INIT_MODES:
            raise AdapterError(f"unknown init mode {self.init_mode!r}")

    @property
    def frozen_a(self) -> bool:
        return self.init_mode == "rob"

    def a(self, layer: int, proj: str) -> Matrix:
        return self.weights[(layer, proj, "A")]

    def b(self, layer: int, proj: str) -> Matrix:
        return self.weights[(layer, proj, "B")]

    def delta(self, layer: int, proj: str) -> Matrix:
        """Materialized B A for one layer/projection."""
        return Matrix(self.b(layer, proj).array @ self.a(layer, proj).array)

    def factors(self, layer: int, proj: str) -> tuple[Matrix, Matrix]:
        return self.b(layer, proj), self.a(layer, proj)

    def param_names(self) -> tuple[str, ...]:
        """Trainable parameter ids, in a fixed layer-major order."""
        names = []
        for layer in self.layers:
            for proj in PROJECTIONS:
                if not self.frozen_a:
                    names.append(f"l{layer}.{proj}.A")
                names.append(f"l{layer}.{proj}.B")
        return tuple(names)

    def get_param(self, name: str) -> Matrix:
        return self.weights[self._parse(name)]

    def set_param(self, name: str, value: Matrix) -> None:
        key = self._parse(name)
        if self.weights[key].shape != value.shape:
            raise AdapterError(f"shape change for {name}: {value.shape}")
        if key[2] == "A" and self.frozen_a:
            raise AdapterError("rob adapters keep A frozen")
        self.weights[key] = value

    def _parse(self, name: str) -> tuple[int, str, str]:
        try:
            lpart, proj, factor = name.split(".")
            key = (int(lpart[1:]), proj, factor)
        except (ValueError, IndexError):
            raise AdapterError(f"bad parameter name {name!r}") from None
        if key not in self.weights:
            raise AdapterError(f"no parameter {name!r}")
        return key

    def mask_for(self, seq: TokenSequence) -> TokenMask:
        if self.mask_policy == "token-focused":
            return TokenMask.token_focused(self.concept.concept, seq)
        return TokenMask.unmasked(self.concept.concept, seq.n)

    def term_for(self, layer: int, proj: str, seq: TokenSequence) -> AdapterTerm:
        return AdapterTerm(self.factors(layer, proj), self.mask_for(seq))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for layer in self.layers:
            for proj in PROJECTIONS:
                h.update(self.a(layer, proj).tobytes())
                h.update(self.b(layer, proj).tobytes())
        return h.hexdigest()


def init_adapter(
    concept: ConceptBinding,
    rank: int,
    layers,
    mode: str = "gaussian",
    seed: int = 0,
    *,
    d_model: int,
    d_text: int,
    mask_policy: str = "token-focused",
) -> LoraAdapter:
    """Fresh adapter; A ~ N(0, 1/r) (or orthonormal rows in rob mode), B = 0."""
    layers = tuple(int(l) for l in layers)
    if rank < 1:
        raise AdapterError(f"rank must be positive, got {rank}")
    if rank > min(d_model, d_text):
        raise AdapterError(f"rank {rank} exceeds min(d_model, d_text) = {min(d_model, d_text)}")
    if mode not in INIT_MODES:
        raise AdapterError(f"unknown init mode {mode!r}")
    if not layers or len(set(layers)) != len(layers):
        raise AdapterError("layer list must be nonempty and unique")

    rng = rng_stream(seed, TAG_ADAPTER_INIT)
    weights: dict[tuple[int, str, str], Matrix] = {}
    for layer in layers:
        for proj in PROJECTIONS:
            if mode == "gaussian":
                a = rng.normal(0.0, rank**-0.5, size=(rank, d_text))
            else:
                # orthonormal rows via QR of a Gaussian, sign-fixed for stability
                g = rng.standard_normal((d_text, rank))
                q, r = np.linalg.qr(g)
                q = q * np.sign(np.diag(r))
                a = q.T
            weights[(layer, proj, "A")] = Matrix(np.ascontiguousarray(a))
            weights[(layer, proj, "B")] = Matrix.zeros(d_model, rank)
    return LoraAdapter(
        concept=concept,
        rank=rank,
        layers=layers,
        mask_policy=mask_policy,
        init_mode=mode,
        d_model=d_model,
        d_text=d_text,
        weights=weights,
    )


# -- serialization -------------------------------------------------------------
#
# layout: MAGIC | u32 version | u32 header_len | header JSON (utf-8)
#         | per layer in header order: A_K, B_K, A_V, B_V as raw '<f8' C-order


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    header = {
        "concept": {
            "name": adapter.concept.concept,
            "rare_token": adapter.concept.rare_token,
            "class_token": adapter.concept.class_token,
        },
        "rank": adapter.rank,
        "layers": list(adapter.layers),
        "mask_policy": adapter.mask_policy,
        "init_mode": adapter.init_mode,
        "d_model": adapter.d_model,
        "d_text": adapter.d_text,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(hbytes)), hbytes]
    for layer in adapter.layers:
        for proj in PROJECTIONS:
            parts.append(adapter.a(layer, proj).tobytes())
            parts.append(adapter.b(layer, proj).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_adapter(path: str | Path) -> LoraAdapter:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise AdapterFormatError(f"file truncated at offset {len(blob)}: too short for preamble")
    if blob[:4] != MAGIC:
        raise AdapterFormatError(f"bad magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise AdapterFormatError(f"unsupported version {version} at offset 4")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hlen:
        raise AdapterFormatError(f"file truncated at offset {len(blob)}: header needs {12 + hlen}")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise AdapterFormatError(f"unreadable header at offset 12: {e}") from None
    try:
        rank = int(header["rank"])
        layers = tuple(int(l) for l in header["layers"])
        d_model = int(header["d_model"])
        d_text = int(header["d_text"])
        cdoc = header["concept"]
        concept = ConceptBinding(cdoc["name"], int(cdoc["rare_token"]), int(cdoc["class_token"]))
        mask_policy = header["mask_policy"]
        init_mode = header["init_mode"]
    except (KeyError, TypeError) as e:
        raise AdapterFormatError(f"header missing field at offset 12: {e}") from None

    shapes = {"A": (rank, d_text), "B": (d_model, rank)}
    weights: dict[tuple[int, str, str], Matrix] = {}
    off = 12 + hlen
    for layer in layers:
        for proj in PROJECTIONS:
            for factor in ("A", "B"):
                r, c = shapes[factor]
                nbytes = r * c * 8
                if len(blob) < off + nbytes:
                    raise AdapterFormatError(
                        f"file truncated at offset {len(blob)}: "
                        f"block l{layer}.{proj}.{factor} needs {off + nbytes}"
                    )
                arr = np.frombuffer(blob, dtype="<f8", count=r * c, offset=off).reshape(r, c)
                weights[(layer, proj, factor)] = Matrix(arr)
                off += nbytes
    if off != len(blob):
        raise AdapterFormatError(f"{len(blob) - off} trailing bytes at offset {off}")
    return LoraAdapter(
        concept=concept,
        rank=rank,
        layers=layers,
        mask_policy=mask_policy,
        init_mode=init_mode,
        d_model=d_model,
        d_text=d_text,
        weights=weights,
    )


# -- composition registry -------------------------------------------------------


class AdapterRegistry:
    """Ordered adapter set; order fixes the summation order of composition."""

    def __init__(self) -> None:
        self._adapters: list[LoraAdapter] = []

    def register(self, adapter: LoraAdapter) -> None:
        for present in self._adapters:
            if present.concept.rare_token == adapter.concept.rare_token:
                raise AdapterError(
                    f"rare token id {adapter.concept.rare_token} already registered "
                    f"for concept {present.concept.concept!r}"
                )
        self._adapters.append(adapter)

    @property
    def adapters(self) -> tuple[LoraAdapter, ...]:
        return tuple(self._adapters)

    def __len__(self) -> int:
        return len(self._adapters)

    def __iter__(self):
        return iter(self._adapters)

    def terms(self, layer: int, proj: str, seq: TokenSequence) -> tuple[AdapterTerm, ...]:
        """Per-adapter (factors, mask) list for one projection of one layer."""
        out = []
        for ad in self._adapters:
            if layer in ad.layers:
                out.append(ad.term_for(layer, proj, seq))
        return tuple(out)

    def save_manifest(self, path: str | Path, adapter_paths) -> None:
        doc = {"adapters": [str(p) for p in adapter_paths]}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load_manifest(cls, path: str | Path) -> "AdapterRegistry":
        doc = json.loads(Path(path).read_text())
        reg = cls()
        base = Path(path).parent
        for p in doc["adapters"]:
            q = Path(p)
            reg.register(load_adapter(q if q.is_absolute() else base / q))
        return reg
