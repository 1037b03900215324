"""Command-line workflow: train adapters, compose and generate, analyze runs.

Subcommands: train, generate, compose-check, analyze, gradcheck, make-vocab.
Every command is a deterministic function of (flags, config file, seed):
flags override config-file values, which override built-in defaults, and the
seed falls back to the TARA_SEED environment variable when neither source
sets one. Exit codes: 0 success, 1 failed check, 2 bad config or input,
3 training divergence.

A run directory is self-describing: manifest.json carries the resolved
config snapshot, the seeds, the input adapter paths, and every artifact the
command wrote, so a run can be reproduced bitwise from its manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import (
    AdapterError,
    AdapterFormatError,
    AdapterRegistry,
    LoraAdapter,
    load_adapter,
    save_adapter,
)
from .analysis import (
    AnalysisError,
    attention_summary,
    heatmap_to_pgm,
    interference,
    interference_table,
    token_influence,
    write_summary_json,
)
from .attention import AttentionError, AttentionMap, MapCollector, composed_projection
from .diffusion import (
    DiffusionError,
    LatentSample,
    ToyDenoiser,
    load_model,
    sample,
    save_model,
)
from .fileio import FileFormatError, sha256_file, write_f64, write_sidecar
from .numerics import Matrix, ShapeError, scale
from .numerics.gradcheck import fd_check
from .text import TextError, TokenSequence
from .training import (
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    make_dataset,
    total_loss,
    train_baseline,
    train_concept,
)
from .worlds import CLASS_NAMES, ToyConfig, ToyWorld, WorldError, build_world, pretrain_base

USAGE_ERRORS = (
    AdapterError,
    AdapterFormatError,
    AnalysisError,
    AttentionError,
    DiffusionError,
    FileFormatError,
    ShapeError,
    TextError,
    TrainingError,
    WorldError,
    OSError,
)


class CliError(ValueError):
    """Bad flags or inputs that argparse cannot catch itself."""


# -- config plumbing ----------------------------------------------------------------


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}")
    if p.suffix == ".toml":
        with open(p, "rb") as f:
            return tomllib.load(f)
    if p.suffix == ".json":
        return json.loads(p.read_text())
    raise CliError(f"config file must be .json or .toml, got {p.suffix or p.name!r}")


def world_from(doc: dict) -> ToyWorld:
    try:
        cfg = ToyConfig(**doc.get("world", {}))
    except TypeError as e:
        raise CliError(f"bad world config: {e}") from None
    return build_world(cfg)


def train_config_from(doc: dict, args) -> TrainConfig:
    """Config-file values layered over desk-recipe defaults, then flag overrides."""
    fields = dict(doc.get("train", {}))
    fields.setdefault("optimizer", "adam")
    fields.setdefault("learning_rate", 0.01)
    fields.setdefault("epochs", 10**9)
    fields.setdefault("max_steps", 400)
    world_cfg = doc.get("world", {})
    default_world = ToyConfig()
    fields.setdefault("t_lo", world_cfg.get("t_lo", default_world.t_lo))
    fields.setdefault("t_hi", world_cfg.get("t_hi", default_world.t_hi))
    overrides = {
        "learning_rate": args.lr,
        "lam": args.lam,
        "rank": args.rank,
        "max_steps": args.steps,
        "seed": args.seed,
    }
    for key, val in overrides.items():
        if val is not None:
            fields[key] = val
    try:
        return TrainConfig(**fields)
    except TypeError as e:
        raise CliError(f"bad train config: {e}") from None


def resolve_seed(flag: int | None, doc_val=None, default: int = 0) -> int:
    if flag is not None:
        return int(flag)
    if doc_val is not None:
        return int(doc_val)
    env = os.environ.get("TARA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"TARA_SEED must be an integer, got {env!r}") from None
    return default


def base_model_for(world: ToyWorld, base_path: str | None,
                   save_base: str | None = None) -> ToyDenoiser:
    if base_path is None:
        model = pretrain_base(world)
        if save_base is not None:
            save_model(model, save_base)
        return model
    if not Path(base_path).exists():
        raise CliError(f"base model file not found: {base_path}")
    model = load_model(base_path)
    cfg = world.config
    if (model.g, model.d_model, model.d_text) != (cfg.g, cfg.d_model, cfg.d_text):
        raise CliError(
            f"base model {base_path} does not match the world config "
            f"(g={model.g}, d_model={model.d_model}, d_text={model.d_text})"
        )
    return model


# -- run manifests ------------------------------------------------------------------


@dataclass(slots=True)
class RunManifest:
    """What a run directory contains and how to reproduce it bitwise."""

    experiment: str
    config: dict
    seeds: dict
    adapters: list[str] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__

    def write(self, run_dir: Path) -> None:
        write_sidecar(run_dir / "manifest.json", asdict(self))


def read_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise CliError(f"no manifest.json under {run_dir}")
    return json.loads(path.read_text())


# -- probe and sample stores --------------------------------------------------------


def save_probes(collector: MapCollector, run_dir: Path) -> list[str]:
    """Raw f64 attention maps concatenated in record order plus a JSON index."""
    records = []
    blobs = []
    for layer, t, amap in collector.records:
        records.append({"layer": layer, "t": t, "m": amap.m, "n": amap.n})
        blobs.append(amap.a.tobytes())
    (run_dir / "probes.bin").write_bytes(b"".join(blobs))
    write_sidecar(run_dir / "probes.json", {"records": records})
    return ["probes.bin", "probes.json"]


def load_probes(run_dir: str | Path) -> MapCollector:
    run_dir = Path(run_dir)
    index = run_dir / "probes.json"
    blob_path = run_dir / "probes.bin"
    if not index.exists() or not blob_path.exists():
        raise CliError(f"no attention probes under {run_dir}; run `tara generate` first")
    doc = json.loads(index.read_text())
    blob = blob_path.read_bytes()
    coll = MapCollector()
    off = 0
    for rec in doc["records"]:
        m, n = int(rec["m"]), int(rec["n"])
        size = m * n * 8
        a = np.frombuffer(blob[off : off + size], dtype="<f8").reshape(m, n).copy()
        off += size
        coll.records.append(
            (int(rec["layer"]), int(rec["t"]), AttentionMap(int(rec["layer"]), Matrix(a)))
        )
    if off != len(blob):
        raise CliError(f"probe index disagrees with {blob_path} length")
    return coll


def load_run_sample(run_dir: str | Path) -> LatentSample:
    path = Path(run_dir) / "sample.f64"
    if not path.exists():
        raise CliError(f"no sample.f64 under {run_dir}")
    return LatentSample.load(path)


# -- shared helpers -----------------------------------------------------------------


def load_adapters(paths: list[str]) -> list[LoraAdapter]:
    adapters = []
    for p in paths:
        if not Path(p).exists():
            raise CliError(f"adapter file not found: {p}")
        adapters.append(load_adapter(p))
    rare: dict[int, str] = {}
    for a in adapters:
        tok = a.concept.rare_token
        if tok in rare and rare[tok] != a.concept.concept:
            raise CliError(
                f"adapters {rare[tok]!r} and {a.concept.concept!r} share rare token id {tok}"
            )
        rare[tok] = a.concept.concept
    return adapters


def encode_run_prompt(world: ToyWorld, adapters: list[LoraAdapter], prompt: str) -> TokenSequence:
    words = prompt.split()
    if not words:
        raise CliError("prompt is empty")
    return world.encode([a.concept for a in adapters], words)


def method_label(adapters: list[LoraAdapter]) -> str:
    if not adapters:
        return "base"
    if all(a.mask_policy == "token-focused" for a in adapters):
        return "tara"
    return "unmasked"


def tracked_positions(seq: TokenSequence) -> tuple[int, ...]:
    rare = sorted(p for ps in seq.rare_positions.values() for p in ps)
    if rare:
        return tuple(rare)
    return tuple(range(1, seq.n - 1))  # skip BOS and EOS


# -- subcommands --------------------------------------------------------------------


def cmd_train(args) -> int:
    doc = load_config_file(args.config)
    world = world_from(doc)
    if args.class_name not in CLASS_NAMES:
        raise CliError(f"--class must be one of {', '.join(CLASS_NAMES)}")
    args.seed = resolve_seed(args.seed, doc.get("train", {}).get("seed"))
    config = train_config_from(doc, args)
    model = base_model_for(world, args.base, args.save_base)
    spec = world.concept(args.concept_index, args.class_name)
    dataset = make_dataset(world, spec, ref_seed=args.ref_seed)

    # overflow is handled as a typed divergence exit; keep numpy quiet about it
    with np.errstate(over="ignore", invalid="ignore"):
        if args.baseline is None:
            adapter, log = train_concept(model, world.schedule, dataset, config)
        else:
            adapter, log = train_baseline(
                model, world.schedule, dataset, config, mode=args.baseline
            )

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_adapter(adapter, run_dir / "adapter.tara")
    log.save_csv(run_dir / "loss.csv")
    from .figures import loss_curves

    loss_curves(log, run_dir / "loss.png")
    seeds = {"world": world.config.seed, "train": config.seed}
    if args.ref_seed is not None:
        seeds["references"] = args.ref_seed
    manifest = RunManifest(
        experiment=f"train-{spec.name}-{args.class_name}",
        config={
            "world": asdict(world.config),
            "train": asdict(config),
            "class": args.class_name,
            "concept_index": args.concept_index,
            "baseline": args.baseline,
        },
        seeds=seeds,
        adapters=[],
        artifacts=["adapter.tara", "loss.csv", "loss.png"],
    )
    manifest.write(run_dir)
    print(f"trained {spec.name} ({args.class_name}) for {len(log.rows)} step(s)")
    if log.rows:
        print(f"final denoise {log.rows[-1][1]:.6f} align {log.rows[-1][2]:.6f}")
    print(f"wrote {run_dir / 'adapter.tara'}")
    return 0


def cmd_generate(args) -> int:
    doc = load_config_file(args.config)
    world = world_from(doc)
    adapters = load_adapters(args.adapter)
    seq = encode_run_prompt(world, adapters, args.prompt)
    args.seed = resolve_seed(args.seed)
    model = base_model_for(world, args.base, args.save_base)
    registry = AdapterRegistry()
    for a in adapters:
        registry.register(a)

    collector = MapCollector()
    out = sample(model, world.schedule, registry, seq, args.seed,
                 steps=args.steps, collector=collector)

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    out.save(run_dir / "sample.f64")
    artifacts = ["sample.f64", "sample.f64.json"]
    artifacts += save_probes(collector, run_dir)
    manifest = RunManifest(
        experiment=f"generate-{method_label(adapters)}",
        config={"world": asdict(world.config), "prompt": args.prompt,
                "steps": args.steps, "method": method_label(adapters)},
        seeds={"world": world.config.seed, "sampler": args.seed},
        adapters=[str(Path(p).resolve()) for p in args.adapter],
        artifacts=artifacts,
    )
    manifest.write(run_dir)
    print(f"sampled {out.z.rows}x{out.z.cols} latent with {len(adapters)} adapter(s), "
          f"seed {args.seed}")
    print(f"wrote {run_dir / 'sample.f64'}")
    return 0


def dense_oracle(w: Matrix, terms, X: Matrix) -> np.ndarray:
    """Materialize-then-mask-then-sum composition, written the slow obvious way."""
    out = w.array @ X.array
    for term in terms:
        if isinstance(term.delta, tuple):
            b, a = term.delta
            full = b.array @ (a.array @ X.array)
        else:
            full = term.delta.array @ X.array
        keep = np.zeros(X.cols)
        keep[list(term.mask.columns)] = 1.0
        out = out + full * keep
    return out


def cmd_compose_check(args) -> int:
    doc = load_config_file(args.config)
    world = world_from(doc)
    adapters = load_adapters(args.adapter)
    seq = encode_run_prompt(world, adapters, args.prompt)
    cfg = world.config
    model = ToyDenoiser.build(
        cfg.seed, g=cfg.g, d_model=cfg.d_model, d_text=cfg.d_text,
        layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads,
    )
    registry = AdapterRegistry()
    for a in adapters:
        registry.register(a)

    worst = 0.0
    exact_mask = True
    all_focused = all(a.mask_policy == "token-focused" for a in adapters)
    for layer in range(model.L):
        attn = model.blocks[layer].attn
        for proj, w in (("K", attn.w_k), ("V", attn.w_v)):
            terms = registry.terms(layer, proj, seq)
            got = composed_projection(w, terms, seq.X)
            want = dense_oracle(w, terms, seq.X)
            worst = max(worst, float(np.abs(got.array - want).max()))
            if all_focused:
                touched: set[int] = set()
                for term in terms:
                    touched |= set(term.mask.columns)
                untouched = [j for j in range(seq.n) if j not in touched]
                base = w.array @ seq.X.array
                if untouched and not np.array_equal(got.array[:, untouched], base[:, untouched]):
                    exact_mask = False
    print(f"composition vs dense oracle: max abs deviation {worst:.3e} (tol {args.tol:g})")
    if all_focused:
        print(f"masked-out columns bitwise clean: {'yes' if exact_mask else 'NO'}")
    if worst < args.tol and exact_mask:
        print("compose-check: PASS")
        return 0
    print("compose-check: FAIL")
    return 1


def _analyze_setup(run_dir: str):
    manifest = read_manifest(run_dir)
    if "prompt" not in manifest.get("config", {}):
        raise CliError(f"{run_dir} is not a generate run (its manifest has no prompt)")
    world = world_from({"world": manifest["config"].get("world", {})})
    adapters = load_adapters(manifest.get("adapters", []))
    seq = encode_run_prompt(world, adapters, manifest["config"]["prompt"])
    return manifest, world, adapters, seq


def cmd_analyze(args) -> int:
    out_dir = Path(args.out) if args.out else Path(args.run) / "analysis" / args.mode
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: list[str] = []

    if args.mode == "tokens":
        manifest, world, adapters, seq = _analyze_setup(args.run)
        collector = load_probes(args.run)
        registry = AdapterRegistry()
        for a in adapters:
            registry.register(a)
        # influence depends only on adapters and text; the model arg is unused
        report = token_influence(None, registry, seq, collector)
        report.to_csv(out_dir / "influence.csv")
        from .figures import influence_bars

        labels = [world.vocab.token_of(t) for t in seq.ids]
        influence_bars(report, out_dir / "influence.png", labels)
        payload = {
            "mode": "tokens",
            "concepts": list(report.concepts),
            "magnitudes": {
                f"{c}/{p}/{j}": report.magnitudes[(c, p, j)]
                for (c, p, j) in sorted(report.magnitudes)
            },
        }
        artifacts += ["influence.csv", "influence.png"]

    elif args.mode == "attention":
        manifest, world, adapters, seq = _analyze_setup(args.run)
        collector = load_probes(args.run)
        positions = tracked_positions(seq)
        summary = attention_summary(collector, positions, top_fraction=args.top_fraction)
        summary.to_csv(out_dir / "attention.csv")
        labels = {j: world.vocab.token_of(seq.ids[j]) for j in range(seq.n)}
        for pos in positions:
            name = f"tok{pos}.pgm"
            heatmap_to_pgm(summary.vector(pos), world.config.g, out_dir / name)
            artifacts.append(name)
        iou_rows = []
        region_iou = {}
        for a in adapters:
            concept = a.concept.concept
            pos = sorted(seq.rare_positions_of(concept))
            if not pos:
                continue
            class_name = world.vocab.token_of(a.concept.class_token)
            iou = summary.iou_region(pos[0], world.region(class_name))
            region_iou[concept] = iou
            iou_rows.append((concept, labels[pos[0]], class_name, iou))
        with open(out_dir / "iou.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["concept", "token", "class_region", "iou"])
            for row in iou_rows:
                w.writerow([row[0], row[1], row[2], repr(row[3])])
        from .figures import attention_grids

        attention_grids(summary, world.config.g, out_dir / "attention.png", labels)
        payload = {
            "mode": "attention",
            "positions": list(positions),
            "entropy": {str(p): summary.entropy(p) for p in positions},
            "region_iou": region_iou,
            "top_fraction": args.top_fraction,
        }
        artifacts += ["attention.csv", "attention.png", "iou.csv"]

    else:  # interference
        if not args.solo:
            raise CliError("interference mode needs at least one --solo run directory")
        manifest, world, adapters, _ = _analyze_setup(args.run)
        composed = load_run_sample(args.run)
        solo = {}
        regions = {}
        for solo_dir in args.solo:
            s_manifest = read_manifest(solo_dir)
            s_adapters = load_adapters(s_manifest.get("adapters", []))
            if len(s_adapters) != 1:
                raise CliError(f"solo run {solo_dir} must have exactly one adapter")
            concept = s_adapters[0].concept.concept
            class_name = world.vocab.token_of(s_adapters[0].concept.class_token)
            solo[concept] = load_run_sample(solo_dir)
            regions[concept] = world.region(class_name)
        report = interference(solo, composed, regions,
                              method=manifest["config"].get("method", "tara"))
        report.to_csv(out_dir / "interference.csv")
        interference_table([report], out_dir / "interference_table.csv")
        from .figures import interference_bars

        interference_bars([report], out_dir / "interference.png")
        payload = {
            "mode": "interference",
            "method": report.method,
            "region_mse": dict(sorted(report.region_mse.items())),
            "mean": report.mean(),
        }
        artifacts += ["interference.csv", "interference_table.csv", "interference.png"]

    write_summary_json(out_dir / "summary.json", payload)
    artifacts.append("summary.json")
    RunManifest(
        experiment=f"analyze-{args.mode}",
        config={"run": str(args.run), "mode": args.mode},
        seeds={},
        adapters=[],
        artifacts=sorted(artifacts),
    ).write(out_dir)
    print(f"analyze {args.mode}: wrote {len(artifacts)} artifact(s) under {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    doc = load_config_file(args.config)
    world = world_from(doc)
    cfg = world.config
    seed = resolve_seed(args.seed)
    model = ToyDenoiser.build(
        cfg.seed, g=cfg.g, d_model=cfg.d_model, d_text=cfg.d_text,
        layers=cfg.layers, hidden=cfg.hidden, heads=cfg.heads,
    )
    spec = world.concept(0, "dog")
    dataset = make_dataset(world, spec)
    from .adapters import init_adapter
    from .training import _binding_of

    adapter = init_adapter(
        _binding_of(dataset), args.rank or 8, tuple(range(model.L)), "gaussian",
        seed, d_model=cfg.d_model, d_text=cfg.d_text, mask_policy="token-focused",
    )
    rng = np.random.default_rng(seed)
    for layer in adapter.layers:
        for proj in ("K", "V"):
            b, _ = adapter.factors(layer, proj)
            adapter.set_param(f"l{layer}.{proj}.B", Matrix(0.1 * rng.standard_normal(b.shape)))
    registry = AdapterRegistry()
    registry.register(adapter)
    t = (cfg.t_lo + cfg.t_hi) // 2
    eps = Matrix(rng.standard_normal((cfg.m, cfg.d_model)))
    z0 = dataset.references[0]
    lam = 1.0 if args.lam is None else args.lam

    def loss_fn(params, tape):
        for name, mat in params.items():
            adapter.set_param(name, mat)
        tot, _, _ = total_loss(
            model, world.schedule, adapter, registry, dataset.seq, z0, t, eps, lam
        )
        if args.corrupt and tape is None:
            # negative-control hook: desync the numeric probes from the tape
            tot = scale(tot, 1.0 + 5e-3)
        return tot

    params = {n: adapter.get_param(n) for n in adapter.param_names()}
    report = fd_check(loss_fn, params, samples_per_block=args.samples, seed=0)
    for line in report.lines():
        print(line)
    if report.passed(args.tol):
        print(f"gradcheck: PASS (max rel err {report.max_rel_err:.3e} < {args.tol:g})")
        return 0
    worst = max(report.blocks.values(), key=lambda b: b.max_rel_err)
    print(f"gradcheck: FAIL (worst block {worst.name}: {worst.max_rel_err:.3e})")
    return 1


def cmd_make_vocab(args) -> int:
    doc = load_config_file(args.config)
    world = world_from(doc)
    out = Path(args.out)
    if str(out.parent) not in ("", "."):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_f64(world.vocab.table, out)
    write_sidecar(
        out.with_suffix(out.suffix + ".json"),
        {
            "d": world.vocab.d,
            "seed": world.vocab.seed,
            "words": list(world.vocab.words),
            "rows": world.vocab.table.rows,
            "sha256": sha256_file(out),
        },
    )
    print(f"wrote {len(world.vocab)} token embeddings to {out}")
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tara",
        description="Token-aware low-rank adapters on a toy diffusion model.",
    )
    parser.add_argument("--version", action="version", version=f"tara {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON or TOML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (falls back to TARA_SEED, then 0)")

    p = sub.add_parser("train", help="train one concept adapter")
    add_common(p)
    p.add_argument("--class", dest="class_name", required=True,
                   help=f"concept class: one of {', '.join(CLASS_NAMES)}")
    p.add_argument("--concept-index", type=int, default=0,
                   help="which rare-token identity to bind (default 0)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, default=None, help="cap on optimizer steps")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lam", type=float, default=None, help="alignment loss weight")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--baseline", choices=["db-lora-unmasked", "rob"], default=None,
                   help="train an unmasked baseline instead of the token-focused adapter")
    p.add_argument("--base", default=None, help="pretrained base model file (skips pretraining)")
    p.add_argument("--save-base", default=None,
                   help="write the pretrained base model here for reuse via --base")
    p.add_argument("--ref-seed", type=int, default=None, help="reference jitter seed")

    p = sub.add_parser("generate", help="sample with zero or more adapters")
    add_common(p)
    p.add_argument("--adapter", action="append", default=[], help="adapter file (repeatable)")
    p.add_argument("--prompt", required=True, help="space-separated token prompt")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, default=20, help="sampler steps (default 20)")
    p.add_argument("--base", default=None, help="pretrained base model file (skips pretraining)")
    p.add_argument("--save-base", default=None,
                   help="write the pretrained base model here for reuse via --base")

    p = sub.add_parser("compose-check", help="verify composition against a dense oracle")
    add_common(p)
    p.add_argument("--adapter", action="append", required=True, help="adapter file (repeatable)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--tol", type=float, default=1e-12)

    p = sub.add_parser("analyze", help="post-run reports from saved probes")
    add_common(p)
    p.add_argument("--run", required=True, help="run directory from `tara generate`")
    p.add_argument("--mode", required=True, choices=["tokens", "attention", "interference"])
    p.add_argument("--out", default=None, help="report directory (default RUN/analysis)")
    p.add_argument("--solo", action="append", default=[],
                   help="solo run directory (interference mode, repeatable)")
    p.add_argument("--top-fraction", type=float, default=0.2,
                   help="attention-mass fraction counted as 'top' cells (default 0.2)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the training losses")
    add_common(p)
    p.add_argument("--lam", type=float, default=None, help="alignment weight (default 1.0)")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--samples", type=int, default=16,
                   help="entries checked per parameter block (default 16)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("make-vocab", help="write the world's token embedding table")
    add_common(p)
    p.add_argument("--out", required=True, help="output .f64 path (sidecar JSON added)")

    return parser


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "compose-check": cmd_compose_check,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "make-vocab": cmd_make_vocab,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as e:
        print(f"error: training diverged at step {e.step}", file=sys.stderr)
        return 3
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
