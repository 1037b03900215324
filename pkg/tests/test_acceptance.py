"""Acceptance gate: ten numbered end-to-end checks at their stated tolerances.

Each check records exactly one `[ k/10] name: PASS|FAIL` verdict line; the
session hook in conftest echoes the lines as a terminal summary section, so
the gate's outcome is visible even when every test passes.
"""

import struct
import time

import numpy as np
import pytest

from tara import cli
from tara.adapters import (
    AdapterFormatError,
    AdapterRegistry,
    init_adapter,
    load_adapter,
    save_adapter,
)
from tara.analysis import attention_summary, interference
from tara.attention import AdapterTerm, MapCollector, TokenMask, composed_projection, masked_adapter_forward
from tara.diffusion import sample
from tara.numerics import Matrix, same_bits
from tara.seeding import rng_stream
from tara.text import ConceptBinding, build_vocab, encode_prompt
from tara.training import align_loss, desk_recipe, probe_losses, train_concept
from tara.worlds import CLASS_NAMES


def verdict(report: list, k: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[{k:>2}/10] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    report.append(line)
    print(line)
    assert ok, line


def registry_of(adapters) -> AdapterRegistry:
    reg = AdapterRegistry()
    for a in adapters:
        reg.register(a)
    return reg


# -- 1: masked columns are exact zeros ------------------------------------------------


def test_01_token_focus_exactness(acceptance_verdicts):
    words = ["a", "and", "of", "photo", "the", "dog", "cat", "toy", "vase",
             "v1*", "v2*", "v3*", "v4*"]
    rares = words[9:]
    classes = words[5:9]
    fillers = words[:5]
    vocab = build_vocab(seed=3, d=8, words=words)
    t0 = time.monotonic()
    checked = 0
    for i in range(1000):
        rng = rng_stream(11, i)
        d_model = int(rng.integers(4, 13))
        rank = int(rng.integers(1, 5))
        rare = rares[int(rng.integers(len(rares)))]
        klass = classes[int(rng.integers(len(classes)))]
        binding = ConceptBinding("c", vocab.id_of(rare), vocab.id_of(klass))
        prompt = [fillers[int(rng.integers(len(fillers)))]
                  for _ in range(int(rng.integers(1, 5)))]
        prompt += [rare] * int(rng.integers(1, 3)) + [klass]
        rng.shuffle(prompt)
        seq = encode_prompt(vocab, [binding], prompt)

        adapter = init_adapter(binding, rank, (0,), "gaussian", seed=i,
                               d_model=d_model, d_text=8, mask_policy="token-focused")
        for proj in ("K", "V"):
            b, _ = adapter.factors(0, proj)
            adapter.set_param(f"l0.{proj}.B", Matrix(rng.standard_normal(b.shape)))
        mask = adapter.mask_for(seq)
        assert set(mask.columns) == set(seq.rare_positions_of("c"))
        outside = [j for j in range(seq.n) if j not in mask.columns]
        w = Matrix(rng.standard_normal((d_model, 8)))
        base = w.array @ seq.X.array
        for proj in ("K", "V"):
            out = masked_adapter_forward(adapter.factors(0, proj), seq.X, mask)
            assert np.all(out.array[:, outside] == 0.0)
            assert np.any(out.array[:, list(mask.columns)] != 0.0)
            got = composed_projection(w, [adapter.term_for(0, proj, seq)], seq.X)
            assert np.array_equal(got.array[:, outside], base[:, outside])
            checked += 1
    elapsed = time.monotonic() - t0
    verdict(acceptance_verdicts, 1, "token-focus masked columns exactly zero", elapsed < 10.0,
            f"1000 instances, {checked} projections, {elapsed:.1f}s < 10s")


# -- 2: absent rare token means bitwise no-op ----------------------------------------


def test_02_absent_token_bitwise_invariance(acceptance_verdicts, default_world,
                                             default_base, tara_adapters):
    world, model = default_world, default_base
    spec0 = world.concept(0, CLASS_NAMES[0])
    seq = world.encode([world.binding(spec0)], world.prompt_solo(spec0))
    absent = tara_adapters[2]  # bound to v3*, which the prompt never mentions
    assert not seq.rare_positions_of(absent.concept.concept)
    t0 = time.monotonic()
    for seed in range(100):
        plain = sample(model, world.schedule, registry_of([]), seq, seed)
        with_absent = sample(model, world.schedule, registry_of([absent]), seq, seed)
        assert same_bits(plain.z, with_absent.z)
        solo = sample(model, world.schedule, registry_of([tara_adapters[0]]), seq, seed)
        stacked = sample(
            model, world.schedule, registry_of([tara_adapters[0], absent]), seq, seed
        )
        assert same_bits(solo.z, stacked.z)
    elapsed = time.monotonic() - t0
    verdict(acceptance_verdicts, 2, "absent-token composition bitwise no-op", elapsed < 120.0,
            f"100 seeds x 2 pairs, {elapsed:.1f}s < 120s")


# -- 3: composition matches a dense oracle -------------------------------------------


def dense_reference(w: Matrix, terms, X: Matrix) -> np.ndarray:
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


def test_03_composition_oracle_equivalence(acceptance_verdicts):
    worst = 0.0
    for i in range(1000):
        rng = rng_stream(12, i)
        n = int(rng.integers(4, 11))
        d_text = int(rng.integers(4, 11))
        d_model = int(rng.integers(4, 13))
        w = Matrix(rng.standard_normal((d_model, d_text)))
        X = Matrix(rng.standard_normal((d_text, n)))
        terms = []
        for j in range(i % 5):
            cols = tuple(int(c) for c in np.flatnonzero(rng.random(n) < 0.4))
            mask = TokenMask(concept=f"a{j}", n=n, columns=cols)
            rank = int(rng.integers(1, 4))
            b = Matrix(rng.standard_normal((d_model, rank)))
            a = Matrix(rng.standard_normal((rank, d_text)))
            if rng.random() < 0.5:
                terms.append(AdapterTerm((b, a), mask))
            else:
                terms.append(AdapterTerm(Matrix(b.array @ a.array), mask))
        got = composed_projection(w, terms, X)
        want = dense_reference(w, terms, X)
        worst = max(worst, float(np.abs(got.array - want).max()))
    verdict(acceptance_verdicts, 3, "composition equals dense oracle", worst < 1e-12,
            f"1000 instances, p in 0..4, max abs dev {worst:.2e} < 1e-12")


# -- 4: gradcheck command on the default config --------------------------------------


def test_04_gradcheck_command(acceptance_verdicts, capsys):
    t0 = time.monotonic()
    rc = cli.main(["gradcheck"])
    elapsed = time.monotonic() - t0
    out = capsys.readouterr().out
    assert "gradcheck: PASS" in out
    rc_corrupt = cli.main(["gradcheck", "--corrupt"])
    capsys.readouterr()
    verdict(acceptance_verdicts, 4, "gradcheck on default config", rc == 0 and rc_corrupt == 1 and elapsed < 60.0,
            f"exit {rc}, corrupted-control exit {rc_corrupt}, {elapsed:.1f}s < 60s")


# -- 5: alignment loss semantics ------------------------------------------------------


def test_05_alignment_loss_semantics(acceptance_verdicts, default_world,
                                     default_base, concept_datasets):
    model = default_base
    dataset = concept_datasets[0]
    seq = dataset.seq
    binding = default_world.binding(dataset.spec)
    adapter = init_adapter(binding, 8, tuple(range(model.L)), "gaussian", seed=0,
                           d_model=model.d_model, d_text=model.d_text,
                           mask_policy="token-focused")
    concept = binding.concept
    r = sorted(seq.rare_positions_of(concept))[0]
    c = sorted(seq.class_positions_of(concept))[0]
    x_r = seq.X.array[:, r : r + 1]
    x_c = seq.X.array[:, c : c + 1]
    for layer in adapter.layers:
        w_k = model.blocks[layer].attn.w_k.array
        a = np.zeros((adapter.rank, adapter.d_text))
        a[0] = x_r.ravel() / float(x_r.ravel() @ x_r.ravel())
        b = np.zeros((w_k.shape[0], adapter.rank))
        b[:, 0] = (w_k @ (x_c - x_r)).ravel()
        adapter.set_param(f"l{layer}.K.A", Matrix(a))
        adapter.set_param(f"l{layer}.K.B", Matrix(b))
    exact = align_loss(model, adapter, seq).item()

    rng = np.random.default_rng(7)
    before = align_loss(model, adapter, seq)
    for layer in adapter.layers:
        b, a = adapter.factors(layer, "V")
        adapter.set_param(f"l{layer}.V.B", Matrix(rng.standard_normal(b.shape)))
        adapter.set_param(f"l{layer}.V.A", Matrix(rng.standard_normal(a.shape)))
    after = align_loss(model, adapter, seq)
    v_invariant = same_bits(before, after)
    verdict(acceptance_verdicts, 5, "alignment loss semantics", exact < 1e-12 and v_invariant,
            f"exact-construction loss {exact:.2e} < 1e-12, V-path delta exactly 0")


# -- 6: training reduces both losses --------------------------------------------------


def test_06_training_effectiveness(acceptance_verdicts, default_world,
                                   default_base, concept_datasets):
    world, model = default_world, default_base
    cfg = world.config
    dataset = concept_datasets[0]
    good = 0
    dreds, areds, runtimes = [], [], []
    for s in range(10):
        recipe = desk_recipe(seed=100 + s, t_lo=cfg.t_lo, t_hi=cfg.t_hi)
        assert recipe.total_steps(len(dataset.references)) <= 2000
        d0, _ = probe_losses(model, world.schedule, None, dataset,
                             t_lo=cfg.t_lo, t_hi=cfg.t_hi)
        t0 = time.monotonic()
        adapter, log = train_concept(model, world.schedule, dataset, recipe)
        runtimes.append(time.monotonic() - t0)
        de, ae = probe_losses(model, world.schedule, adapter, dataset,
                              t_lo=cfg.t_lo, t_hi=cfg.t_hi)
        a_first = log.rows[0][2]
        dred = 1.0 - de / d0
        ared = 1.0 - ae / a_first
        dreds.append(dred)
        areds.append(ared)
        good += dred >= 0.50 and ared >= 0.90
    ok = good >= 9 and max(runtimes) < 300.0
    verdict(acceptance_verdicts, 6, "single-concept training effectiveness", ok,
            f"{good}/10 seeds, median denoise red {np.median(dreds):.0%} >= 50%, "
            f"median align red {np.median(areds):.0%} >= 90%, "
            f"slowest run {max(runtimes):.0f}s < 300s")


# -- 7: composed interference ordering ------------------------------------------------


def test_07_interference_ordering(acceptance_verdicts, default_world, default_base,
                                  tara_adapters, unmasked_adapters):
    world, model = default_world, default_base
    specs = [world.concept(i, CLASS_NAMES[i]) for i in range(4)]
    results = {}
    for k, need in ((2, 8), (3, 7), (4, 7)):
        sub = specs[:k]
        regions = {sp.class_name: world.region(sp.class_name) for sp in sub}
        seq = world.encode([world.binding(sp) for sp in sub], world.prompt_composed(sub))
        wins = 0
        for s in range(10):
            means = {}
            for name, adapters in (("tara", tara_adapters), ("unmasked", unmasked_adapters)):
                # solo references use the same composed prompt with one adapter,
                # so the only variable is the other adapters' presence
                solo = {
                    sp.class_name: sample(model, world.schedule,
                                          registry_of([adapters[i]]), seq, s)
                    for i, sp in enumerate(sub)
                }
                composed = sample(model, world.schedule,
                                  registry_of(adapters[:k]), seq, s)
                means[name] = interference(solo, composed, regions, method=name).mean()
            wins += means["tara"] <= means["unmasked"]
        results[k] = (wins, need)
    ok = all(wins >= need for wins, need in results.values())
    verdict(acceptance_verdicts, 7, "composition interference ordering", ok,
            ", ".join(f"k={k}: {w}/10 (need >={n})" for k, (w, n) in results.items()))


# -- 8: attention stays on the concept's own region -----------------------------------


def test_08_attention_alignment_ordering(acceptance_verdicts, default_world,
                                         default_base, tara_adapters,
                                         unmasked_adapters):
    world, model = default_world, default_base
    sub = [world.concept(i, CLASS_NAMES[i]) for i in range(2)]
    seq = world.encode([world.binding(sp) for sp in sub], world.prompt_composed(sub))
    pos = [sorted(seq.rare_positions[sp.name])[0] for sp in sub]
    regions = [world.region(sp.class_name) for sp in sub]
    own_beats_other = 0
    tara_beats_unmasked = 0
    for s in range(10):
        own_iou = {}
        for name, adapters in (("tara", tara_adapters), ("unmasked", unmasked_adapters)):
            coll = MapCollector()
            sample(model, world.schedule, registry_of(adapters[:2]), seq, s,
                   collector=coll)
            summary = attention_summary(coll, tuple(pos))
            own = [summary.iou_region(pos[i], regions[i]) for i in range(2)]
            other = [summary.iou_region(pos[i], regions[1 - i]) for i in range(2)]
            if name == "tara":
                own_beats_other += all(a > b for a, b in zip(own, other))
            own_iou[name] = float(np.mean(own))
        tara_beats_unmasked += own_iou["tara"] > own_iou["unmasked"]
    ok = own_beats_other >= 8 and tara_beats_unmasked >= 7
    verdict(acceptance_verdicts, 8, "rare-token attention alignment ordering", ok,
            f"own>other {own_beats_other}/10 (need >=8), "
            f"tara>unmasked {tara_beats_unmasked}/10 (need >=7)")


# -- 9: the base stays frozen ----------------------------------------------------------


def test_09_frozen_base_checksums(acceptance_verdicts, default_world, default_base,
                                  concept_datasets):
    world, model = default_world, default_base
    cfg = world.config
    model_before = model.checksum()
    embeddings_before = world.vocab.table.tobytes()
    recipe = desk_recipe(seed=55, t_lo=cfg.t_lo, t_hi=cfg.t_hi, max_steps=25)
    train_concept(model, world.schedule, concept_datasets[1], recipe)
    ok = (model.checksum() == model_before
          and world.vocab.table.tobytes() == embeddings_before)
    verdict(acceptance_verdicts, 9, "base weights and embeddings frozen through training", ok,
            f"model checksum {model_before[:12]}... unchanged, embeddings bitwise equal")


# -- 10: adapter files round-trip bitwise ----------------------------------------------


def test_10_serialization_round_trip(acceptance_verdicts, tmp_path):
    path = tmp_path / "roundtrip.tara"
    for i in range(1000):
        rng = rng_stream(13, i)
        d_model = int(rng.integers(4, 13))
        d_text = int(rng.integers(4, 13))
        rank = int(rng.integers(1, min(d_model, d_text) + 1))
        layers = tuple(sorted(rng.choice(6, size=int(rng.integers(1, 4)), replace=False).tolist()))
        mode = "rob" if i % 3 == 0 else "gaussian"
        policy = "unmasked-baseline" if i % 2 else "token-focused"
        binding = ConceptBinding(f"c{i % 7}", 2 + i % 5, 7 + i % 3)
        adapter = init_adapter(binding, rank, layers, mode, seed=i,
                               d_model=d_model, d_text=d_text, mask_policy=policy)
        for layer in layers:
            for proj in ("K", "V"):
                b, a = adapter.factors(layer, proj)
                adapter.set_param(f"l{layer}.{proj}.B", Matrix(rng.standard_normal(b.shape)))
                if not adapter.frozen_a:
                    adapter.set_param(f"l{layer}.{proj}.A", Matrix(rng.standard_normal(a.shape)))
        save_adapter(adapter, path)
        first = path.read_bytes()
        loaded = load_adapter(path)
        assert loaded.concept == adapter.concept
        assert (loaded.rank, loaded.layers, loaded.mask_policy, loaded.init_mode) == (
            adapter.rank, adapter.layers, adapter.mask_policy, adapter.init_mode
        )
        for layer in layers:
            for proj in ("K", "V"):
                for got, want in zip(loaded.factors(layer, proj), adapter.factors(layer, proj)):
                    assert same_bits(got, want)
        save_adapter(loaded, path)
        assert path.read_bytes() == first

    save_adapter(adapter, path)
    blob = path.read_bytes()
    corruptions = {
        "bad magic": b"XXXX" + blob[4:],
        "bad version": blob[:4] + struct.pack("<I", 99) + blob[8:],
        "short preamble": blob[:8],
        "truncated header": blob[: 12 + 5],
        "header length beyond file": blob[:8] + struct.pack("<I", 10**6) + blob[12:],
        "garbage header json": blob[:12] + b"not json" + blob[20:],
    }
    rejected = 0
    for label, bad in corruptions.items():
        path.write_bytes(bad)
        with pytest.raises(AdapterFormatError) as first_err:
            load_adapter(path)
        with pytest.raises(AdapterFormatError) as second_err:
            load_adapter(path)
        assert str(first_err.value) == str(second_err.value), label
        rejected += 1
    verdict(acceptance_verdicts, 10, "adapter files round-trip bitwise", rejected == len(corruptions),
            f"1000 adapters bitwise stable, {rejected}/6 corrupted headers "
            "rejected deterministically")
