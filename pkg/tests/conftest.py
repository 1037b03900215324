"""Session-scoped fixtures shared by the CLI and acceptance suites.

The pretrained base model and the desk-recipe adapters are expensive, so they
are built once per session and reused; every consumer treats them as frozen.
"""

import json

import pytest

from tara.diffusion import save_model
from tara.training import desk_recipe, make_dataset, train_baseline, train_concept
from tara.worlds import CLASS_NAMES, ToyConfig, build_world, pretrain_base

# verdict lines collected by the acceptance tests; echoed after the run
ACCEPTANCE_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def acceptance_verdicts():
    return ACCEPTANCE_VERDICTS


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


# small world for CLI plumbing tests: fast to pretrain, fast to sample
CLI_WORLD = {
    "g": 4,
    "d_model": 8,
    "d_text": 8,
    "layers": 2,
    "hidden": 8,
    "T": 40,
    "t_lo": 10,
    "t_hi": 20,
    "pretrain_t_floor": 5,
    "pretrain_steps": 25,
}


@pytest.fixture(scope="session")
def default_world():
    return build_world(ToyConfig())


@pytest.fixture(scope="session")
def default_base(default_world):
    return pretrain_base(default_world)


@pytest.fixture(scope="session")
def concept_datasets(default_world):
    """One dataset per concept, each bound to a distinct class."""
    world = default_world
    return tuple(
        make_dataset(world, world.concept(i, CLASS_NAMES[i])) for i in range(4)
    )


@pytest.fixture(scope="session")
def tara_adapters(default_world, default_base, concept_datasets):
    """Four token-focused adapters trained with the desk recipe."""
    cfg = default_world.config
    out = []
    for i, ds in enumerate(concept_datasets):
        recipe = desk_recipe(seed=11 + i, t_lo=cfg.t_lo, t_hi=cfg.t_hi)
        adapter, _ = train_concept(default_base, default_world.schedule, ds, recipe)
        out.append(adapter)
    return tuple(out)


@pytest.fixture(scope="session")
def unmasked_adapters(default_world, default_base, concept_datasets):
    """The same four concepts trained as unmasked baselines."""
    cfg = default_world.config
    out = []
    for i, ds in enumerate(concept_datasets):
        recipe = desk_recipe(seed=11 + i, t_lo=cfg.t_lo, t_hi=cfg.t_hi)
        adapter, _ = train_baseline(
            default_base, default_world.schedule, ds, recipe, mode="db-lora-unmasked"
        )
        out.append(adapter)
    return tuple(out)


@pytest.fixture(scope="session")
def cli_ws(tmp_path_factory):
    """A workspace with a tiny config file and a saved base model for CLI runs."""
    from tara.cli import main

    root = tmp_path_factory.mktemp("cliws")
    config = root / "tiny.json"
    config.write_text(json.dumps({"world": CLI_WORLD, "train": {"max_steps": 8}}))
    world = build_world(ToyConfig(**CLI_WORLD))
    base = root / "base.toym"
    save_model(pretrain_base(world), base)

    def run(*argv):
        return main([str(a) for a in argv])

    rc = run("train", "--config", config, "--class", "dog",
             "--out", root / "c1", "--seed", "11", "--base", base)
    assert rc == 0
    rc = run("train", "--config", config, "--class", "cat", "--concept-index", "1",
             "--out", root / "c2", "--seed", "12", "--base", base)
    assert rc == 0
    return {
        "root": root,
        "config": config,
        "base": base,
        "world": world,
        "run": run,
        "adapter1": root / "c1" / "adapter.tara",
        "adapter2": root / "c2" / "adapter.tara",
    }
