from __future__ import annotations

import math

import pytest

from mambadm import envs, experiments
from mambadm.errors import ConfigurationError
from mambadm.experiments import (
    SweepSpec,
    dataset_target,
    fmt,
    parse_values,
    read_csv,
    run_sweep,
    skipped_branches,
    spectra_rows,
    sweep_summary,
    write_csv,
)
from mambadm.model import GlomaConfig, build_variant
from mambadm.training import TrainConfig


def test_fmt_round_trips_floats():
    for x in (0.1 + 0.2, 1e-300, -2.5, 100.0):
        assert float(fmt(x)) == x
    assert fmt(None) == "" and fmt(float("nan")) == "" and fmt(3) == "3" and fmt("25%") == "25%"


def test_csv_roundtrip(tmp_path):
    rows = [{"a": 1, "b": 0.5}, {"a": 2, "b": None}]
    write_csv(tmp_path / "x.csv", "demo", 3, ("a", "b"), rows)
    text = (tmp_path / "x.csv").read_text()
    assert text == "# schema=demo v3\na,b\n1,0.5\n2,\n"
    assert read_csv(tmp_path / "x.csv") == [{"a": "1", "b": "0.5"}, {"a": "2", "b": ""}]


def test_parse_values():
    assert parse_values("dataset_size", "25%, 50%,100%") == ["25%", "50%", "100%"]
    assert parse_values("dataset_size", "300,900") == [300, 900]
    assert parse_values("context_length", "10,30") == [10, 30]
    for factor, bad in (("dataset_size", "0%"), ("dataset_size", "101%"), ("layer_number", "3.5")):
        with pytest.raises(ConfigurationError):
            parse_values(factor, bad)


def test_dataset_target():
    assert dataset_target("25%", 1000) == 250
    assert dataset_target("33%", 10) == 4
    assert dataset_target(120, 1000) == 120


@pytest.mark.parametrize("kw", [dict(factor="depth", values=[1]), dict(factor="layer_number", values=[]),
                                dict(factor="layer_number", values=[1], repeats=0)])
def test_sweep_spec_validation(kw):
    with pytest.raises(ConfigurationError):
        SweepSpec(**kw)


def test_sweep_spec_seeds():
    assert SweepSpec("dataset_size", ["50%"], repeats=3, base_seed=4).seeds == [4, 5, 6]


def test_sweep_summary_skips_failures():
    rows = [
        {"value": "a", "normalized": 10.0, "status": "ok"},
        {"value": "a", "normalized": 30.0, "status": "ok"},
        {"value": "b", "normalized": None, "status": "failed"},
        {"value": "a", "normalized": "", "status": "ok"},
    ]
    (va, ma, sa, na), (vb, mb, sb, nb) = sweep_summary(rows)
    assert (va, ma, sa, na) == ("a", 20.0, 10.0, 2)
    assert vb == "b" and nb == 0 and math.isnan(mb)


def _tiny(env, **kw):
    base = dict(state_dim=env.state_dim, action_dim=2, d=8, n_layers=1, K=4, l_s=3, N_state=4)
    return GlomaConfig(**{**base, **kw})


def test_parallel_sweep_matches_serial():
    env = envs.chain(5, 10)
    man, eps = envs.generate_dataset(env, envs.parse_mix("expert:20,medium:20"), seed=0)
    spec = SweepSpec("context_length", [2, 4], repeats=2)
    tcfg = TrainConfig(max_steps=2, batch_size=4, warmup=1)
    serial = run_sweep(spec, man, eps, _tiny(env), tcfg, [1.0], 2, jobs=1)
    parallel = run_sweep(spec, man, eps, _tiny(env), tcfg, [1.0], 2, jobs=2)
    strip = [{k: v for k, v in r.items() if k != "wall_s"} for r in serial]
    assert strip == [{k: v for k, v in r.items() if k != "wall_s"} for r in parallel]
    assert [(r["value"], r["seed"]) for r in serial] == [(2, 0), (2, 1), (4, 0), (4, 1)]


def test_context_sweep_clamps_local_length():
    env = envs.chain(5, 10)
    man, eps = envs.generate_dataset(env, envs.parse_mix("expert:10"), seed=0)
    cfg = _tiny(env, l_s=12)
    row = experiments.sweep_leg(SweepSpec("context_length", [1]), 1, 0, man, eps, cfg,
                                TrainConfig(max_steps=1, batch_size=2, warmup=1), [1.0], 1)
    assert row["status"] == "ok"


def test_spectra_rows_cover_every_block():
    env = envs.chain(5, 10)
    m = build_variant("gloma", _tiny(env, n_layers=2))
    rows = spectra_rows(m)
    assert len(rows) == 2 * 2 * 8
    assert {(r["layer"], r["branch"]) for r in rows} == {(0, "global"), (0, "local"), (1, "global"), (1, "local")}
    assert rows[0]["n0"] == 0.0


@pytest.mark.parametrize("variant,skipped", [
    ("gloma", []),
    ("pmc", [(0, "local")]),
    ("cmc", [(0, "mixer")]),
    ("global_only", [(0, "local")]),
    ("local_only", [(0, "global")]),
])
def test_skipped_branches(variant, skipped):
    env = envs.chain(5, 10)
    assert skipped_branches(build_variant(variant, _tiny(env))) == skipped


def test_env_for_manifest_requires_params():
    env = envs.chain(5, 10)
    man, _ = envs.generate_dataset(env, [], seed=0)
    assert experiments.env_for_manifest(man) == env
    from dataclasses import replace

    with pytest.raises(ConfigurationError):
        experiments.env_for_manifest(replace(man, env_params={}))
