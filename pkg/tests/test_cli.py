import copy
import json

import numpy as np
import pytest

from conftest import internal_resonance_cfg, linear_resonance_cfg, trivial_cfg, with_parametric_amplitude
from qpreduce import __version__
from qpreduce.cli import (EXIT_CONFIG, EXIT_LINEAR, EXIT_OK, EXIT_REDUCIBILITY, build_system, config_hash,
                          dump_config, main, parse_config, read_csv)
from qpreduce.errors import ConfigError


def run(tmp_path, cfg, *args, name="out"):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg) if isinstance(cfg, dict) else cfg, encoding="utf-8")
    out = tmp_path / name
    code = main([args[0], "--config", str(cfg_path), "--out", str(out), *args[1:]])
    return code, out


def load(out, name):
    return json.loads((out / name).read_text(encoding="utf-8"))


# ----------------------------------------------------------------------------
# configuration


def test_config_round_trip_is_a_fixed_point(bundled_cfg):
    once = parse_config(bundled_cfg)
    twice = parse_config(dump_config(once))
    assert twice == once and dump_config(twice) == dump_config(once)
    assert config_hash(twice) == config_hash(once)


@pytest.mark.parametrize("mutate, path", [
    (lambda c: c.update(dimension="four"), "/dimension"),
    (lambda c: c["frequencies"][0].update(value=-1.0), "/frequencies/0/value"),
    (lambda c: c.update(colour="red"), "/"),
    (lambda c: c.pop("B0"), "/"),
    (lambda c: c["solver"].update(step="fast"), "/solver/step"),
])
def test_schema_errors_report_the_failing_path(bundled_cfg, mutate, path):
    cfg = copy.deepcopy(bundled_cfg)
    mutate(cfg)
    with pytest.raises(ConfigError) as err:
        parse_config(cfg)
    assert err.value.path == path


def test_malformed_json_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_duplicate_labels_exit_with_config_code(tmp_path, capsys, bundled_cfg):
    cfg = copy.deepcopy(bundled_cfg)
    cfg["frequencies"][1]["label"] = "w1"
    code, out = run(tmp_path, cfg, "analyze")
    assert code == EXIT_CONFIG
    assert "w1" in capsys.readouterr().err
    assert sorted(p.name for p in out.iterdir()) == ["artifact.json"]
    doc = load(out, "artifact.json")
    assert doc["exit_code"] == EXIT_CONFIG and doc["error_path"] == "/frequencies"


@pytest.mark.parametrize("section, path", [("forcing_terms", "/forcing_terms/0/frequency"),
                                           ("parametric_terms", "/parametric_terms/0/frequency")])
def test_undefined_frequency_labels_are_rejected(bundled_cfg, section, path):
    cfg = copy.deepcopy(bundled_cfg)
    cfg[section][0]["frequency"] = "nope"
    with pytest.raises(ConfigError) as err:
        parse_config(cfg)
    assert err.value.path == path and "nope" in str(err.value)


def test_forcing_label_in_parametric_term_is_rejected(bundled_cfg):
    cfg = copy.deepcopy(bundled_cfg)
    cfg["parametric_terms"][0]["frequency"] = "wf"
    with pytest.raises(ConfigError):
        parse_config(cfg)


def test_commensurate_parametric_frequencies_exit_with_config_code(tmp_path, bundled_cfg):
    cfg = copy.deepcopy(bundled_cfg)
    cfg["frequencies"][1]["value"] = 2 * cfg["frequencies"][0]["value"]
    with pytest.raises(ConfigError):
        build_system(parse_config(cfg))
    assert run(tmp_path, cfg, "analyze")[0] == EXIT_CONFIG


def test_forcing_may_be_commensurate_with_parametric_frequencies(bundled_cfg):
    cfg = copy.deepcopy(bundled_cfg)
    cfg["frequencies"][2]["value"] = cfg["frequencies"][0]["value"]
    system = build_system(parse_config(cfg))
    assert system.forcing_basis.labels == ("w1", "w2", "wf")


# ----------------------------------------------------------------------------
# analyze


def test_analyze_defaults_to_bundled_example(tmp_path, capsys):
    assert main(["analyze", "--out", str(tmp_path)]) == EXIT_OK
    doc = load(tmp_path, "analysis.json")
    im = [c[1] for c in doc["jbar"]]
    assert np.abs(np.array(im) - [-1.78, 1.78, -2.29, 2.29]).max() <= 0.01
    assert "jbar[0]" in capsys.readouterr().out


def test_unmodulated_config_keeps_unperturbed_eigenvalues(tmp_path, bundled_cfg):
    code, out = run(tmp_path, with_parametric_amplitude(bundled_cfg, 0.0), "analyze")
    assert code == EXIT_OK
    doc = load(out, "analysis.json")
    jbar = np.array([complex(*c) for c in doc["jbar"]])
    assert np.abs(jbar - [-1j * 3 ** 0.5, 1j * 3 ** 0.5, -1j * 5 ** 0.5, 1j * 5 ** 0.5]).max() <= 1e-12
    assert doc["resonance"]["entries"] == [] and doc["resonance"]["retained"] == 0


def test_artifact_records_hash_version_and_stages(tmp_path, bundled_cfg):
    code, out = run(tmp_path, bundled_cfg, "analyze")
    art = load(out, "artifact.json")
    assert code == EXIT_OK
    assert art["config_hash"] == config_hash(parse_config(bundled_cfg))
    assert art["tool_version"] == __version__
    assert art["stages"]["normal_form"]["status"] == "ok" and len(art["jbar"]) == 4


# ----------------------------------------------------------------------------
# resonance guards


def test_forcing_at_slave_frequency_exits_with_linear_resonance(tmp_path, capsys, bundled_cfg):
    code, out = run(tmp_path, linear_resonance_cfg(bundled_cfg), "reduce", "--method", "manifold")
    assert code == EXIT_LINEAR
    assert "Eq33-linear" in capsys.readouterr().err
    assert sorted(p.name for p in out.iterdir()) == ["artifact.json"]
    art = load(out, "artifact.json")
    assert art["exit_code"] == EXIT_LINEAR and art["stages"]["manifold"]["status"] == "error"


def test_internal_resonance_exits_naming_the_condition(tmp_path, capsys, bundled_cfg):
    code, out = run(tmp_path, internal_resonance_cfg(bundled_cfg), "reduce")
    assert code == EXIT_REDUCIBILITY
    assert "Eq39" in capsys.readouterr().err
    assert sorted(p.name for p in out.iterdir()) == ["artifact.json"]


@pytest.mark.parametrize("make", [linear_resonance_cfg, internal_resonance_cfg, lambda c: c])
def test_linear_reduction_always_succeeds(tmp_path, bundled_cfg, make):
    code, out = run(tmp_path, make(bundled_cfg), "reduce", "--method", "linear")
    assert code == EXIT_OK
    assert load(out, "reduction.json")["method"] == "linear"
    assert {"lp.json", "reduction.json", "model_linear.json", "artifact.json"} <= {p.name for p in out.iterdir()}


def test_coarse_seed_tolerance_blocks_the_manifold(tmp_path, capsys, bundled_cfg):
    # the forced stage is solved first, so a coarse tolerance trips it before any higher-order condition
    code, _ = run(tmp_path, bundled_cfg, "reduce", "--seed-tolerances", "manifold=0.5")
    assert code == EXIT_LINEAR
    assert "below tolerance 0.5" in capsys.readouterr().err


def test_malformed_flags_exit_with_config_code(tmp_path, bundled_cfg):
    assert run(tmp_path, bundled_cfg, "analyze", "--seed-tolerances", "speed=1", name="a")[0] == EXIT_CONFIG
    assert run(tmp_path, bundled_cfg, "analyze", "--masters", "x,y", name="b")[0] == EXIT_CONFIG
    assert run(tmp_path, bundled_cfg, "lp", "--method", "newton", name="c")[0] == EXIT_CONFIG


def test_master_override(tmp_path, bundled_cfg):
    code, out = run(tmp_path, bundled_cfg, "reduce", "--method", "linear", "--masters", "2,3")
    assert code == EXIT_OK
    doc = load(out, "reduction.json")
    assert doc["masters"] == [2, 3] and doc["slaves"] == [0, 1]


# ----------------------------------------------------------------------------
# outputs


def test_lp_writes_verified_transform_and_inverse(tmp_path, bundled_cfg):
    code, out = run(tmp_path, bundled_cfg, "lp", "--method", "direct")
    assert code == EXIT_OK
    doc = load(out, "lp.json")
    assert doc["verification"]["q0_error"] <= 1e-8 and doc["inverse"]["max_residual"] <= 1e-10
    header, data = read_csv(out / "inverse_direct.csv")
    assert header[0] == "t" and header[-1] == "residual" and data.shape == (1000, 18)


def test_trivial_config_reduces_exactly(tmp_path):
    code, out = run(tmp_path, trivial_cfg(), "compare")
    assert code == EXIT_OK
    summary = load(out, "summary.json")
    for method in ("linear", "manifold"):
        assert max(summary["methods"][method]["rms_error"]) <= 1e-6
        assert summary["methods"][method]["psd_match"]


def test_reruns_are_byte_identical_and_csvs_reparse(tmp_path):
    _, a = run(tmp_path, trivial_cfg(), "compare", name="a")
    _, b = run(tmp_path, trivial_cfg(), "compare", name="b")
    csvs = sorted(p.name for p in a.glob("*.csv"))
    assert csvs == ["phase_plane.csv", "psd.csv", "time_traces.csv"]
    for name in csvs:
        assert (a / name).read_bytes() == (b / name).read_bytes()
        header, data = read_csv(a / name)
        assert header[0] in ("t", "f_hz") and data.shape[1] == len(header) and len(data) > 1
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()


def test_simulate_writes_named_trajectory(tmp_path):
    code, out = run(tmp_path, trivial_cfg(), "simulate", "--method", "linear")
    assert code == EXIT_OK
    header, data = read_csv(out / "trajectory_linear.csv")
    assert header == ["t", "x1", "x2", "x3", "x4"]
    assert data[0, 1:].tolist() == pytest.approx([0.1, 0, 0, 0], abs=1e-15)
