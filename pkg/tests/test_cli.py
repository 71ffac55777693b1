import textwrap

import pytest

from extinction_lab import cli

MINIMAL_RATE = """
[experiment]
study = rate-study
[params]
N = 1
p = 1.6
q = 0.7
"""

SMALL_LEMMA = """
[experiment]
study = lemma-check
seed = 3
[params]
N = 1
p = 1.6
q = 0.7
[grid]
r_max = 200
n = 400
[study]
families = 50
"""


def test_minimal_config_fills_study_defaults():
    cfg = cli.parse_config(MINIMAL_RATE)
    assert cfg.study is cli.Study.RATE_STUDY
    assert cfg.grid.r_max == 800.0 and cfg.grid.n == 2000
    assert cfg.solver.eps == 2e-8 and cfg.solver.eps_relative
    assert cfg.initial["sigma"] == 9.0
    assert cfg.options["decades"] == 2.0 and cfg.options["refine"] is True


def test_digest_ignores_comments_and_spacing():
    noisy = "# header\n" + MINIMAL_RATE.replace("p = 1.6", "p=1.6   # exponent")
    assert cli.parse_config(noisy).digest == cli.parse_config(MINIMAL_RATE).digest
    assert cli.parse_config(MINIMAL_RATE.replace("0.7", "0.75")).digest != cli.parse_config(MINIMAL_RATE).digest


def test_regime_violation_names_the_inequality():
    with pytest.raises(cli.ConfigError, match=r"q < p/2"):
        cli.parse_config(MINIMAL_RATE.replace("q = 0.7", "q = 0.9"))


def test_unknown_key_is_rejected_with_hint():
    text = MINIMAL_RATE + "[solver]\nepsilon = 1e-8\n"
    with pytest.raises(cli.ConfigError) as info:
        cli.parse_config(text)
    assert any("epsilon" in p and "eps" in p for p in info.value.problems)


def test_unknown_section_rejected():
    with pytest.raises(cli.ConfigError, match=r"\[mesh\]"):
        cli.parse_config(MINIMAL_RATE + "[mesh]\nn = 3\n")


def test_missing_keys_are_all_listed():
    with pytest.raises(cli.ConfigError) as info:
        cli.parse_config("[experiment]\nstudy = exponents\n[params]\nN = 1\n")
    missing = [p for p in info.value.problems if p.startswith("missing")]
    assert len(missing) == 2 and any(" p" in m for m in missing) and any(" q" in m for m in missing)


def test_bad_values_reported():
    with pytest.raises(cli.ConfigError, match="n"):
        cli.parse_config(MINIMAL_RATE + "[grid]\nn = 10.5\n")
    with pytest.raises(cli.ConfigError, match="scheme"):
        cli.parse_config(MINIMAL_RATE + "[solver]\nscheme = magic\n")


def test_rate_study_rejects_slow_tail():
    text = MINIMAL_RATE + "[initial]\nsigma = 3\n"
    with pytest.raises(cli.ConfigError, match="sigma_fast"):
        cli.parse_config(text)


def test_dichotomy_requires_exponents_on_both_sides():
    text = textwrap.dedent("""
        [experiment]
        study = tail-dichotomy
        [params]
        N = 1
        p = 1.6
        q = 0.7
        [study]
        sigma_below = 2.5
    """)
    with pytest.raises(cli.ConfigError, match="sigma_below"):
        cli.parse_config(text)


def test_verdict_round_trip():
    v = cli.Verdict("rate-study", False, {"x": 1.25, "y": None}, "abc", diagnostics=["tail grew"])
    back = cli.Verdict.from_text(v.to_text())
    assert back.passed is False and back.config_hash == "abc"
    assert back.metrics == {"x": "1.25", "y": "absent"}
    assert back.diagnostics == ["tail grew"]


def test_exponents_study_passes(tmp_path):
    cfg = cli.parse_config("[experiment]\nstudy = exponents\n[params]\nN = 2\np = 1.5\nq = 0.6\n")
    v = cli.run_study(cfg, tmp_path)
    assert v.passed
    assert (tmp_path / "verdict.txt").read_text().startswith("study = exponents")
    assert cli.parse_config((tmp_path / "config.ini").read_text()).digest == cfg.digest


def test_runs_are_byte_identical(tmp_path):
    cfg = cli.parse_config(SMALL_LEMMA)
    cli.run_study(cfg, tmp_path / "a")
    cli.run_study(cfg, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert any(f.endswith(".csv") for f in files)
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_mismatched_subcommand_fails(tmp_path):
    v = cli.run_study(cli.parse_config(SMALL_LEMMA), tmp_path, expect=cli.Study.RATE_STUDY)
    assert not v.passed and "invoked as rate-study" in v.diagnostics[0]


def test_main_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text("[experiment]\nstudy = exponents\n[params]\nN = 1\np = 1.6\nq = 0.7\n")
    assert cli.main(["exponents", "--config", str(good), "--out", str(tmp_path / "o1")]) == 0
    assert "pass = true" in capsys.readouterr().out
    assert cli.main(["rate-study", "--config", str(good), "--out", str(tmp_path / "o2")]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text(good.read_text().replace("0.7", "0.9"))
    assert cli.main(["exponents", "--config", str(bad), "--out", str(tmp_path / "o3")]) == 2
    assert "q < p/2" in capsys.readouterr().err
    assert cli.main(["exponents", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("name", ["exponents", "barrier_N1", "barrier_N2", "barrier_N3", "tail_dichotomy",
                                  "rate_study", "lemma_check"])
def test_shipped_configs_parse(name):
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.ini"
    cli.parse_config(path.read_text())
