import json
import subprocess
import sys

import pytest

from windobs import cli
from windobs.scenario import (
    Scenario, ScenarioError, bundled, load_scenario, parse_scenario, resolve, scenario_dir,
)

BASE = """\
[scenario]
name = tiny
group = custom

[model]
drag = false

[controls]
active = u_par

[queries]
zeta = zeta
"""

DIVERGING = """\
[scenario]
name = blowup

[model]
drag = true

[simulation]
T = 0.5
x0 = equilibrium

[filter]
init = truth
s0 = 1e200, 1e200, 1e200, 1e200, 1e200, 1e200
"""


def write(tmp_path, text, name="s.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(args, capsys):
    code = cli.main(args)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


# --- format


def test_defaults_are_filled():
    sc = parse_scenario(BASE)
    assert sc.name == "tiny"
    assert sc["algebra"]["order"] == 1 and sc["algebra"]["rel_tol"] == 1e-8
    assert list(sc["controls"]["active"]) == ["u_par"]
    assert sc.queries() == [("zeta", "zeta")]


def test_unknown_key_reports_its_line():
    text = BASE.replace("drag = false", "drag = false\ndargs = 3")
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text, "x.ini")
    assert info.value.line == 7
    assert "x.ini:7" in str(info.value) and "dargs" in str(info.value)


@pytest.mark.parametrize("text,where", [
    (BASE.replace("drag = false", "drag = maybe"), "drag"),
    (BASE + "\n[algebra]\norder = 3\n", "order"),
    (BASE + "\n[bogus]\n", "bogus"),
    (BASE + "\n[expected]\nrank = four\n", "rank"),
])
def test_bad_values_are_rejected(text, where):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    assert where in str(info.value)


@pytest.mark.parametrize("path", bundled(), ids=lambda p: p.stem)
def test_bundled_scenarios_round_trip(path):
    sc = load_scenario(path)
    again = parse_scenario(sc.to_ini())
    assert again == sc
    assert again.to_ini() == sc.to_ini()


def test_scenario_directory_override(tmp_path, monkeypatch):
    write(tmp_path, BASE, "tiny.ini")
    monkeypatch.setenv("WINDOBS_SCENARIO_DIR", str(tmp_path))
    assert scenario_dir() == tmp_path
    assert resolve("tiny") == tmp_path / "tiny.ini"
    assert [p.name for p in bundled()] == ["tiny.ini"]
    with pytest.raises(ScenarioError):
        resolve("missing")


def test_save_and_load(tmp_path):
    sc = parse_scenario(BASE)
    sc.save(tmp_path / "a.ini")
    assert load_scenario(tmp_path / "a.ini") == sc
    assert isinstance(sc, Scenario)


# --- exit codes


def test_analyze_success_and_json(tmp_path, capsys):
    out = tmp_path / "r.json"
    code, text, _ = run(["analyze", "table1-upar", "--out", str(out)], capsys)
    assert code == 0 and "rank" in text
    doc = json.loads(out.read_text())
    assert doc["report"]["rank"] == 6


def test_parse_error_exit(tmp_path, capsys):
    p = write(tmp_path, BASE.replace("[model]", "[model]\nnonsense = 1"))
    code, _, err = run(["analyze", p], capsys)
    assert code == 1 and "nonsense" in err


def test_singular_base_point_exit(tmp_path, capsys):
    p = write(tmp_path, BASE + "\n[points]\noverrides = v_par=0, v_perp=0\n")
    code, text, _ = run(["analyze", p], capsys)
    assert code == 2


def test_mismatch_exit(tmp_path, capsys):
    p = write(tmp_path, BASE + "\n[expected]\nrank = 5\n")
    code, text, _ = run(["analyze", p], capsys)
    assert code == 3 and "FAIL" in text


def test_nonfinite_simulation_exit(tmp_path, capsys):
    p = write(tmp_path, "[scenario]\nname = neg\n\n[simulation]\nT = 200\nparams = C_par=-50\n")
    code, text, _ = run(["simulate", p], capsys)
    assert code == 4 and "non-finite" in text


def test_diverging_filter_exit(tmp_path, capsys):
    code, text, _ = run(["filter", write(tmp_path, DIVERGING)], capsys)
    assert code == 5 and "diverged" in text


# --- outputs


def test_simulate_writes_csv_and_plot_script(tmp_path, capsys):
    out = tmp_path / "run" / "orbit.csv"
    metrics = tmp_path / "orbit.json"
    code, text, _ = run(["simulate", "fig2-orbit", "--out", str(out),
                         "--metrics", str(metrics)], capsys)
    assert code == 0
    header = out.read_text().splitlines()[0].split(",")
    assert header[:4] == ["t", "v_par", "v_perp", "phi"]
    assert "orbit.csv" in out.with_suffix(".gp").read_text()
    assert json.loads(metrics.read_text())["label"] == "calibratable"


def test_outputs_are_byte_stable(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run(["simulate", "fig2-two-turns", "--out", str(p), "--seed", "4"], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_reproduce_table2(tmp_path, capsys):
    code, text, _ = run(["reproduce", "--table", "2", "--out", str(tmp_path)], capsys)
    assert code == 0
    summary = (tmp_path / "summary.md").read_text()
    assert summary == text
    for name, pair in (("table2-upar", (13, 14)), ("table2-both", (17, 17))):
        doc = json.loads((tmp_path / f"{name}.json").read_text())
        assert (doc["report"]["rank"], doc["augmented_ranks"]["zeta"]) == pair


def test_schema_command(capsys):
    code, text, _ = run(["schema"], capsys)
    assert code == 0 and "[expected]" in text


def test_console_entry_point():
    done = subprocess.run([sys.executable, "-m", "windobs.cli", "analyze", "table1-base"],
                          capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
