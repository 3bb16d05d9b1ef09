import json
import math
from pathlib import Path

import pytest

from semiflow.cli import main, run_command
from semiflow.config import ExperimentConfig
from semiflow.errors import ConfigError

DOUBLING_UNIT = """
[map]
name = "doubling"
params = []
[roof]
name = "constant"
params = [1.0]
"""

DOUBLING_IDENTITY = """
[map]
name = "doubling"
params = []
[roof]
name = "affine"
params = [0.0, 1.0]
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_defaults_are_complete():
    cfg = ExperimentConfig()
    assert cfg["map.name"] == "perturbed_doubling" and cfg["run.seed"] == 0


@pytest.mark.parametrize("text, key", [
    ("[scan]\nbogus = 1\n", "scan.bogus"),
    ("[mc]\nN = 0\n", "mc.N"),
    ("[roof]\nalpha = 1.5\n", "roof.alpha"),
    ("[schedule]\nB = \"fast\"\n", "schedule.B"),
    ("[mc]\npartner = \"other\"\n", "mc.partner"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_text(text)
    assert key in str(err.value) and err.value.exit_code == 2


def test_hash_ignores_jobs_and_out():
    cfg = ExperimentConfig.from_text(DOUBLING_UNIT)
    assert cfg.override(jobs=8, out="elsewhere").hash == cfg.hash
    assert cfg.override(seed=3).hash != cfg.hash


def test_verify_command(tmp_path):
    out = tmp_path / "o"
    assert main(["verify", write(tmp_path, DOUBLING_UNIT), "--out", str(out)]) == 0
    rep = json.loads((out / "assumptions.json").read_text())
    assert rep["all_pass"] and math.isclose(rep["lambda"], math.log(2), abs_tol=1e-12)
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_hash"] == rep["config_hash"] and man["config_text"] == DOUBLING_UNIT
    assert {"python", "numpy", "scipy"} <= set(man["versions"]) and "wall_time_s" in man


def test_cohomology_command(tmp_path):
    out = tmp_path / "o"
    assert main(["cohomology", write(tmp_path, DOUBLING_IDENTITY), "--out", str(out)]) == 0
    v = json.loads((out / "cohomology.json").read_text())
    assert v["verdict"] == "cohomologous" and len(set(round(c, 6) for c in v["chi"])) == 2


def test_csv_artifacts_carry_hash(tmp_path):
    out = tmp_path / "o"
    assert main(["transversality", write(tmp_path, DOUBLING_UNIT), "--out", str(out)]) == 0
    head = (out / "phi.csv").read_text().splitlines()
    assert head[0].startswith("# config_hash: ") and head[1] == "n,y_id,value"


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["verify", write(tmp_path, "[map]\nname = 3\n"), "--out", str(tmp_path / "o")]) == 2
    assert "map.name" in capsys.readouterr().err


def test_unknown_map_is_config_error(tmp_path):
    assert main(["verify", write(tmp_path, "[map]\nname = \"nope\"\n"), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["verify", str(tmp_path / "absent.toml")]) == 2


def test_resource_error_exit_code_keeps_earlier_artifacts(tmp_path):
    text = DOUBLING_UNIT + "[transversality]\nn_list = [4, 40]\n"
    out = tmp_path / "o"
    status, _, err = run_command("transversality", ExperimentConfig.from_text(text), out=str(out))
    assert status == 4 and "ResourceError" in err
    assert json.loads((out / "manifest.json").read_text())["exit_status"] == 4


def test_seed_override_changes_oscint(tmp_path):
    cfg = write(tmp_path, "[oscint]\ncount = 3\n")
    main(["oscint", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["oscint", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
    a = (tmp_path / "a" / "oscint.csv").read_text()
    b = (tmp_path / "b" / "oscint.csv").read_text()
    assert a != b


def test_schema_lists_every_csv():
    from importlib import resources
    schema = json.loads(resources.files("semiflow").joinpath("schemas/artifacts.json").read_text())
    assert set(schema["csv"]) == {"density.csv", "ly.csv", "scan.csv", "phi.csv", "varphi.csv", "oscint.csv",
                                  "correlation.csv"}
