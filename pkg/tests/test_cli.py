import csv
import json
import subprocess
import sys

import pytest

from evogen.cli import main, write_table
from evogen.geo import GeoTorus, MigrationKernel
from evogen.moran import MoranConfig


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def moran_cfg(tmp_path):
    cfg = MoranConfig(GeoTorus(1, 2), 2, 1.0, MigrationKernel.simple(1), 50.0, 0)
    path = tmp_path / "moran.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


@pytest.fixture
def logs(tmp_path, moran_cfg):
    out = tmp_path / "logs"
    assert main(["moran", "simulate", "--config", str(moran_cfg), "--seed", "3",
                 "--replicates", "3", "--out", str(out)]) == 0
    return [out / f"events_{r}.jsonl" for r in range(3)]


def test_write_table_formats(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [2, None]], "csv", seed=4)
    assert read_csv(tmp_path / "t.csv") == [["seed", "a", "b"], ["4", "1", "0.1"], ["4", "2", ""]]
    write_table(tmp_path / "t.jsonl", ["a"], [[1.5]], "jsonl", seed=4)
    recs = [json.loads(s) for s in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert recs == [{"kind": "header", "columns": ["seed", "a"], "seed": 4}, {"seed": 4, "a": 1.5}]


def test_geo_dconst(tmp_path):
    assert main(["--out", str(tmp_path), "geo", "d-const", "--d", "3"]) == 0
    rows = read_csv(tmp_path / "dconst.csv")
    head = rows[0]
    assert head[0] == "seed" and "D" in head
    assert abs(float(rows[1][head.index("D")]) - 0.5688) < 1e-3
    assert main(["geo", "d-const", "--d", "2", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "dconst.csv")
    assert rows[1][rows[0].index("divergent")] == "1"


def test_geo_dconst_custom_kernel(tmp_path):
    kfile = tmp_path / "k.json"
    kfile.write_text(json.dumps(MigrationKernel.simple(3).to_dict()))
    assert main(["geo", "d-const", "--d", "3", "--kernel", str(kfile), "--out", str(tmp_path),
                 "--format", "jsonl"]) == 0
    recs = [json.loads(s) for s in (tmp_path / "dconst.jsonl").read_text().splitlines()]
    assert recs[0]["kind"] == "header" and recs[1]["divergent"] == 0


def test_moran_simulate_and_snapshot(tmp_path, logs):
    rows = read_csv(tmp_path / "logs" / "moran_runs.csv")
    assert rows[0][:3] == ["seed", "replicate", "n"] and len(rows) == 4
    assert all(r[0] == "3" for r in rows[1:])
    head = json.loads(logs[0].read_text().splitlines()[0])
    assert head["seed"] == 3
    assert main(["moran", "snapshot", "--log", str(logs[0]), "--t", "10", "--out", str(tmp_path)]) == 0
    dist = read_csv(tmp_path / "snapshot_distances.csv")
    assert dist[0] == ["seed", "i", "j", "label_i", "label_j", "distance"]
    assert len(dist) == 1 + 8 * 8
    leaves = read_csv(tmp_path / "snapshot_leaves.csv")
    assert leaves[0] == ["seed", "label", "mass", "marks"] and len(leaves) == 9


def test_moran_stop_at_fixation(tmp_path, moran_cfg):
    assert main(["moran", "simulate", "--config", str(moran_cfg), "--stop-at-fixation",
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "moran_runs.csv")
    assert rows[1][rows[0].index("fixation_time")] != ""


def test_coal_commands(tmp_path, logs):
    assert main(["coal", "simulate", "--n", "6", "--d", "1", "--N", "2", "--replicates", "2",
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "coalescent.csv")
    assert rows[0] == ["seed", "replicate", "tick", "h", "kind", "x", "y"]
    merges = [r for r in rows[1:] if r[4] == "merge"]
    assert len(merges) == 2 * 5
    assert main(["coal", "from-log", "--log", str(logs[0]), "--T", "20", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "coalescent.csv")
    assert all(int(r[2]) >= 0 for r in rows[1:])


def test_measrep_commands(tmp_path, logs):
    assert main(["measrep", "build", "--log", str(logs[0]), "--T", "5", "--out", str(tmp_path)]) == 0
    recs = [json.loads(s) for s in (tmp_path / "measrep.jsonl").read_text().splitlines()]
    assert recs[0]["kind"] == "header" and recs[1]["h"] == 0.0
    assert main(["measrep", "mrca", "--log", *map(str, logs), "--T", "1", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "mrca.csv")
    assert rows[0] == ["seed", "replicate", "anchor", "mrca"] and len(rows) == 4
    assert main(["measrep", "pairdist", "--log", *map(str, logs), "--h-grid", "0,1,2",
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "pairdist.csv")
    assert rows[0] == ["seed", "anchor", "h", "replicates", "moment", "stderr"]
    moments = [float(r[4]) for r in rows[1:]]
    assert moments == sorted(moments)


def test_fss_command(tmp_path):
    cfg = tmp_path / "fss.json"
    cfg.write_text(json.dumps({"sizes": [1], "replicates": 4, "pair_replicates": 2}))
    assert main(["fss", "--config", str(cfg), "--replicates", "6", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "fss_report.json").read_text())
    assert report["config"]["replicates"] == 6
    rows = read_csv(tmp_path / "fss.csv")
    assert rows[0][:3] == ["seed", "N", "volume"] and len(rows) == 1 + 3


def test_check_command(tmp_path, capsys):
    assert main(["check", "--replicates", "5", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4
    rows = read_csv(tmp_path / "check.csv")
    assert rows[0] == ["seed", "check", "instances", "failures", "first_failure"]


def test_errors_are_reported(tmp_path, capsys, logs):
    assert main(["coal", "from-log", "--log", str(logs[0]), "--T", "99", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["check", "--replicates", "0"]) == 2
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_global_flags_before_and_after(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--seed", "9", "--out", str(a), "coal", "simulate", "--n", "4"]) == 0
    assert main(["coal", "simulate", "--n", "4", "--seed", "9", "--out", str(b)]) == 0
    assert (a / "coalescent.csv").read_bytes() == (b / "coalescent.csv").read_bytes()
    assert read_csv(a / "coalescent.csv")[1][0] == "9"


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "evogen.cli", "geo", "d-const", "--d", "0",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "dconst.csv" in proc.stdout
