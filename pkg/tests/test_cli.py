import csv
import json

import pytest

from consensus_lab.cli import main
from consensus_lab.config import ConfigError, load_config, parse_config

BASE = """\
objective.family = cubic_perturbed
objective.d = 4
objective.n = 32
objective.cubic_scale = 0.1
topology.kind = ring
topology.m = 8
trainer.eta = 0.05
trainer.local_batch = 1
trainer.steps = {steps}
diagnostics.every = 5
diagnostics.sharpness_samples = 50
output.dir = {out}
"""


def write_cfg(tmp_path, name="run.cfg", steps=20, extra="", out=None):
    out = out or tmp_path / "out"
    path = tmp_path / name
    path.write_text(BASE.format(steps=steps, out=out) + extra)
    return path, out


def read_records(out):
    return [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]


def test_zero_steps_writes_single_record(tmp_path):
    cfg, out = write_cfg(tmp_path, steps=0)
    assert main(["run", str(cfg)]) == 0
    records = read_records(out)
    assert len(records) == 1 and records[0]["step"] == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == load_config(cfg).config_hash
    assert manifest["records"] == 1 and manifest["diverged"] is False


def test_records_share_keys_and_follow_schedule(tmp_path):
    cfg, out = write_cfg(tmp_path, steps=12)
    assert main(["run", str(cfg)]) == 0
    records = read_records(out)
    assert [r["step"] for r in records] == [0, 5, 10, 12]
    assert len({tuple(r) for r in records}) == 1
    assert "wall_clock" not in records[0]


def test_reruns_are_byte_identical(tmp_path):
    a, out_a = write_cfg(tmp_path, "a.cfg", extra="diagnostics.landscape = 1d\n", out=tmp_path / "a")
    b, out_b = write_cfg(tmp_path, "b.cfg", extra="diagnostics.landscape = 1d\n", out=tmp_path / "b")
    assert main(["run", str(a)]) == 0
    assert main(["run", str(b)]) == 0
    assert (out_a / "metrics.jsonl").read_bytes() == (out_b / "metrics.jsonl").read_bytes()
    assert (out_a / "landscape.csv").read_bytes() == (out_b / "landscape.csv").read_bytes()


def test_negative_eta_names_key(tmp_path, capsys):
    cfg, _ = write_cfg(tmp_path, extra="")
    cfg.write_text(cfg.read_text().replace("trainer.eta = 0.05", "trainer.eta = -0.1"))
    assert main(["run", str(cfg)]) == 1
    assert "trainer.eta" in capsys.readouterr().err


@pytest.mark.parametrize(
    "extra, key",
    [
        ("trainer.momentum = 0.9\n", "trainer.momentum"),
        ("topology.m = 4\n", "topology.m"),
        ("trainer.algorithm = sgd\n", "topology.m"),
        ("objective.family = spiral\n", "objective.family"),
        ("trainer.local_batch = 5\n", "trainer.local_batch"),
        ("no equals sign\n", "expected"),
    ],
)
def test_invalid_configs_exit_one(tmp_path, capsys, extra, key):
    cfg, _ = write_cfg(tmp_path, extra=extra)
    assert main(["run", str(cfg)]) == 1
    assert key in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run", str(tmp_path / "nope.cfg")]) == 1


def test_bad_arguments_exit_one():
    assert main(["frobnicate"]) == 1


def test_hash_ignores_comments_order_and_spacing():
    a = parse_config("trainer.eta = 0.1\ntopology.m = 4\n")
    b = parse_config("# comment\ntopology.m=4   # trailing\n\n  trainer.eta   =   0.1\n")
    c = parse_config("trainer.eta = 0.2\ntopology.m = 4\n")
    assert a.config_hash == b.config_hash != c.config_hash


def test_duplicate_keys_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("trainer.eta = 0.1\ntrainer.eta = 0.2\n")


def test_divergence_exit_code(tmp_path, capsys):
    cfg, out = write_cfg(
        tmp_path, steps=200, extra="objective.cubic_scale = 5\ntrainer.eta = 5\ninit.center_scale = 10\n"
    )
    cfg.write_text(cfg.read_text().replace("objective.cubic_scale = 0.1\n", "").replace("trainer.eta = 0.05\n", ""))
    assert main(["run", str(cfg)]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["diverged"] is True and manifest["divergence_step"] is not None


def test_topology_info_fully_connected(capsys):
    assert main(["topology-info", "fully_connected", "4"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["spectral_gap"] == 1.0
    assert info["matrix"] == [[0.25] * 4] * 4


def test_topology_info_ring(capsys):
    assert main(["topology-info", "ring", "4"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert f"{info['spectral_gap']:.6g}" == "0.666667"
    assert info["lambda"] == pytest.approx(1 / 3, abs=1e-12)


def test_topology_info_invalid_grid(capsys):
    assert main(["topology-info", "grid", "5"]) == 1
    assert "non-square" in capsys.readouterr().err


def read_summary(root):
    with open(root / "sweep_summary.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_single_value_sweep_matches_run(tmp_path):
    cfg, out = write_cfg(tmp_path, steps=10)
    assert main(["sweep", str(cfg), "--axis", "trainer.seed=0"]) == 0
    swept = (out / "trainer.seed=0" / "metrics.jsonl").read_bytes()
    single, single_out = write_cfg(tmp_path, "single.cfg", steps=10, out=tmp_path / "single")
    assert main(["run", str(single)]) == 0
    assert swept == (single_out / "metrics.jsonl").read_bytes()
    rows = read_summary(out)
    assert len(rows) == 1 and rows[0]["run"] == "trainer.seed=0"


def test_topology_sweep_ring_more_diverse(tmp_path):
    cfg, out = write_cfg(tmp_path, steps=100)
    assert main(["sweep", str(cfg), "--axis", "topology.kind=ring,fully_connected"]) == 0
    rows = {r["value"]: r for r in read_summary(out)}
    assert float(rows["ring"]["mean_consensus_distance"]) > float(rows["fully_connected"]["mean_consensus_distance"])


def test_batch_sweep_kappa_decreases(tmp_path):
    cfg = tmp_path / "sgd.cfg"
    cfg.write_text(
        "objective.family = quadratic\nobjective.d = 3\nobjective.n = 128\n"
        "topology.kind = fully_connected\ntopology.m = 1\ntrainer.algorithm = sgd\n"
        f"trainer.steps = 5\noutput.dir = {tmp_path / 'sweep'}\n"
    )
    assert main(["sweep", str(cfg), "--axis", "trainer.local_batch=4,16,64"]) == 0
    kappas = [float(r["kappa"]) for r in read_summary(tmp_path / "sweep")]
    assert kappas[0] > kappas[1] > kappas[2] > 0


@pytest.mark.parametrize("axis", ["trainer.eta", "nonsense.key=1,2", "trainer.eta=0.1,-1"])
def test_sweep_rejects_bad_axis(tmp_path, axis):
    cfg, out = write_cfg(tmp_path)
    assert main(["sweep", str(cfg), "--axis", axis]) == 1
    assert not out.exists()


def test_verify_lemma_suite(tmp_path, capsys):
    assert main(["verify", "lemma_c2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verify_lemma_c2.json").read_text())
    assert report["passed"]
    assert report["checks"][0]["worst"] <= 1e-10
    assert "PASS" in capsys.readouterr().out


def test_verify_props_suite(tmp_path):
    assert main(["verify", "props", "--out", str(tmp_path)]) == 0
    names = {c["name"]: c for c in json.loads((tmp_path / "verify_props.json").read_text())["checks"]}
    assert names["quadratic_zero_diversity"]["passed"]
    assert names["spectral_gaps"]["passed"]
