import json
from pathlib import Path

import numpy as np
import pytest

from flowdistill.checkpoint import checkpoint_for, load_checkpoint, load_model
from flowdistill.cli import main, read_samples_csv, write_samples_csv
from flowdistill.config import preset_config
from flowdistill.nets import OneStepGenerator, VectorFieldNet

TINY = {
    "mixture": {"preset": "ring8"},
    "network": {"hidden": [8, 8], "n_freq": 2},
    "pretrain": {"steps": 10, "batch_size": 16, "log_every": 1},
    "distill": {"steps": 4, "batch_size": 16, "log_every": 2},
    "metrics": {"n_samples": 200, "n_proj": 16, "euler_steps": 5, "field_mse_n": 200, "probe_n": 50},
    "verify": {"n": 1000, "n_configs": 1, "times": [0.5], "n_chunks": 10},
    "seed": 3,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def files_except_log(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "run.log"}


def test_pretrain_writes_expected_files(tiny_config, tmp_path):
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", tiny_config, "--out", str(out)]) == 0
    names = set(p.name for p in out.iterdir())
    assert {"teacher.ckpt", "pretrain_curve.csv", "samples_teacher_euler.csv", "pretrain_summary.json", "config.json", "run.log"} <= names
    curve = (out / "pretrain_curve.csv").read_text().splitlines()
    assert len(curve) == 1 + 10
    x, meta = read_samples_csv(out / "samples_teacher_euler.csv")
    assert x.shape == (200, 2) and meta["seed"] == "3" and meta["source"] == "teacher-euler5"
    assert load_checkpoint(out / "teacher.ckpt").kind == "teacher"


def test_pretrain_and_distill_are_byte_deterministic(tiny_config, tmp_path):
    for run in ("a", "b"):
        assert main(["pretrain", "--config", tiny_config, "--out", str(tmp_path / run / "pre")]) == 0
        teacher = str(tmp_path / run / "pre" / "teacher.ckpt")
        assert main(["distill", "--config", tiny_config, "--teacher", teacher, "--out", str(tmp_path / run / "dis")]) == 0
        assert main(["sample", "--checkpoint", teacher, "--n", "20", "--out", str(tmp_path / run / "smp")]) == 0
    for sub in ("pre", "dis", "smp"):
        a, b = files_except_log(tmp_path / "a" / sub), files_except_log(tmp_path / "b" / sub)
        assert a.keys() == b.keys() and a == b
    # the sidecar log carries the timestamps
    assert (tmp_path / "a" / "pre" / "run.log").read_text().strip()


def test_seed_flag_changes_outputs(tiny_config, tmp_path):
    main(["pretrain", "--config", tiny_config, "--out", str(tmp_path / "s3")])
    main(["pretrain", "--config", tiny_config, "--seed", "4", "--out", str(tmp_path / "s4")])
    assert (tmp_path / "s3" / "teacher.ckpt").read_bytes() != (tmp_path / "s4" / "teacher.ckpt").read_bytes()
    assert json.loads((tmp_path / "s4" / "config.json").read_text())["seed"] == 4


def test_distill_outputs_and_zero_steps(tiny_config, tmp_path):
    pre = tmp_path / "pre"
    main(["pretrain", "--config", tiny_config, "--out", str(pre)])
    out = tmp_path / "dis0"
    assert main(["distill", "--config", tiny_config, "--teacher", str(pre / "teacher.ckpt"), "--steps", "0", "--out", str(out)]) == 0
    before, _ = read_samples_csv(out / "samples_before.csv")
    after, _ = read_samples_csv(out / "samples_after.csv")
    np.testing.assert_array_equal(before, after)
    gen = load_model(load_checkpoint(out / "generator.ckpt"))
    assert isinstance(gen, OneStepGenerator)
    teacher = load_model(load_checkpoint(pre / "teacher.ckpt"))
    np.testing.assert_array_equal(gen.backbone.get_flat(), teacher.get_flat())

    out = tmp_path / "dis"
    assert main(["distill", "--config", tiny_config, "--analytic-teacher", "--out", str(out)]) == 0
    assert {"generator.ckpt", "online_flow.ckpt", "distill_curve.csv", "distill_summary.json"} <= {p.name for p in out.iterdir()}
    assert load_checkpoint(out / "online_flow.ckpt").kind == "online-flow"
    assert len((out / "distill_curve.csv").read_text().splitlines()) == 1 + 2


def test_distill_without_teacher_is_a_config_error(tiny_config, tmp_path, capsys):
    assert main(["distill", "--config", tiny_config, "--out", str(tmp_path)]) == 1
    assert "--teacher" in capsys.readouterr().err


def test_distill_refuses_architecture_mismatch(tiny_config, tmp_path, capsys):
    wrong = VectorFieldNet(2, hidden=(4,), n_freq=2).init(np.random.default_rng(0))
    checkpoint_for(wrong, "teacher").save(tmp_path / "wrong.ckpt")
    code = main(["distill", "--config", tiny_config, "--teacher", str(tmp_path / "wrong.ckpt"), "--out", str(tmp_path / "d")])
    assert code == 1
    assert "architecture mismatch" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_distillation_exits_2(tmp_path):
    cfg = dict(TINY, distill={"steps": 3, "batch_size": 8, "lr_gen": 1e300, "lr_flow": 1e300})
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert main(["distill", "--config", str(path), "--analytic-teacher", "--out", str(tmp_path / "d")]) == 2


def test_sample_generator_ignores_steps(tmp_path, capsys):
    gen = OneStepGenerator(VectorFieldNet(2, hidden=(4,), n_freq=1).init(np.random.default_rng(0)))
    checkpoint_for(gen, "generator").save(tmp_path / "g.ckpt")
    with pytest.warns(UserWarning, match="one-step model; steps ignored"):
        assert main(["sample", "--checkpoint", str(tmp_path / "g.ckpt"), "--steps", "50", "--n", "5"]) == 0
    assert "one-step model; steps ignored" in capsys.readouterr().err
    x, meta = read_samples_csv(tmp_path / "samples.csv")
    assert x.shape == (5, 2) and meta["source"] == "generator"


def test_sample_zero_rows_writes_header_only(tmp_path):
    net = VectorFieldNet(2, hidden=(4,), n_freq=1).init(np.random.default_rng(0))
    checkpoint_for(net, "teacher").save(tmp_path / "t.ckpt")
    assert main(["sample", "--checkpoint", str(tmp_path / "t.ckpt"), "--n", "0", "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "samples.csv").read_text().splitlines()
    assert lines == ["dim=2,seed=0,source=teacher-euler50", "x0,x1"]


def test_teacher_one_step_equals_unit_generator(tmp_path):
    net = VectorFieldNet(2, hidden=(6,), n_freq=2).init(np.random.default_rng(1), zero_final=False)
    checkpoint_for(net, "teacher").save(tmp_path / "t.ckpt")
    gen = OneStepGenerator(net.copy(), t_star=1.0, c_in=1.0, c_skip=1.0, c_out=1.0)
    checkpoint_for(gen, "generator").save(tmp_path / "g.ckpt")
    main(["sample", "--checkpoint", str(tmp_path / "t.ckpt"), "--steps", "1", "--n", "30", "--seed", "9", "--out", str(tmp_path / "a")])
    main(["sample", "--checkpoint", str(tmp_path / "g.ckpt"), "--n", "30", "--seed", "9", "--out", str(tmp_path / "b")])
    np.testing.assert_array_equal(read_samples_csv(tmp_path / "a" / "samples.csv")[0], read_samples_csv(tmp_path / "b" / "samples.csv")[0])


def test_eval_identical_files_and_oracle(tmp_path, tiny_config):
    x = np.random.default_rng(0).standard_normal((100, 2))
    write_samples_csv(tmp_path / "a.csv", x, 0, "test")
    write_samples_csv(tmp_path / "b.csv", x, 0, "test")
    assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(tmp_path / "e")]) == 0
    rows = (tmp_path / "e" / "eval.csv").read_text().splitlines()
    head = rows[0].split(",")
    values = dict(zip(head, rows[1].split(",")))
    assert float(values["sliced_w2"]) <= 1e-9 and float(values["energy"]) <= 1e-9

    assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--config", tiny_config, "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "eval.csv").read_text().splitlines()
    assert len(rows) == 3 and all(",oracle," in r for r in rows[1:])


def test_eval_reports_bad_line_number(tmp_path, capsys):
    write_samples_csv(tmp_path / "a.csv", np.zeros((3, 2)), 0, "test")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    lines[3] = "0.5,oops"
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "bad.csv")]) == 1
    assert "line 4" in capsys.readouterr().err


def test_eval_refuses_dimension_mismatch(tmp_path, capsys):
    write_samples_csv(tmp_path / "a.csv", np.zeros((3, 2)), 0, "test")
    write_samples_csv(tmp_path / "b.csv", np.zeros((3, 3)), 0, "test")
    assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 1
    assert "dimension mismatch" in capsys.readouterr().err


def test_verify_tiny_n_reports_and_writes_json(tiny_config, tmp_path, capsys):
    code = main(["verify", "--config", tiny_config, "--n", "100", "--out", str(tmp_path / "v")])
    assert code in (0, 3)
    report = json.loads((tmp_path / "v" / "verify_report.json").read_text())
    assert report["n"] == 100 and len(report["checks"]) == 5
    assert (code == 0) == report["passed"]
    assert "checks passed" in capsys.readouterr().out


def test_verify_failure_exit_code(tiny_config, tmp_path, monkeypatch):
    import flowdistill.cli as cli

    class Failing:
        passed = False
        name = "x"
        n = 10
        config = {"generator": 0, "t": 0.5}
        lhs = rhs = z_scores = np.zeros(1)

        def to_dict(self):
            return {}

    monkeypatch.setattr(cli, "verify_suite", lambda cfg, n=None: [Failing()])
    assert main(["verify", "--config", tiny_config]) == 3


def test_config_errors_exit_1(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"pretrain": {"steps": "many", "bogus": 1}}))
    assert main(["pretrain", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    assert "pretrain.bogus" in capsys.readouterr().err
    assert main(["pretrain", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1


def test_preset_names_resolve(tmp_path):
    cfg = preset_config("single-gauss")
    assert cfg.target().n_components == 1
