import json
import struct

import numpy as np
import pytest

from flowdistill.checkpoint import MAGIC, Checkpoint, CheckpointError, checkpoint_for, load_checkpoint, load_model
from flowdistill.config import PRESETS, ConfigError, ExperimentConfig, from_dict, load_config, loads, preset_config
from flowdistill.fgm import init_generator
from flowdistill.nets import TimeDistribution, VectorFieldNet


@pytest.mark.parametrize("name", PRESETS)
def test_preset_round_trip_is_a_fixpoint(name):
    cfg = preset_config(name)
    text = cfg.dumps()
    again = loads(text)
    assert again.dumps() == text
    assert again.digest() == cfg.digest()
    assert again.target().dim == 2


def test_file_round_trip(tmp_path):
    cfg = preset_config("ring8").with_seed(17)
    cfg.save(tmp_path / "c.json")
    loaded = load_config(tmp_path / "c.json")
    assert loaded.seed == 17 and loaded.pretrain.seed == 17 and loaded.distill.seed == 17
    assert loaded.to_dict() == cfg.to_dict()


def test_digest_changes_with_content():
    a = preset_config("ring8")
    assert a.digest() != a.with_seed(1).digest()
    assert len(a.digest()) == 16


def test_time_distributions_are_parsed():
    cfg = from_dict({"distill": {"fgm_time": {"kind": "logit_normal", "loc": 2.4, "scale": 1.0}}})
    assert isinstance(cfg.distill.fgm_time, TimeDistribution) and cfg.distill.fgm_time.loc == 2.4
    assert loads(cfg.dumps()).distill.fgm_time == cfg.distill.fgm_time


def test_explicit_mixture():
    cfg = from_dict({"mixture": {"weights": [1.0], "means": [[0.0, 1.0]], "variances": [[0.5, 0.5]]}})
    np.testing.assert_array_equal(cfg.target().means, [[0.0, 1.0]])


@pytest.mark.parametrize(
    "data,path",
    [
        ({"pretrain": {"stepz": 3}}, "pretrain.stepz"),
        ({"colour": 1}, "colour"),
        ({"distill": {"lr_gen": -1.0}}, "distill"),
        ({"distill": {"fgm_time": {"kind": "beta"}}}, "distill.fgm_time"),
        ({"seed": -4}, "seed"),
        ({"mixture": {"preset": "spiral"}}, "mixture"),
        ({"network": []}, "network"),
        ({"verify": {"fd_step": 0.0}}, "verify"),
    ],
)
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as err:
        from_dict(data)
    assert err.value.path == path
    assert str(err.value).startswith(path)


def test_malformed_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="JSON"):
        loads("{not json")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        preset_config("nope")


def test_shipped_configs_match_presets():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in PRESETS:
        assert load_config(root / f"{name}.json").to_dict() == preset_config(name).to_dict()


# -- checkpoints -----------------------------------------------------------------------


def net(seed=0):
    return VectorFieldNet(2, hidden=(8, 8), n_freq=2).init(np.random.default_rng(seed), zero_final=False)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    teacher, ema = net(0), net(1)
    ckpt = checkpoint_for(teacher, "teacher", ema=ema, step=12, config_hash="abc")
    ckpt.save(tmp_path / "t.ckpt")
    loaded = load_checkpoint(tmp_path / "t.ckpt")
    assert loaded.to_bytes() == ckpt.to_bytes() == (tmp_path / "t.ckpt").read_bytes()
    np.testing.assert_array_equal(load_model(loaded).get_flat(), ema.get_flat())
    np.testing.assert_array_equal(load_model(loaded, use_ema=False).get_flat(), teacher.get_flat())
    assert loaded.step == 12 and loaded.config_hash == "abc"


def test_generator_checkpoint_keeps_constants():
    gen = init_generator(net(2), t_star=0.9, c_in=0.8)
    back = load_model(Checkpoint.from_bytes(checkpoint_for(gen, "generator").to_bytes()))
    z = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(back(z), gen(z))
    assert back.constants() == gen.constants()


def test_layout_matches_documented_format():
    blob = checkpoint_for(net(), "online-flow").to_bytes()
    assert blob[:8] == MAGIC
    (size,) = struct.unpack("<Q", blob[8:16])
    head = json.loads(blob[16 : 16 + size])
    assert head["kind"] == "online-flow"
    assert len(blob) == 16 + size + 8 * head["arrays"][0]["size"]
    np.testing.assert_array_equal(np.frombuffer(blob[16 + size :], dtype="<f8"), net().get_flat())


def test_architecture_mismatch_is_refused():
    ckpt = checkpoint_for(net(), "teacher")
    other = VectorFieldNet(2, hidden=(16,), n_freq=2).arch()
    with pytest.raises(CheckpointError, match="architecture mismatch"):
        load_model(ckpt, expected_arch=other)
    assert load_model(ckpt, expected_arch=net().arch()).n_params == net().n_params


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"NOTACKPT" + b[8:], "magic"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x00" * 8, "trailing"),
        (lambda b: b[:12], "truncated"),
        (lambda b: b[:16] + b"\xff" + b[17:], "corrupt"),
    ],
)
def test_corrupt_checkpoints_are_rejected(mutate, match):
    blob = checkpoint_for(net(), "teacher").to_bytes()
    with pytest.raises(CheckpointError, match=match):
        Checkpoint.from_bytes(mutate(blob))


def test_bad_kind_and_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint("student", {}, np.zeros(1))
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "none.ckpt")


def test_version_is_checked():
    blob = checkpoint_for(net(), "teacher").to_bytes()
    (size,) = struct.unpack("<Q", blob[8:16])
    head = json.loads(blob[16 : 16 + size])
    head["version"] = 99
    new = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(MAGIC + struct.pack("<Q", len(new)) + new + blob[16 + size :])


def test_experiment_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.mixture == {"preset": "ring8"} and cfg.distill.betas == (0.0, 0.999)
