import pytest

from worldground import config as C
from worldground.errors import ConfigError


def test_empty_text_gives_defaults():
    cfg = C.parse_config_text("")
    assert cfg["hyperedge_k"] == 6
    assert cfg["model.dim"] == 64
    assert cfg["train.stage1_epochs"] == 15
    assert cfg["train.stage2_epochs"] == 40
    assert cfg["loss.lambda_reg"] == 5.0


def test_file_overrides_and_comments(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment line\nhyperedge_k = 4\n"
                 "model.scalar_prior = true  # trailing\n\n"
                 "loss.alpha = 0.25\n")
    cfg = C.load_config(p)
    assert cfg["hyperedge_k"] == 4
    assert cfg["model.scalar_prior"] is True
    assert cfg["loss.alpha"] == 0.25
    # untouched keys keep defaults
    assert cfg["model.mld_blocks"] == 6


def test_unknown_keys_rejected_listing_all_offenders():
    with pytest.raises(ConfigError) as err:
        C.parse_config_text("bogus.key = 1\nmodel.dim = 64\nzz = 2\n")
    msg = str(err.value)
    assert "bogus.key" in msg and "zz" in msg


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="expected int"):
        C.parse_config_text("model.dim = sixty")
    with pytest.raises(ConfigError, match="boolean"):
        C.parse_config_text("model.scalar_prior = maybe")


def test_validation_catches_bad_values():
    with pytest.raises(ConfigError):
        C.parse_config_text("loss.epsilon = -1")
    with pytest.raises(ConfigError):
        C.parse_config_text("eval.iou_threshold = 1.5")
    with pytest.raises(ConfigError):
        C.parse_config_text("data.min_objects = 9")  # > max_objects


def test_unknown_key_lookup_raises():
    cfg = C.load_config(None)
    with pytest.raises(ConfigError):
        cfg["no.such.key"]


def test_overridden_returns_new_config():
    cfg = C.load_config(None)
    cfg2 = cfg.overridden(train__stage1_epochs=2, hyperedge_k=2)
    assert cfg2["train.stage1_epochs"] == 2
    assert cfg2["hyperedge_k"] == 2
    assert cfg["train.stage1_epochs"] == 15  # original untouched


def test_dump_lines_cover_every_key_with_source_tag():
    cfg = C.load_config(None)
    lines = cfg.dump_lines()
    assert len(lines) == len(C.DEFAULTS)
    for line in lines:
        key = line.split(" = ")[0]
        assert key in C.DEFAULTS
        assert line.endswith("# reference") or line.endswith("# chosen")
    # both tags are actually in use
    tags = {line.rsplit("# ", 1)[1] for line in lines}
    assert tags == {"reference", "chosen"}


def test_text_dim_must_equal_dim():
    with pytest.raises(ConfigError):
        C.parse_config_text("model.text_dim = 32")
