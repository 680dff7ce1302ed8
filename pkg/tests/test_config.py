import pytest

from mitilab.attention import WiringMode
from mitilab.config import DEFAULTS, ConfigError, load_config, parse_config


def test_defaults_build_every_sub_config():
    cfg = parse_config("")
    assert cfg.model.wiring is WiringMode.MITI_RESIDUAL
    assert cfg.training.epochs == DEFAULTS["epochs"][0]
    assert cfg.collapse.depth == 12
    assert cfg.wirings == list(WiringMode)


def test_comments_blank_lines_and_types():
    cfg = parse_config("# header\n\nlr = 0.002  # faster\npositional = off\nepochs=3\n")
    assert cfg["lr"] == 0.002 and cfg["positional"] is False and cfg["epochs"] == 3


def test_overrides_win_and_none_is_skipped():
    cfg = parse_config("seed = 3\n", overrides={"seed": 7, "wiring": None})
    assert cfg["seed"] == 7 and cfg["wiring"] == DEFAULTS["wiring"][0]


@pytest.mark.parametrize("text, fragment", [
    ("nonsense\n", "<config>:1"),
    ("lr = 1e-3\nbogus = 1\n", "unknown key 'bogus'"),
    ("epochs = three\n", "epochs expects int"),
    ("lr = nan\n", "lr expects float"),
    ("positional = maybe\n", "positional expects bool"),
    ("wiring = Dense\n", "PureSAN"),
    ("gradcheck_step = 1e-3\n", "gradcheck_step"),
    ("gradcheck_step = 1e-9\n", "gradcheck_step"),
    ("max_objects = 20\n", "num_queries"),
    ("probe_input_residual = 1.5\n", "probe_input_residual"),
    ("d_v = 15\n", "d_model"),
])
def test_bad_settings_are_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_step_bounds_are_inclusive():
    assert parse_config("gradcheck_step = 1e-8\n")["gradcheck_step"] == 1e-8
    assert parse_config("gradcheck_step = 1e-4\n")["gradcheck_step"] == 1e-4


def test_to_text_round_trips(tmp_path):
    cfg = parse_config("lr = 0.003\nwiring = PureSAN\n")
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    assert load_config(path).values == cfg.values


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.txt")
