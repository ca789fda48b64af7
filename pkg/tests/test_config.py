import configparser

import pytest

from htdn.config import EmbedConfig, RunConfig, config_summary, load_run_config
from htdn.errors import ConfigError


class TestDefaults:
    def test_bare_call_gives_reduced_preset(self):
        cfg = load_run_config()
        assert cfg.profile == "reduced"
        assert cfg.seed == 0
        assert cfg.data.image_size == 64
        assert cfg.language.hidden_dim == 300
        assert cfg.embed.dim == cfg.language.embed_dim == 100

    def test_light_preset_shrinks_everything(self):
        cfg = load_run_config(profile="light")
        assert cfg.data.image_size == 24
        assert cfg.language.hidden_dim == 48
        assert cfg.embed.dim == cfg.language.embed_dim == 32

    def test_full_preset_has_published_dims(self):
        cfg = load_run_config(profile="full")
        assert cfg.data.image_size == 224
        assert cfg.language.hidden_dim == 300
        assert cfg.decision.channels == (8, 16)
        assert cfg.decision.fc_width == 150

    def test_data_seed_follows_run_seed(self):
        cfg = load_run_config(overrides={"seed": 42})
        assert cfg.seed == 42
        assert cfg.data.seed == 42

    def test_explicit_data_seed_survives(self, tmp_path):
        ini = tmp_path / "r.ini"
        ini.write_text("[run]\nseed = 1\n\n[data]\nseed = 9\n")
        cfg = load_run_config(ini)
        assert cfg.seed == 1
        assert cfg.data.seed == 9


class TestLayering:
    def test_file_overrides_preset(self, tmp_path):
        ini = tmp_path / "r.ini"
        ini.write_text("[run]\nprofile = light\n\n[data]\nads = 77\n\n"
                       "[joint]\nepochs = 3\n")
        cfg = load_run_config(ini)
        assert cfg.profile == "light"
        assert cfg.data.ads == 77
        assert cfg.joint.epochs == 3
        # untouched preset fields survive
        assert cfg.data.image_size == 24

    def test_flag_overrides_file(self, tmp_path):
        ini = tmp_path / "r.ini"
        ini.write_text("[run]\nseed = 3\n\n[data]\nads = 77\n")
        cfg = load_run_config(ini, overrides={"seed": 11, "data.ads": 5})
        assert cfg.seed == 11
        assert cfg.data.ads == 5

    def test_profile_flag_beats_file_profile(self, tmp_path):
        ini = tmp_path / "r.ini"
        ini.write_text("[run]\nprofile = light\n")
        cfg = load_run_config(ini, profile="reduced")
        assert cfg.profile == "reduced"
        assert cfg.data.image_size == 64

    def test_embed_dim_propagates_to_language(self, tmp_path):
        ini = tmp_path / "r.ini"
        ini.write_text("[embeddings]\ndim = 48\n")
        cfg = load_run_config(ini)
        assert cfg.language.embed_dim == 48

    def test_channels_parse(self, tmp_path):
        ini = tmp_path / "r.ini"
        ini.write_text("[decision]\nchannels = 4, 8\n")
        cfg = load_run_config(ini)
        assert cfg.decision.channels == (4, 8)


class TestRejection:
    @pytest.mark.parametrize("body,fragment", [
        ("[mystery]\nx = 1\n", "unknown section"),
        ("[run]\nwidth = 3\n", "unknown key"),
        ("[data]\nads = lots\n", "bad value"),
        ("[decision]\nchannels = a,b\n", "comma-separated"),
        ("[run]\nval_fraction = 0.9\n", "val_fraction"),
        ("[data]\nads = -5\n", None),
    ])
    def test_bad_files(self, tmp_path, body, fragment):
        ini = tmp_path / "r.ini"
        ini.write_text(body)
        with pytest.raises(ConfigError, match=fragment):
            load_run_config(ini)

    def test_unknown_profile(self):
        with pytest.raises(ConfigError, match="unknown profile"):
            load_run_config(profile="enormous")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_run_config(tmp_path / "absent.ini")

    def test_malformed_ini(self, tmp_path):
        ini = tmp_path / "r.ini"
        ini.write_text("seed = 3 without a section\n")
        with pytest.raises(ConfigError):
            load_run_config(ini)

    def test_embed_config_validates(self):
        with pytest.raises(ConfigError, match="dim"):
            EmbedConfig(dim=0).validate()

    def test_language_embed_dim_is_derived(self):
        cfg = RunConfig()
        cfg.language.embed_dim = 64
        with pytest.raises(ConfigError, match="embeddings.dim"):
            cfg.validate()


class TestSummary:
    def test_echo_parses_and_roundtrips(self, tmp_path):
        cfg = load_run_config(profile="light", overrides={"seed": 7, "data.ads": 33})
        text = config_summary(cfg)
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        assert parser.get("run", "profile") == "light"
        assert parser.getint("run", "seed") == 7
        assert parser.getint("data", "ads") == 33

        # feeding the echo back reproduces the configuration
        ini = tmp_path / "echo.ini"
        ini.write_text(text)
        again = load_run_config(ini)
        assert again == cfg
