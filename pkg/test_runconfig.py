import pytest

from backend.errors import ConfigError
from backend.runconfig import RunConfig


def test_defaults():
    cfg = RunConfig()
    assert cfg.latent_dim == 24 and cfg.denoiser_layers == 4
    assert (cfg.T_train, cfg.T_sample, cfg.T_sample_uncond) == (100, 50, 10)
    assert cfg.p_drop == 0.1 and cfg.alpha_kl == 0.1


def test_every_field_has_provenance():
    described = RunConfig.describe()
    assert described["latent_dim"].startswith("[METHOD]")
    assert described["w"].startswith("[DESIGN]")
    assert set(described) == set(RunConfig().to_dict())


def test_load_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# small run\nlatent_dim=8\nrepair = no\nschedule=linear\nw=1.5\n", encoding="utf-8")
    cfg = RunConfig.load(path)
    assert cfg.latent_dim == 8 and cfg.repair is False
    assert cfg.schedule == "linear" and cfg.w == 1.5


def test_dumped_config_loads_back(tmp_path):
    cfg = RunConfig(seed=3, tau=0.05, symmetric_contrastive=True)
    path = tmp_path / "run.cfg"
    path.write_text(cfg.dumps(), encoding="utf-8")
    assert RunConfig.load(path) == cfg


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("latent_dims=8\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="latent_dims"):
        RunConfig.load(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.cfg")


@pytest.mark.parametrize("values", [
    {"repair": "maybe"},
    {"latent_dim": "eight"},
    {"latent_dim": 2.5},
    {"T_sample": 200},
    {"uncond_mode": "sideways"},
    {"val_fraction": 0.6, "test_fraction": 0.5},
    {"denoiser_layers": 1},
])
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(values)


def test_overrides_skip_none():
    cfg = RunConfig().with_overrides(seed=9, w=None)
    assert cfg.seed == 9 and cfg.w == RunConfig().w


def test_stage_views_carry_values():
    cfg = RunConfig(T_train=40, T_sample=20, epochs_vae=3)
    assert cfg.diffusion().T_train == 40 and cfg.diffusion().T_sample == 20
    assert cfg.vae().epochs == 3
    assert cfg.metrics().samples_per_prompt == 5
