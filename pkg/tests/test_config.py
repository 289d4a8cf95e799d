import pytest

from vmudiff.config import MODEL_KEYS, RunConfig, load_config, parse_config_text


def test_defaults_follow_desk_scale():
    c = RunConfig()
    assert (c.n_in, c.m_out, c.h, c.w) == (5, 5, 32, 32)
    assert c.alpha == 0.7 and c.T == 1000 and c.ddim_steps == 50
    assert c.msfusion and c.stdiff and c.warmup_frac == 0.0


def test_parse_and_override(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 9  # comment\n\nalpha=0.5\n"
                 "msfusion = off\nout = some/dir\n")
    c = load_config(p, alpha=0.25, iters=None)
    assert c.seed == 9 and c.alpha == 0.25 and not c.msfusion and c.out == "some/dir"
    assert c.iters == RunConfig().iters


@pytest.mark.parametrize("text", ["bogus = 1", "seed 3", "msfusion = maybe", "iters = many"])
def test_parse_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


@pytest.mark.parametrize("kw", [{"alpha": 1.5}, {"iters": 0}, {"ddim_steps": 2000}, {"lr": 0.0}, {"count": 0}])
def test_invariants(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_text_round_trip():
    c = RunConfig(seed=4, lr=3e-4, msfusion=False)
    back = RunConfig(**parse_config_text(c.to_text()))
    assert back == c
    layout = parse_config_text(c.to_text(MODEL_KEYS))
    assert set(layout) == set(MODEL_KEYS)


def test_derived_model_configs():
    c = RunConfig(h=16, w=16, levels=2, base_width=4)
    assert c.vmu().bottleneck_shape == (8, 8, 8)
    d = c.diffusion()
    assert (d.fused_channels, d.fused_h, d.mu_stride) == (8, 8, 2)
