from dataclasses import replace

import pytest

from lowcal.batching import MiscalibRange
from lowcal.config import RunConfig, load_scene_config, parse_run_config, run_config_to_text
from lowcal.depth_image import InterpolationMethod
from lowcal.io import ConfigError


def test_sections_and_bare_keys():
    run = parse_run_config(
        """
        # comment
        epochs = 3
        range = 20/2
        scl_enabled = yes
        batch_size = 2
        interpolation = nearest
        network.max_disp = 3
        weights.cloud = 0.25
        scl.temperature = 0.5
        scene.channels = 8
        train.lr = 0.01
        val_scenes = 5
        """
    )
    t = run.train
    assert (t.epochs, t.range, t.scl_enabled, t.batch_size) == (3, MiscalibRange(20, 2), True, 2)
    assert t.interpolation is InterpolationMethod.NEAREST
    assert (t.network.max_disp, t.weights.cloud, t.scl.temperature, t.lr) == (3, 0.25, 0.5, 0.01)
    assert run.scene.channels == 8 and run.val_scenes == 5


@pytest.mark.parametrize(
    "text, line, what",
    [
        ("epochs = 2\nfoo = 1\n", 2, "unknown key"),
        ("\n\nepochs = many\n", 3, "bad value"),
        ("network.nope = 1\n", 1, "unknown key"),
        ("bogus.x = 1\n", 1, "unknown section"),
        ("scl_enabled = maybe\n", 1, "bad value"),
        ("epochs = 0\n", 1, "epochs"),
        ("epochs 3\n", 1, ""),
    ],
)
def test_errors_name_the_line(text, line, what):
    with pytest.raises(ConfigError, match=f"cfg:{line}: .*{what}"):
        parse_run_config(text, "cfg")


def test_text_round_trip():
    base = RunConfig()
    run = replace(
        base,
        val_scenes=3,
        grid="2,4",
        scene=replace(base.scene, channels=16, num_boxes=2, box_distance=(1.5, 4.0)),
        train=replace(base.train, lr=0.002, lr_schedule="cosine", scl_enabled=True, range=MiscalibRange(20, 2)),
    )
    text = run_config_to_text(run)
    assert parse_run_config(text) == run
    assert run_config_to_text(RunConfig()) == ""


def test_seed_override():
    run = RunConfig().with_seed(11)
    assert run.train.seed == 11 and run.eval_seed == 11
    assert RunConfig().with_seed(None) == RunConfig()


def test_scene_file_accepts_prefixed_keys(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("channels = 16\nscene.seed = 4\n")
    cfg = load_scene_config(p)
    assert (cfg.channels, cfg.seed) == (16, 4)
    p.write_text("channels = 0\n")
    with pytest.raises(ConfigError, match="s.cfg:1"):
        load_scene_config(p)
