import pytest

from metaopt import config as cfg


def test_defaults_per_task(tmp_path):
    toy = cfg.resolve({}, environ={})
    assert toy.task == "toy" and toy.seeds == (0, 1, 2)
    assert (toy.start_len, toy.end_len, toy.ramp_iters) == (10, 40, 1000)
    assert toy.sigma == 0.01 and toy.pairs_per_batch == 16 and toy.mode == "sync"
    gauss = cfg.resolve({"task": "gaussian", "data_dir": str(tmp_path)}, environ={})
    assert gauss.seeds == (0, 1, 2)
    assert (gauss.start_len, gauss.end_len, gauss.ramp_iters, gauss.jitter_frac) == (100, 10_000, 5_000, 0.2)
    assert gauss.outer_lr == 1e-3 and gauss.batch_size == 64
    corr = cfg.resolve({"task": "corruption", "data_dir": str(tmp_path)}, environ={})
    assert corr.seeds == (0, 1, 2, 3)


def test_precedence_cli_file_env_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nsigma = 0.02  # trailing\nouter_iters = 50\npairs_per_batch = 4\n")
    env = {"METAOPT_SIGMA": "0.05", "METAOPT_OUTER_ITERS": "70", "METAOPT_EVAL_EVERY": "3", "METAOPT_PAIRS_PER_BATCH": "8"}
    c = cfg.resolve({"sigma": 0.07}, path, env)
    assert c.sigma == 0.07  # CLI
    assert c.outer_iters == 50 and c.pairs_per_batch == 4  # file beats env
    assert c.eval_every == 3  # env beats default
    assert c.ramp_iters == 1000  # default


def test_task_from_file_selects_defaults(tmp_path):
    (tmp_path / "c.cfg").write_text(f"task = corruption\ndata_dir = {tmp_path}\n")
    c = cfg.resolve({}, tmp_path / "c.cfg", {})
    assert c.task == "corruption" and c.seeds == (0, 1, 2, 3)


def test_data_dir_from_env(tmp_path):
    c = cfg.resolve({"task": "gaussian"}, environ={"METAOPT_DATA_DIR": str(tmp_path)})
    assert c.data_dir == str(tmp_path)


@pytest.mark.parametrize(
    "cli,match",
    [
        ({"task": "imagenet"}, "unknown task"),
        ({"task": "gaussian"}, "needs --data-dir"),
        ({"task": "gaussian", "data_dir": "/does/not/exist"}, "does not exist"),
        ({"severity_table": "/no/table.txt"}, "severity table"),
        ({"sigma": 0.0}, "sigma"),
        ({"mode": "fast"}, "mode"),
        ({"jitter_frac": 1.5}, "jitter"),
    ],
)
def test_validation_errors(cli, match):
    with pytest.raises(cfg.ConfigError, match=match):
        cfg.resolve(cli, environ={})


def test_malformed_file(tmp_path):
    (tmp_path / "a.cfg").write_text("sigma 0.1\n")
    with pytest.raises(cfg.ConfigError, match="expected 'key = value'"):
        cfg.resolve({}, tmp_path / "a.cfg", {})
    (tmp_path / "b.cfg").write_text("colour = red\n")
    with pytest.raises(cfg.ConfigError, match="unknown config key"):
        cfg.resolve({}, tmp_path / "b.cfg", {})
    (tmp_path / "c.cfg").write_text("outer_iters = many\n")
    with pytest.raises(cfg.ConfigError, match="bad value"):
        cfg.resolve({}, tmp_path / "c.cfg", {})
    with pytest.raises(cfg.ConfigError, match="not found"):
        cfg.resolve({}, tmp_path / "missing.cfg", {})


def test_resolved_text_round_trip(tmp_path):
    c = cfg.resolve({"seeds": (4, 9), "max_unroll_steps": None, "sigma": 0.013}, environ={})
    path = c.write(tmp_path)
    assert path.name == "resolved_config.txt"
    again = cfg.resolve({}, path, {})
    assert again == c
