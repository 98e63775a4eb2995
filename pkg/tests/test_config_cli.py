import json

import pytest
import tomli

from wearlang import cli
from wearlang.config import ConfigError, load_run_config, parse_run_config

TINY = """\
seed = 4
name = "t"

[data]
classes = ["Run", "Walk"]
days_per_class = 3
test_days_per_class = 2

[model]
hidden_dim = 16
mlp_dim = 16
patch = [2, 240]
embed_dim = 8

[train]
steps = 3
batch_size = 2

[eval]
recall_k = [1, 2]
few_shot_sizes = [1, 2]
few_shot_seeds = 2

[ablation]
steps = 1
batch_size = 2
"""


def test_defaults_and_round_trip():
    cfg = parse_run_config("")
    assert cfg.train.caption_variant == "struct+sem" and cfg.captions.variants == ["struct+sem"]
    again = parse_run_config(cfg.to_toml())
    assert again.to_dict() == cfg.to_dict()
    tc = cfg.train_config()
    assert (tc.beta1, tc.beta2, tc.loss.tau) == (0.9, 0.95, 0.01)


def test_unknown_keys_rejected_with_line():
    with pytest.raises(ConfigError, match=r"cfg.toml:3: unknown key 'train.stepz'"):
        parse_run_config("seed = 1\n[train]\nstepz = 3\n", "cfg.toml")
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        parse_run_config("bogus = 1\n")


def test_invalid_class_name_reports_line():
    text = 'seed = 1\n[data]\nclasses = [\n  "Run",\n  "Jogging",\n]\n'
    with pytest.raises(ConfigError, match=r"c.toml:5: unknown activity class 'Jogging'"):
        parse_run_config(text, "c.toml")


def test_other_validation_errors():
    for bad in ('[train]\ncaption_variant = "stat"\n', '[captions]\nvariants = ["nope"]\n',
                '[model]\npreset = "XXL"\n', '[train]\nbatch_size = 1\n', 'name = "../x"\n',
                '[data]\nclasses = ["Run"]\n', "this is not toml"):
        with pytest.raises(ConfigError):
            parse_run_config(bad)


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv("SLM_SEED", "17")
    assert parse_run_config("").seed == 17
    assert parse_run_config("seed = 2").seed == 2
    assert parse_run_config("seed = 2", overrides={"seed": 9}).seed == 9
    monkeypatch.setenv("SLM_SEED", "abc")
    with pytest.raises(ConfigError):
        parse_run_config("")


def test_all_variants_shorthand():
    cfg = parse_run_config('[captions]\nvariants = ["all"]\n')
    assert len(cfg.captions.variants) == 7


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "nope.toml")


# --- command line -----------------------------------------------------------------

@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "c.toml").write_text(TINY)

    def go(*argv):
        return cli.main([argv[0], "-c", "c.toml", *argv[1:]])

    return go


def test_pipeline_end_to_end(run, tmp_path, capsys):
    root = tmp_path / "runs" / "t"
    assert run("gen-data") == 0
    assert "train: 6 days  Run=3  Walk=3" in capsys.readouterr().out
    assert run("gen-data") == 2  # refuses to overwrite
    assert "--force" in capsys.readouterr().err
    assert run("gen-data", "--force") == 0
    assert run("gen-captions") == 0
    assert run("train") == 0
    assert (root / "checkpoints" / "final.slmc").exists()
    assert (root / "logs" / "train_log.csv").read_text().count("\n") == 4
    assert run("train") == 2
    for task in ("zeroshot", "retrieval", "fewshot", "caption"):
        assert run("eval", task) == 0, task
    rep = json.loads((root / "reports" / "zeroshot_test.json").read_text())
    assert set(rep["metrics"]) == {"auroc", "macro_f1", "balanced_acc"}
    assert run("eval", "zeroshot", "--untrained") == 0
    assert (root / "reports" / "untrained_zeroshot_test.json").exists()
    assert run("caption", "--split", "train") == 0
    gen = (root / "reports" / "generated_train.jsonl").read_text().splitlines()
    assert len(gen) == 6 and {"generated", "reference", "exact"} <= set(json.loads(gen[0]))
    archived = tomli.loads((root / "config.toml").read_text())
    assert archived["seed"] == 4 and archived["data"]["classes"] == ["Run", "Walk"]


def test_resume_and_overrides(run, tmp_path):
    root = tmp_path / "runs" / "t"
    assert run("gen-data") == 0 and run("gen-captions") == 0
    assert run("train", "--stop-at", "1") == 0
    assert run("train", "--resume") == 0
    resumed = (root / "checkpoints" / "final.slmc").read_bytes()
    lines = (root / "logs" / "train_log.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2", "3"]
    assert run("train", "--force") == 0
    assert (root / "checkpoints" / "final.slmc").read_bytes() == resumed
    assert run("train", "--force", "--set", "train.steps=2") == 0
    assert tomli.loads((root / "config.toml").read_text())["train"]["steps"] == 2


def test_failures_exit_nonzero(run, tmp_path, capsys):
    assert run("gen-captions") == 2
    assert "gen-data first" in capsys.readouterr().err
    assert run("eval", "zeroshot") == 2
    (tmp_path / "bad.toml").write_text('[data]\nclasses = ["Run", "Nope"]\n')
    assert cli.main(["gen-data", "-c", "bad.toml"]) == 2
    assert "bad.toml:2" in capsys.readouterr().err
    assert cli.main(["gen-data", "--set", "nokey"]) == 2


def test_ablate_small_grid(run, tmp_path):
    assert run("gen-data") == 0
    assert run("ablate") == 0
    text = (tmp_path / "runs" / "t" / "reports" / "ablation.txt").read_text()
    assert text.count(" ok") == 10
    assert run("ablate") == 2
