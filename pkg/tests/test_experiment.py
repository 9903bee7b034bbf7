import json
import re
from fractions import Fraction

import pytest

from irbaf import cli
from irbaf.experiment import (
    ENV_OUTPUT,
    ExperimentConfig,
    PipelineError,
    boxplot_data,
    load_config,
    load_records,
    run_pipeline,
    save_config,
    summarize,
    write_summary,
)
from irbaf.metrics import MetricsReport
from irbaf.seg_train import ExperimentRecord

LABEL = re.compile(r"^(0|[1-9]\d*0)-(r|\d+)$")


def _rec(miou, seed=0, group="random-10", label="10-r"):
    rep = MetricsReport({1: miou, 2: miou}, {1: miou, 2: miou}, miou, miou, 100)
    return ExperimentRecord({"blend": "random"}, label, seed, [1.0], rep, 0.0, {"group": group})


def test_summarize_range_and_mean():
    rows = summarize([_rec(0.55, 0), _rec(0.56, 1), _rec(0.57, 2)])
    assert len(rows) == 1
    assert rows[0]["mean_miou"] == pytest.approx(0.56)
    assert rows[0]["stability"] == pytest.approx(0.02)
    assert rows[0]["runs"] == 3


def test_summarize_single_and_groups():
    rows = summarize([_rec(0.4, group="a"), _rec(0.6, group="b"), _rec(0.8, 1, group="b")])
    by = {r["config"]: r for r in rows}
    assert by["a"]["stability"] == 0.0 and by["a"]["std_miou"] == 0.0
    assert by["b"]["mean_miou"] == pytest.approx(0.7)
    with pytest.raises(ValueError):
        summarize([])


def test_summarize_is_pure():
    recs = [_rec(0.3, 0), _rec(0.9, 1)]
    before = [r.to_dict() for r in recs]
    assert summarize(recs) == summarize(recs)
    assert [r.to_dict() for r in recs] == before


def test_boxplot_rows_sorted():
    box = boxplot_data([_rec(0.2, 2), _rec(0.1, 0, group="a")])
    assert [(b["config"], b["seed"]) for b in box] == [("a", 0), ("random-10", 2)]


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(source=str(tmp_path / "s"), target=str(tmp_path / "t"), output=str(tmp_path / "o"))
    cfg.use_fourier_swap, cfg.blend, cfg.blend_total = True, "random", 20
    cfg.train.epochs, cfg.train.widths, cfg.swap.window_fraction = 3, (4, 8, 16), 0.05
    save_config(cfg, tmp_path / "exp.ini")
    assert load_config(tmp_path / "exp.ini").to_dict() == cfg.to_dict()


def test_config_relative_paths_and_defaults(tmp_path):
    (tmp_path / "exp.ini").write_text("[experiment]\nsource = d/s\ntarget = d/t\nrepeats = 2\nblend = none\n")
    cfg = load_config(tmp_path / "exp.ini")
    assert cfg.source == str(tmp_path / "d" / "s")
    assert cfg.seeds == [0, 1]
    assert cfg.train.learning_rate == 5e-3 and cfg.train.batch_size == 4


@pytest.mark.parametrize(
    "body",
    [
        "[experiment]\nschema = 9\n",
        "[experiment]\nblend = sometimes\n",
        "[experiment]\nrepeats = 2\nseeds = 1,2,3\n",
        "[experiment]\nblend_total = 15\n",
    ],
)
def test_config_rejected(tmp_path, body):
    (tmp_path / "exp.ini").write_text(body)
    with pytest.raises(ValueError):
        load_config(tmp_path / "exp.ini")


def _fast_config(pipe_data, out, **kw):
    source, target = pipe_data
    cfg = ExperimentConfig(source=str(source.root), target=str(target.root), output=str(out))
    cfg.train.epochs, cfg.train.input_size = 1, 32
    cfg.style.iterations, cfg.style.crop_size, cfg.style.hidden, cfg.style.batch_size = 2, 16, 8, 2
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def test_random_blend_gives_three_labelled_records(pipe_data, tmp_path):
    cfg = _fast_config(pipe_data, tmp_path, blend="random", repeats=3, seeds=[0, 1, 2])
    recs = run_pipeline(cfg)
    assert [r.label for r in recs] == ["10-r"] * 3
    assert len(list((tmp_path / "records").glob("*.json"))) == 3
    assert json.loads((tmp_path / "stages.json").read_text())[0]["stage"] == "blend_training"
    for r in recs:
        assert r.extra["split"]["test_count"] == len(pipe_data[1].entries) - 10


def test_irb_records_and_label_grammar(pipe_data, tmp_path):
    cfg = _fast_config(pipe_data, tmp_path, blend="irb", repeats=1, seeds=[4], max_irb_iterations=3)
    (rec,) = run_pipeline(cfg)
    assert LABEL.match(rec.label)
    hist = rec.extra["irb"]["history"]
    assert 1 <= len(hist) <= 3
    best = max(range(len(hist)), key=lambda i: Fraction(hist[i]["report"]["miou"]))
    assert rec.label == hist[best]["plan"]["label"]
    loaded = load_records(tmp_path / "records")
    assert loaded[0].to_dict() == rec.to_dict()


def test_no_blend_label(pipe_data, tmp_path):
    cfg = _fast_config(pipe_data, tmp_path, blend="none", repeats=1, seeds=[0])
    (rec,) = run_pipeline(cfg)
    assert rec.label == "0-r" and LABEL.match(rec.label)
    assert rec.extra["split"]["test_count"] == len(pipe_data[1].entries)


def test_stage_order_with_all_stages(pipe_data, tmp_path):
    cfg = _fast_config(pipe_data, tmp_path, blend="random", repeats=1, seeds=[0])
    cfg.use_style_transfer = cfg.use_fourier_swap = True
    (rec,) = run_pipeline(cfg)
    stages = json.loads((tmp_path / "stages.json").read_text())
    assert [s["stage"] for s in stages] == ["style_transfer", "fourier_swap", "blend_training"]
    for a, b in zip(stages, stages[1:]):
        assert a["finished_ns"] <= b["started_ns"]
    assert rec.extra["group"] == "random-10+st+fda"


def test_stage_failure_names_stage_and_seed(pipe_data, tmp_path):
    cfg = _fast_config(pipe_data, tmp_path, blend="random", repeats=1, seeds=[7], blend_total=200)
    with pytest.raises(PipelineError, match=r"blend_training.*seed 7"):
        run_pipeline(cfg)


def test_write_summary_files(tmp_path):
    write_summary([_rec(0.5, 0), _rec(0.7, 1)], tmp_path)
    assert (tmp_path / "summary.csv").read_text().startswith("config,")
    assert json.loads((tmp_path / "summary.json").read_text())[0]["runs"] == 2
    assert len((tmp_path / "boxplot.csv").read_text().splitlines()) == 3


# --------------------------------------------------------------------------- command line


def test_cli_gen_data_and_fda(tmp_path, capsys):
    data = tmp_path / "data"
    args = ["gen-data", "--out", str(data), "--size", "32", "--source-counts", "1:3,2:3,3:3"]
    assert cli.main(args + ["--target-counts", "1:2,2:2,3:2"]) == 0
    assert (data / "source" / "manifest.json").exists()
    fda = ["fda", "apply", "--source", str(data / "source"), "--target", str(data / "target")]
    assert cli.main(fda + ["--out", str(tmp_path / "fda")]) == 0
    assert "swapped" in capsys.readouterr().out


def test_cli_style_train_and_apply(pipe_data, tmp_path):
    source, target = pipe_data
    common = ["--source", str(source.root), "--target", str(target.root)]
    assert cli.main(["style", "train", *common, "--out", str(tmp_path / "st"), "--iterations", "2", "--crop", "16"]) == 0
    ckpt = tmp_path / "st" / "flow.pt"
    assert ckpt.exists() and (tmp_path / "st" / "losses.csv").exists()
    assert cli.main(["style", "apply", "--checkpoint", str(ckpt), *common, "--out", str(tmp_path / "sty")]) == 0
    assert (tmp_path / "sty" / "manifest.json").exists()


def test_cli_train_irb_and_report(pipe_data, tmp_path, capsys):
    cfg = _fast_config(pipe_data, tmp_path / "irb", blend="irb", repeats=1, seeds=[0], max_irb_iterations=2)
    save_config(cfg, tmp_path / "exp.ini")
    assert cli.main(["irb", "run", "--config", str(tmp_path / "exp.ini")]) == 0
    source, target = pipe_data
    train = ["train", "--config", str(tmp_path / "exp.ini"), "--source", str(source.root), "--target", str(target.root)]
    assert cli.main([*train, "--out", str(tmp_path / "irb"), "--blend-total", "10", "--epochs", "1"]) == 0
    capsys.readouterr()
    assert cli.main(["report", "--out", str(tmp_path / "irb"), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert {r["config"] for r in rows} == {"irb-10", "random-10"}
    assert (tmp_path / "irb" / "summary.csv").exists()


def test_cli_env_output_override(pipe_data, tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_OUTPUT, str(tmp_path / "env"))
    assert cli.main(["gen-data", "--out", str(tmp_path / "ignored"), "--size", "16", "--source-counts", "1:1"]) == 0
    assert (tmp_path / "env" / "source" / "manifest.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == 1
    assert cli.main(["irb", "run", "--config", str(tmp_path / "missing.ini")]) == 1
    assert "error" in capsys.readouterr().err
