import csv
import json

import pytest

from vladapt import cli
from vladapt.adaptations import KINDS
from vladapt.errors import TrainingDivergence
from vladapt.training import CurvePoint


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, command, name, **cfg):
    return cli.main([command, str(write_config(tmp_path / f"{name}.json", **cfg))])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic world plus a small pretrained checkpoint and imaginer, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert run(root, "synth", "synth", output_dir=str(root / "world"), seed=0,
               synth={"n_concepts": 6, "n_properties": 6, "caption_samples": 120, "dev_samples": 30,
                      "detections": 1, "visual_dim": 8, "image_size": [4, 4]}) == 0
    data = root / "world" / "data"
    visual = {"cap": {"records": str(data / "records.train.jsonl"), "features": str(data / "features.jsonl")},
              "capdev": {"records": str(data / "records.dev.jsonl"), "features": str(data / "features.jsonl")}}
    assert run(root, "pretrain", "pretrain", output_dir=str(root / "pre"), vocab_size=120,
               model={"hidden": 16, "heads": 2, "text_layers": 1, "detections": 1, "visual_dim": 8},
               data={"visual_datasets": visual},
               pretrain={"visual_dataset": "cap", "dev_visual_dataset": "capdev", "imaginer_steps": 20},
               train={"pretrain": {"lr": 1e-3, "optimizer": "adam", "max_steps": 20, "eval_every": 10}}) == 0
    return root, data, visual


def eval_config(root, data, visual, kind, out, **extra):
    adaptation = {"kind": kind, "corpus": "cap", "dev_corpus": "capdev", "backbone": "bb", "imaginer": "im",
                  "visual_dataset": "cap"}
    keep = {"no-visual-features-finetuned": ("corpus", "dev_corpus"), "finetuned-visual-features": ("corpus",),
            "zero-image-visual-features": ("backbone",), "imagined-visual-features": ("imaginer",),
            "avg-visual-features": ("visual_dataset",)}.get(kind, ())
    adaptation = {k: v for k, v in adaptation.items() if k == "kind" or k in keep}
    cfg = dict(output_dir=str(out), checkpoint=str(root / "pre" / "model.json"), adaptation=adaptation,
               data={"norms": str(data / "norms.csv"),
                     "corpora": {"cap": str(data / "captions.train.txt"), "capdev": str(data / "captions.dev.txt")},
                     "backbones": {"bb": str(data / "backbone.json")},
                     "imaginers": {"im": str(root / "pre" / "imaginer.json")},
                     "visual_datasets": visual},
               train={"finetune-text": {"lr": 1e-3, "optimizer": "adam", "max_steps": 3},
                      "tune-features": {"max_steps": 3}})
    cfg.update(extra)
    return cfg


def test_synth_outputs(workspace):
    root, data, _ = workspace
    result = json.loads((root / "world" / "result.json").read_text())
    assert (data / result["files"]["norms"].split("/", 1)[1]).exists()
    assert result["captions"]["train"]["tokens_per_sample"] < result["wiki"]["train"]["tokens_per_sample"]


def test_eval_vpn_zeroed_happy_path(workspace, tmp_path):
    root, data, visual = workspace
    out = tmp_path / "zeroed"
    code = run(tmp_path, "eval-vpn", "z", **eval_config(root, data, visual, "zeroed-visual-features", out))
    assert code == 0
    result = json.loads((out / "result.json").read_text())
    assert len(result["vpn"]["per_template_map"]) == 9
    assert 0 <= result["vpn"]["median"] <= 1
    assert result["visual"]["provider"] == "constant"
    assert not (out / ".lock").exists()


def test_missing_checkpoint_exit_1(workspace, tmp_path, capsys):
    root, data, visual = workspace
    cfg = eval_config(root, data, visual, "default", tmp_path / "x", checkpoint=str(tmp_path / "absent.ckpt"))
    assert run(tmp_path, "eval-vpn", "bad", **cfg) == 1
    assert "absent.ckpt" in capsys.readouterr().err


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c.update(tasks="all"), "tasks"),
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c["adaptation"].update(kind="blurred"), "adaptation"),
    (lambda c: c.update(adaptation=[{"kind": "default"}, {"kind": "default"}]), "exactly one"),
    (lambda c: c.update(train={"glue": {"lr": -1}}), "learning rate"),
])
def test_validation_errors(workspace, tmp_path, capsys, mutate, field):
    root, data, visual = workspace
    cfg = eval_config(root, data, visual, "default", tmp_path / "x")
    mutate(cfg)
    assert run(tmp_path, "eval-vpn", "bad", **cfg) == 1
    assert field in capsys.readouterr().err


def test_invalid_json(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text("{")
    assert cli.main(["eval-vpn", str(p)]) == 1
    assert "invalid JSON" in capsys.readouterr().err


def test_config_round_trip_and_hash(workspace, tmp_path):
    root, data, visual = workspace
    out = tmp_path / "rt"
    assert run(tmp_path, "eval-vpn", "rt", **eval_config(root, data, visual, "default", out)) == 0
    stored = json.loads((out / "config.json").read_text())
    meta = json.loads((out / "run.json").read_text())
    assert cli.config_hash(stored) == meta["config_hash"]
    again = cli.validate_config(stored, "eval-vpn")
    assert again.to_dict() == stored
    assert {"started", "finished", "seed"} <= set(meta)


def test_same_config_same_result_bytes(workspace, tmp_path):
    root, data, visual = workspace
    outs = []
    for i in range(2):
        out = tmp_path / f"rep{i}"
        cfg = eval_config(root, data, visual, "finetuned-visual-features", out)
        assert run(tmp_path, "eval-vpn", f"rep{i}", **cfg) == 0
        outs.append((out / "result.json").read_bytes())
    assert outs[0] == outs[1]


def test_output_root_override(workspace, tmp_path, monkeypatch):
    root, data, visual = workspace
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))
    assert run(tmp_path, "eval-vpn", "env", **eval_config(root, data, visual, "default", "relative/run")) == 0
    assert (tmp_path / "elsewhere" / "relative" / "run" / "result.json").exists()


def test_lock_blocks_second_writer(workspace, tmp_path, capsys):
    root, data, visual = workspace
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    assert run(tmp_path, "eval-vpn", "l", **eval_config(root, data, visual, "default", out)) == 2
    assert "locked" in capsys.readouterr().err


def test_divergence_exit_2_with_curve(workspace, tmp_path, monkeypatch, capsys):
    root, data, visual = workspace

    def diverge(*args, **kwargs):
        raise TrainingDivergence(3, float("nan"), [CurvePoint(1, "train", 2.5), CurvePoint(2, "train", 9e9)])

    monkeypatch.setattr(cli, "train_mlm", diverge)
    out = tmp_path / "div"
    code = run(tmp_path, "pretrain", "div", output_dir=str(out), checkpoint=str(root / "pre" / "model.json"),
               data={"visual_datasets": visual}, pretrain={"visual_dataset": "cap"})
    assert code == 2
    err = capsys.readouterr().err
    assert "step 2 train" in err
    with (out / "curves.csv").open() as fh:
        assert len(list(csv.reader(fh))) == 3


def test_pipeline_and_report_over_all_adaptations(workspace, tmp_path):
    root, data, visual = workspace
    # the two tuned adaptations are first produced by their own subcommands, then evaluated as pretuned
    assert run(tmp_path, "finetune-text", "ft", **eval_config(
        root, data, visual, "no-visual-features-finetuned", tmp_path / "ft")) == 0
    assert run(tmp_path, "tune-features", "tf", **eval_config(
        root, data, visual, "finetuned-visual-features", tmp_path / "tf")) == 0
    runs = []
    for kind in KINDS:
        cfg = eval_config(root, data, visual, kind, tmp_path / kind)
        if kind == "no-visual-features-finetuned":
            cfg["adaptation"] = {"kind": kind, "pretuned": "ft"}
            cfg["data"]["models"] = {"ft": str(tmp_path / "ft" / "model.json")}
        if kind == "finetuned-visual-features":
            cfg["adaptation"] = {"kind": kind, "pretuned": "tf"}
            cfg["data"]["features"] = {"tf": str(tmp_path / "tf" / "features.json")}
        assert run(tmp_path, "eval-vpn", kind, **cfg) == 0, kind
        runs.append(str(tmp_path / kind))
    assert run(tmp_path, "report", "report", output_dir=str(tmp_path / "report"), runs=runs) == 0
    with (tmp_path / "report" / "vpn.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["adaptation", "median", "std"]
    assert [r[0] for r in rows[1:]] == list(KINDS)
    boxes = json.loads((tmp_path / "report" / "boxplot.json").read_text())
    assert set(boxes["adaptations"]) == set(KINDS)
    assert "not reproducible" in boxes["reference"]["note"]


def test_eval_glue(workspace, tmp_path):
    root, data, visual = workspace
    (tmp_path / "t.tsv").write_text("a cow is black\t1\nthe mug has a handle\t0\n" * 4)
    cfg = eval_config(root, data, visual, "zeroed-visual-features", tmp_path / "glue")
    cfg["data"]["glue_tasks"] = [{"name": "SST-2", "train": str(tmp_path / "t.tsv"), "dev": str(tmp_path / "t.tsv")},
                                 {"name": "WNLI", "train": str(tmp_path / "t.tsv"), "dev": str(tmp_path / "t.tsv")}]
    cfg["train"]["glue"] = {"epochs": 1}
    assert run(tmp_path, "eval-glue", "g", **cfg) == 0
    result = json.loads((tmp_path / "glue" / "result.json").read_text())
    assert result["glue"]["macro"] == result["glue"]["per_task"]["SST-2"]["score"]
    assert run(tmp_path, "report", "gr", output_dir=str(tmp_path / "grep"), runs=[str(tmp_path / "glue")]) == 0
    assert (tmp_path / "grep" / "glue.csv").exists()


def test_console_script_help():
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
