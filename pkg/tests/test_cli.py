"""Command-line interface and flat-config behaviour.

Commands run in-process through ``main(argv)`` so exit codes and artifacts
can be asserted without a subprocess round trip; one smoke test covers the
``python -m disreid`` entry point for real.
"""

import json
import subprocess
import sys
import zipfile
from pathlib import Path

import numpy as np
import pytest

import disreid
from disreid.backbone import ConfigError
from disreid.cli import (
    ABLATION_ROWS,
    _eval_components,
    _eval_frames_per_clip,
    build_parser,
    main,
)
from disreid.config import (
    Config,
    load_config,
    parse_assignment,
    to_model_config,
    to_synth_spec,
    to_train_config,
)
from disreid.objective import ALL_COMPONENTS
from disreid.tensor_io import read_dstn

# small corpus + model settings shared by every command test
SYNTH_ARGS = [
    "--ids", "4", "--cameras", "2",
    "--set", "data.tracklets=2", "--set", "data.frames=4",
    "--set", "data.height=16", "--set", "data.width=16",
]
TRAIN_SETS = [
    "--set", "backbone.c=16", "--set", "backbone.strides=2,1,1,1",
    "--set", "train.epochs=2", "--set", "train.lr=1e-3",
    "--set", "sampler.p=2", "--set", "sampler.k=2",
    "--set", "sampler.batches=2", "--set", "sampler.frames=2",
]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["synth", "--out", str(out), "--seed", "3"] + SYNTH_ARGS) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(
        ["train", "--corpus", str(corpus_dir), "--out", str(out), "--seed", "0"]
        + TRAIN_SETS
    )
    assert code == 0
    return out


class TestConfigRegistry:
    def test_defaults(self):
        config = Config()
        assert config["train.lr"] == 3.5e-4
        assert config["backbone.c"] == 64
        assert config["backbone.strides"] == (2, 2, 2, 1)
        assert config["ablate.seeds"] == (0, 1, 2)
        assert config["sampler.batches"] is None
        assert config["train.components"] == frozenset(ALL_COMPONENTS)

    def test_unknown_key_rejected_with_catalog(self):
        with pytest.raises(ConfigError, match="valid keys"):
            Config()["train.momentum"]
        with pytest.raises(ConfigError) as err:
            Config().set("bogus.key", "1")
        # the message doubles as documentation: it lists the full key space
        assert "data.ids" in str(err.value)
        assert "train.lr" in str(err.value)
        with pytest.raises(ConfigError):
            Config({"not.a.key": 1})

    def test_set_parses_types(self):
        config = Config()
        config.set("backbone.strides", "2,1,1,1")
        assert config["backbone.strides"] == (2, 1, 1, 1)
        config.set("train.components", "tlm,fwg")
        assert config["train.components"] == frozenset({"tlm", "fwg"})
        config.set("train.components", "all")
        assert config["train.components"] == frozenset(ALL_COMPONENTS)
        config.set("train.components", "none")
        assert config["train.components"] == frozenset()
        for raw, expect in [("true", True), ("ON", True), ("1", True),
                            ("false", False), ("No", False)]:
            config.set("train.augment", raw)
            assert config["train.augment"] is expect
        config.set("train.lambda_cam", "none")
        assert config["train.lambda_cam"] is None
        config.set("train.lambda_cam", "0.25")
        assert config["train.lambda_cam"] == 0.25

    def test_bad_value_reports_key(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            Config().set("train.epochs", "soon")
        with pytest.raises(ConfigError, match="boolean"):
            Config().set("train.augment", "maybe")

    def test_choices_enforced(self):
        with pytest.raises(ConfigError, match="not one of"):
            Config().set("model.pseudo", "bogus")
        with pytest.raises(ConfigError, match="not one of"):
            Config().set("train.precision", "float16")

    def test_is_set_tracks_explicit_values(self):
        config = Config()
        assert not config.is_set("sampler.frames")
        config.set("sampler.frames", "4")
        assert config.is_set("sampler.frames")
        assert config["sampler.frames"] == 4
        with pytest.raises(ConfigError):
            config.is_set("nope")

    def test_effective_is_json_ready(self):
        config = Config()
        config.set("train.components", "tlm,sao")
        effective = config.effective()
        assert list(effective) == sorted(effective)
        assert effective["train.components"] == ["sao", "tlm"]
        assert effective["backbone.strides"] == [2, 2, 2, 1]
        json.dumps(effective)

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment line\n"
            "data.ids = 6   # trailing comment\n"
            "\n"
            "train.epochs = 3\n"
        )
        config = load_config(path, ["train.epochs=9"])
        assert config["data.ids"] == 6
        assert config["train.epochs"] == 9

    def test_file_errors_carry_line_numbers(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("data.ids = 4\ndata.frames = x\n")
        with pytest.raises(ConfigError, match="bad.cfg:2"):
            load_config(path)
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.cfg")

    def test_parse_assignment_requires_equals(self):
        assert parse_assignment("a.b = 1") == ("a.b", "1")
        with pytest.raises(ConfigError, match="key = value"):
            parse_assignment("a.b 1")

    def test_builders_map_keys(self):
        config = load_config(None, [
            "data.ids=6", "data.height=16", "data.width=16",
            "backbone.c=16", "backbone.strides=2,1,1,1",
            "train.dis_margin=0.1", "model.pseudo=sumnorm",
            "train.epochs=7", "sampler.frames=2", "train.components=tlm,l_dis",
        ])
        spec = to_synth_spec(config)
        assert (spec.num_ids, spec.height, spec.width) == (6, 16, 16)
        mconf = to_model_config(config, num_ids=3, num_cameras=2)
        assert mconf.channels == 16
        assert mconf.strides == (2, 1, 1, 1)
        assert mconf.input_hw == (16, 16)
        assert mconf.dis_margin == 0.1
        assert mconf.pseudo_mode == "sumnorm"
        mconf = to_model_config(config, 3, 2, input_hw=(32, 16))
        assert mconf.input_hw == (32, 16)
        tconf = to_train_config(config)
        assert tconf.epochs == 7
        assert tconf.frames_per_clip == 2
        assert tconf.components == frozenset({"tlm", "l_dis"})
        # explicit components argument wins over the config key
        tconf = to_train_config(config, components=frozenset({"sao"}))
        assert tconf.components == frozenset({"sao"})
        with pytest.raises(ConfigError):
            to_train_config(config, components=frozenset({"warp"}))


class TestSynthCommand:
    def test_writes_corpus_and_run_json(self, corpus_dir, capsys):
        capsys.readouterr()
        assert (corpus_dir / "manifest.json").exists()
        record = json.loads((corpus_dir / "run.json").read_text())
        assert record["command"] == "synth"
        assert record["version"] == disreid.__version__
        assert record["config"]["data.ids"] == 4
        assert record["config"]["data.seed"] == 3
        assert "--ids" in record["argv"]

    def test_determinism_across_out_dirs(self, corpus_dir, tmp_path):
        again = tmp_path / "corpus2"
        assert main(["synth", "--out", str(again), "--seed", "3"] + SYNTH_ARGS) == 0
        assert (
            (again / "manifest.json").read_bytes()
            == (corpus_dir / "manifest.json").read_bytes()
        )
        rel = sorted(
            p.relative_to(corpus_dir) for p in corpus_dir.rglob("*.dstn")
        )[0]
        assert (again / rel).read_bytes() == (corpus_dir / rel).read_bytes()

    def test_seed_shorthand_changes_corpus(self, corpus_dir, tmp_path):
        other = tmp_path / "corpus9"
        assert main(["synth", "--out", str(other), "--seed", "9"] + SYNTH_ARGS) == 0
        assert json.loads((other / "run.json").read_text())["config"]["data.seed"] == 9
        rel = sorted(
            p.relative_to(corpus_dir) for p in corpus_dir.rglob("*.dstn")
        )[0]
        assert (other / rel).read_bytes() != (corpus_dir / rel).read_bytes()

    def test_single_camera_exits_2(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path / "x"), "--cameras", "1"])
        assert code == 2
        assert "camera" in capsys.readouterr().err

    def test_unknown_set_key_exits_2(self, tmp_path, capsys):
        code = main(
            ["synth", "--out", str(tmp_path / "x"), "--set", "data.idz=4"]
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "data.idz" in err
        assert "data.ids" in err

    def test_out_is_required(self, capsys):
        assert main(["synth"]) == 2
        assert "requires --out" in capsys.readouterr().err


class TestTrainEvalCommands:
    def test_train_artifacts(self, trained_dir):
        assert (trained_dir / "checkpoint.zip").exists()
        lines = (trained_dir / "metrics.jsonl").read_text().splitlines()
        # 2 epochs x 2 batches
        assert len(lines) == 4
        assert json.loads(lines[-1])["step"] == 4
        record = json.loads((trained_dir / "run.json").read_text())
        assert record["command"] == "train"
        assert record["config"]["train.seed"] == 0
        assert record["config"]["backbone.c"] == 16

    def test_eval_writes_results(self, corpus_dir, trained_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main([
            "eval", "--corpus", str(corpus_dir), "--out", str(out),
            "--checkpoint", str(trained_dir / "checkpoint.zip"),
        ])
        assert code == 0
        assert "mAP" in capsys.readouterr().out
        results = json.loads((out / "results.json").read_text())
        assert set(results) == {"mAP", "CMC", "num_queries", "excluded_queries"}
        assert 0.0 <= results["mAP"] <= 1.0
        # gallery of 4 keeps only the rank-1 point of the standard ladder
        assert set(results["CMC"]) == {"1"}
        assert 0.0 <= results["CMC"]["1"] <= 1.0
        assert results["num_queries"] == 4

    def test_eval_requires_checkpoint(self, corpus_dir, tmp_path, capsys):
        code = main(
            ["eval", "--corpus", str(corpus_dir), "--out", str(tmp_path / "e")]
        )
        assert code == 2
        assert "requires --checkpoint" in capsys.readouterr().err

    def test_eval_component_resolution(self):
        meta = {"config": {"components": ["tlm", "l_dis"], "frames_per_clip": 2}}
        config = Config()
        assert _eval_components(config, meta) == frozenset({"tlm", "l_dis"})
        assert _eval_frames_per_clip(config, meta) == 2
        config.set("train.components", "sao")
        config.set("sampler.frames", "8")
        assert _eval_components(config, meta) == frozenset({"sao"})
        assert _eval_frames_per_clip(config, meta) == 8
        # a checkpoint without stored components falls back to the default
        assert _eval_components(Config(), {}) == frozenset(ALL_COMPONENTS)

    def test_resume_from_checkpoint(self, corpus_dir, trained_dir, tmp_path, capsys):
        out = tmp_path / "resumed"
        code = main(
            ["train", "--corpus", str(corpus_dir), "--out", str(out),
             "--checkpoint", str(trained_dir / "checkpoint.zip")]
            + TRAIN_SETS + ["--set", "train.epochs=3"]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "resumed from" in stdout
        assert "at epoch 2" in stdout

    def test_foreign_checkpoint_exits_1(self, corpus_dir, tmp_path, capsys):
        bogus = tmp_path / "bogus.zip"
        with zipfile.ZipFile(bogus, "w") as zf:
            zf.writestr("readme.txt", "not a checkpoint")
        code = main([
            "eval", "--corpus", str(corpus_dir), "--out", str(tmp_path / "e"),
            "--checkpoint", str(bogus),
        ])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_corpus_exits_2(self, tmp_path, capsys):
        code = main([
            "train", "--corpus", str(tmp_path / "nowhere"),
            "--out", str(tmp_path / "t"),
        ])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_probe_writes_measurements(self, corpus_dir, trained_dir, tmp_path, capsys):
        out = tmp_path / "probe"
        code = main([
            "probe", "--corpus", str(corpus_dir), "--out", str(out),
            "--checkpoint", str(trained_dir / "checkpoint.zip"),
            "--split", "train",
        ])
        assert code == 0
        assert "mean positive cosine" in capsys.readouterr().out
        probes = json.loads((out / "probes.json").read_text())
        assert probes["split"] == "train"
        assert probes["num_tracklets"] == 8
        assert 0.0 <= probes["mean_positive_cosine"] <= 1.0
        for key in ("id_probe_f_id", "camera_probe_f_id", "camera_probe_f_cam"):
            assert 0.0 <= probes[key]["accuracy"] <= 1.0
            assert "majority_baseline" in probes[key]

    def test_probe_requires_checkpoint(self, corpus_dir, tmp_path, capsys):
        code = main(
            ["probe", "--corpus", str(corpus_dir), "--out", str(tmp_path / "p")]
        )
        assert code == 2
        assert "requires --checkpoint" in capsys.readouterr().err

    def test_dump_artifacts(self, corpus_dir, tmp_path):
        out = tmp_path / "dumptrain"
        code = main(
            ["train", "--corpus", str(corpus_dir), "--out", str(out)]
            + TRAIN_SETS
            + ["--set", "train.epochs=1", "--set", "sampler.batches=1",
               "--set", "dump.fwg=true"]
        )
        assert code == 0
        rows = [
            json.loads(line)
            for line in (out / "dumps" / "fwg" / "weights.jsonl").read_text().splitlines()
        ]
        assert len(rows) == 8
        for row in rows:
            assert len(row["predicted"]) == 2
            np.testing.assert_allclose(sum(row["predicted"]), 1.0, atol=1e-5)
            assert row["target"] is not None and len(row["target"]) == 2

        eval_out = tmp_path / "dumpeval"
        code = main([
            "eval", "--corpus", str(corpus_dir), "--out", str(eval_out),
            "--checkpoint", str(out / "checkpoint.zip"),
            "--set", "dump.embeddings=true", "--set", "dump.ranking=true",
        ])
        assert code == 0
        q = read_dstn(eval_out / "dumps" / "query_embeddings.dstn")
        assert q.shape == (4, 16)
        header = (eval_out / "ranking.csv").read_text().splitlines()[0]
        assert header == "query_id,query_cam,rank,gallery_id,gallery_cam,distance"


class TestAblateCommand:
    def test_ablation_table(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "ablate"
        code = main(
            ["ablate", "--corpus", str(corpus_dir), "--out", str(out)]
            + TRAIN_SETS
            + ["--set", "ablate.seeds=0", "--set", "ablate.epochs=1",
               "--set", "ablate.jobs=2"]
        )
        assert code == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "configuration,rank1,mAP,rank1_s0,mAP_s0"
        assert len(lines) == 1 + len(ABLATION_ROWS)
        names = [line.split(",")[0] for line in lines[1:]]
        assert names == [name for name, _ in ABLATION_ROWS]
        for line in lines[1:]:
            _, mean_r1, mean_ap, r1_s0, ap_s0 = line.split(",")
            # single seed: the mean column equals the per-seed column
            assert mean_r1 == r1_s0
            assert mean_ap == ap_s0
            assert 0.0 <= float(mean_ap) <= 1.0
        assert "baseline" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_gradcheck_suites_pass(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        code = main(["gradcheck", "--coords", "1"])
        assert code == 0
        assert "all 8 suites passed" in capsys.readouterr().out
        payload = json.loads(
            (tmp_path / "runs" / "gradcheck" / "gradcheck.json").read_text()
        )
        assert len(payload) == 8
        assert all(entry["passed"] for entry in payload.values())


class TestEntryPoint:
    def test_parser_lists_all_subcommands(self):
        parser = build_parser()
        text = parser.format_help()
        for name in ("synth", "train", "eval", "ablate", "gradcheck", "probe"):
            assert name in text

    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "disreid", "--version"],
            capture_output=True, text=True, cwd=str(Path(__file__).parent.parent),
        )
        assert proc.returncode == 0
        assert disreid.__version__ in proc.stdout
