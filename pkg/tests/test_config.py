import json
from pathlib import Path

import pytest

from spkmtl.config import load_config, parse_config
from spkmtl.errors import SchemaError

VALID = {
    "model": {
        "input_dim": 30,
        "embedding_dim": 256,
        "speaker_head": {"kind": "cosface", "margin": 0.2, "scale": 30.0},
    },
    "mtl": {"tasks": [{"task_name": "age", "label_source": "age_bin", "lambda": 0.01}]},
    "train": {
        "iterations": 50000, "batch_size": 500, "chunk_frames": 350,
        "lr": 0.2, "momentum": 0.5, "seed": 0, "validation_every": 500,
    },
    "finetune": {
        "mode": "last_linear", "total_iterations": 5000, "freeze_iterations": 1000,
        "label_set": "speaker+age", "lambda_age": 0.05,
    },
}


class TestParseConfig:
    def test_valid_full_config(self):
        cfg = parse_config(VALID, require=("train", "finetune"))
        assert cfg.train.iterations == 50000
        assert cfg.train.mtl.tasks[0].weight == 0.01
        assert cfg.finetune.mode == "last_linear"
        assert cfg.speaker_head.kind == "cosface"
        assert cfg.model.embedding_dim == 256
        assert cfg.model.min_frames == 15

    def test_finetune_inherits_from_train(self):
        cfg = parse_config(VALID, require=("finetune",))
        assert cfg.finetune.lr == 0.2
        assert cfg.finetune.batch_size == 500
        assert cfg.finetune.momentum == 0.5

    def test_finetune_override(self):
        raw = json.loads(json.dumps(VALID))
        raw["finetune"]["lr"] = 0.01
        raw["finetune"]["batch_size"] = 64
        cfg = parse_config(raw)
        assert cfg.finetune.lr == 0.01
        assert cfg.finetune.batch_size == 64

    def test_errors_are_exhaustive_not_first_only(self):
        raw = json.loads(json.dumps(VALID))
        raw["train"]["lr"] = -1.0
        raw["train"]["batch_size"] = 0
        raw["mtl"]["tasks"][0]["lambda"] = -0.5
        raw["finetune"]["mode"] = "half"
        with pytest.raises(SchemaError) as err:
            parse_config(raw)
        text = "\n".join(err.value.problems)
        for field in ("train.lr", "train.batch_size", "mtl.tasks[0].lambda", "finetune.mode"):
            assert field in text, field
        assert len(err.value.problems) >= 4

    def test_missing_required_train_fields_named(self):
        raw = {"train": {"iterations": 10}}
        with pytest.raises(SchemaError) as err:
            parse_config(raw, require=("train",))
        text = "\n".join(err.value.problems)
        for field in ("train.batch_size", "train.lr", "train.momentum",
                      "train.seed", "train.validation_every", "train.chunk_frames"):
            assert field in text, field

    def test_freeze_must_be_below_total(self):
        raw = json.loads(json.dumps(VALID))
        raw["finetune"]["freeze_iterations"] = 5000
        with pytest.raises(SchemaError, match="freeze_iterations"):
            parse_config(raw)

    def test_unknown_section_rejected(self):
        with pytest.raises(SchemaError, match="unknown section"):
            parse_config({"trainer": {}})

    def test_speaker_listed_as_aux_rejected(self):
        raw = json.loads(json.dumps(VALID))
        raw["mtl"]["tasks"].append(
            {"task_name": "speaker", "label_source": "speaker", "lambda": 1.0}
        )
        with pytest.raises(SchemaError, match="implicit"):
            parse_config(raw)

    def test_bad_frame_layers_reported(self):
        raw = {"model": {"frame_layers": [[[-2, 0, 1], 8]]}}
        with pytest.raises(SchemaError, match="frame_layers"):
            parse_config(raw)

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError, match="does not exist"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(SchemaError, match="invalid JSON"):
            load_config(path)


class TestShippedConfigs:
    def test_all_repo_configs_validate(self):
        configs_dir = Path(__file__).resolve().parent.parent / "configs"
        paths = sorted(configs_dir.glob("*.json"))
        assert len(paths) >= 9  # the full experimental matrix
        for path in paths:
            require = ("finetune",) if path.name.startswith("finetune") else ("train",)
            cfg = load_config(path, require=require)
            assert cfg.model is not None, path.name
