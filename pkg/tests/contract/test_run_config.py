"""Contract tests for run configuration loading and validation messages."""

from pathlib import Path

import pytest
import yaml

from run_config import ConfigError, ConfigErrorService, RunConfig, load_run_config

pytestmark = pytest.mark.contract


def _write(tmp_path, document, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(document), encoding="utf-8")
    return path


class TestValidationContract:
    """Every rejected document yields one '<location>: <message>' line per problem."""

    def test_empty_document_uses_defaults(self):
        result = ConfigErrorService.validate(None)
        assert result.is_valid
        assert result.config.model.dims == [8, 16, 32, 64]
        assert result.config.eval.n_shots == [0, 1, 2, 4, 8, 16]

    def test_unknown_key(self):
        result = ConfigErrorService.validate({"data": {"topicz": 3}})
        assert not result.is_valid
        assert result.errors == ["data.topicz: unknown key; check spelling against the documented sections"]

    def test_unknown_section(self):
        result = ConfigErrorService.validate({"serving": {}})
        assert result.errors[0].startswith("serving: unknown key")

    def test_not_a_mapping(self):
        result = ConfigErrorService.validate([1, 2])
        assert result.errors == ["<root>: expected a mapping of sections, got list"]

    def test_dims_must_end_at_d_max(self):
        result = ConfigErrorService.validate({"model": {"d_max": 64, "dims": [8, 16, 32]}})
        assert not result.is_valid
        assert result.errors[0].startswith("model:")

    def test_dims_must_increase(self):
        result = ConfigErrorService.validate({"model": {"d_max": 16, "dims": [8, 8, 16]}})
        assert not result.is_valid

    def test_speech_variants_need_text_only(self):
        result = ConfigErrorService.validate({"model": {"variants": ["late-fusion"]}})
        assert any("text-only" in line for line in result.errors)

    def test_unknown_variant(self):
        result = ConfigErrorService.validate({"model": {"variants": ["text-only", "cascade"]}})
        assert any("unknown variants" in line for line in result.errors)

    def test_epochs_need_every_variant(self):
        result = ConfigErrorService.validate({"train": {"epochs": {"text-only": 1}}})
        assert result.errors[0].startswith("train.epochs:")

    def test_shots_leave_test_queries(self):
        result = ConfigErrorService.validate({"data": {"intent_examples_per_class": 10}})
        assert any("leaves no test queries" in line for line in result.errors)

    def test_fewshot_variant_must_be_trained(self):
        result = ConfigErrorService.validate({"model": {"variants": ["text-only"]}})
        assert any("fewshot_variant" in line for line in result.errors)

    def test_bench_repetitions_floor(self):
        result = ConfigErrorService.validate({"bench": {"repetitions": 2}})
        assert result.errors[0].startswith("bench.repetitions:")

    def test_shot_sizes_restricted(self):
        result = ConfigErrorService.validate({"eval": {"n_shots": [0, 3]}})
        assert result.errors[0].startswith("eval.n_shots:")

    def test_hesitation_off_grid(self):
        result = ConfigErrorService.validate({"data": {"degraded_profile": {"hesitation_factor": 1.25}}})
        assert len(result.errors) == 1
        assert result.errors[0].startswith("data.degraded_profile.hesitation_factor:")
        assert "multiple of 0.1" in result.errors[0]

    def test_query_entities_fit_pool(self):
        result = ConfigErrorService.validate({"data": {"query_entities": 5}})
        assert result.errors[0].startswith("data:")
        assert "entities_per_topic" in result.errors[0]


class TestLoadContract:
    """Test cases for load_run_config."""

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="Config file not found") as info:
            load_run_config(tmp_path / "nope.yaml")
        assert "--config" in str(info.value)

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("data: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_run_config(path)

    def test_errors_attached(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            load_run_config(_write(tmp_path, {"data": {"topicz": 3}}))
        assert info.value.errors == ["data.topicz: unknown key; check spelling against the documented sections"]
        assert "failed validation" in str(info.value)

    def test_seed_override(self, tmp_path):
        config = load_run_config(_write(tmp_path, {"data": {"seed": 1}}), seed=42)
        assert config.data.seed == 42

    def test_shipped_configs_load(self, project_root):
        for name in ("default.yaml", "smoke.yaml"):
            assert isinstance(load_run_config(Path(project_root) / "configs" / name), RunConfig)


class TestConfigHash:
    """The config hash is a pure function of the validated document."""

    def test_stable_across_loads(self, tmp_path):
        path = _write(tmp_path, {"data": {"topics": 5}})
        assert load_run_config(path).config_hash() == load_run_config(path).config_hash()

    def test_key_order_irrelevant(self):
        a = ConfigErrorService.validate({"data": {"topics": 5, "seed": 2}}).config
        b = ConfigErrorService.validate({"data": {"seed": 2, "topics": 5}}).config
        assert a.config_hash() == b.config_hash()

    def test_explicit_defaults_hash_like_omitted(self):
        a = ConfigErrorService.validate({}).config
        b = ConfigErrorService.validate({"data": {"topics": 12}}).config
        assert a.config_hash() == b.config_hash()

    def test_seed_changes_hash(self, tmp_path):
        path = _write(tmp_path, {})
        assert load_run_config(path, seed=1).config_hash() != load_run_config(path, seed=2).config_hash()

    def test_module_configs(self):
        config = ConfigErrorService.validate({}).config
        assert config.to_model_config().dims == (8, 16, 32, 64)
        assert config.loss_config("dual-alignment").objective == "query-alignment"
        assert config.loss_config("late-fusion").objective == "retrieval"
        assert config.fewshot_config().n_shot == 16

    def test_root_keeps_strict_schema(self):
        assert RunConfig.model_config.get("extra") == "forbid"
        result = ConfigErrorService.validate({"model": {"dims": [8, 16, 32, 64]}, "extras": 1})
        assert result.errors == ["extras: unknown key; check spelling against the documented sections"]

    def test_model_config_conversion_keeps_sizes(self):
        config = ConfigErrorService.validate({"model": {"hidden": 32}}).config
        converted = config.to_model_config()
        assert converted.hidden == 32
        assert converted.vocab_size == config.data.vocab_size
