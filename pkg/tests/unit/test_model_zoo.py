"""Unit tests for the toy encoders, pooling, prefixes and checkpoints."""

import math

import numpy as np
import pytest

import autograd as ag
from model_zoo import (
    TASK_PROMPTS,
    CheckpointFormatError,
    DualModel,
    LateFusionModel,
    ModelConfig,
    ModelInputError,
    TextModel,
    attention_pool,
    bind,
    checkpoint_bytes,
    collect_gradients,
    conv_windows,
    init_params,
    load_checkpoint,
    param_digest,
    parse_checkpoint,
    save_checkpoint,
    slice_prefix,
    trainable_filter,
)
from numeric_core import grad_check

pytestmark = pytest.mark.unit


class TestModelConfig:
    """Test cases for ModelConfig validation."""

    def test_dims_must_end_at_d_max(self):
        with pytest.raises(ModelInputError, match="must equal d_max"):
            ModelConfig(d_max=64, dims=(8, 16, 32))

    def test_dims_must_increase(self):
        with pytest.raises(ModelInputError, match="strictly increasing"):
            ModelConfig(d_max=16, dims=(16, 8, 16))


class TestSlicePrefix:
    """Test cases for slice_prefix."""

    def test_full_width_is_identity(self):
        e = np.array([0.6, 0.8, 0.0, 0.0])
        np.testing.assert_allclose(slice_prefix(e, 4, (1, 2, 4)), e)

    def test_axis_vector(self):
        np.testing.assert_allclose(slice_prefix([1.0, 0.0, 0.0, 0.0], 2, (2, 4)), [1.0, 0.0])

    def test_renormalized(self):
        np.testing.assert_allclose(slice_prefix([0.6, 0.8, 0.0, 0.0], 1, (1, 2, 4)), [1.0])

    def test_unconfigured_dim(self):
        with pytest.raises(ModelInputError, match="not a configured"):
            slice_prefix([1.0, 0.0, 0.0, 0.0], 3, (2, 4))


class TestAttentionPool:
    """Test cases for attention pooling."""

    def test_identical_rows(self):
        x = np.tile([[0.3, -0.2]], (4, 1))
        np.testing.assert_allclose(attention_pool(x, np.array([[5.0, 1.0]])), [0.3, -0.2])

    def test_zero_query_is_mean(self):
        np.testing.assert_allclose(attention_pool(np.array([[0.0, 2.0], [0.0, 0.0]]), np.zeros((1, 2))), [0.0, 1.0])

    def test_two_way_softmax(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        w = 1.0 / (1.0 + math.exp(-2 * 10 / math.sqrt(2)))
        np.testing.assert_allclose(attention_pool(x, np.array([[10.0, 0.0]])), [w - (1 - w), 0.0])

    @pytest.mark.parametrize("seed", range(10))
    def test_output_inside_row_hull(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0.0, 2.0, (int(rng.integers(1, 9)), 5))
        pooled = attention_pool(x, rng.normal(0.0, 5.0, (1, 5)))
        assert np.all(pooled >= x.min(axis=0) - 1e-12)
        assert np.all(pooled <= x.max(axis=0) + 1e-12)


class TestConvWindows:
    def test_downsamples_by_stride(self):
        for length in (1, 5, 12, 13):
            assert conv_windows(np.ones((length, 3)), 3, 2).shape == (math.ceil(length / 2), 9)


class TestTextModel:
    """Test cases for the text encoder."""

    def test_unit_norm_and_deterministic(self, small_model_config, text_params):
        model = TextModel(small_model_config, text_params)
        a = model.encode_text([10, 11, 12], TASK_PROMPTS["document-retrieval"])
        b = model.encode_text([10, 11, 12], TASK_PROMPTS["document-retrieval"])
        assert abs(np.linalg.norm(a) - 1.0) < 1e-9
        np.testing.assert_array_equal(a, b)

    def test_prompt_changes_embedding(self, small_model_config, text_params):
        model = TextModel(small_model_config, text_params)
        a = model.encode_text([10, 11, 12], TASK_PROMPTS["document-retrieval"])
        b = model.encode_text([10, 11, 12], TASK_PROMPTS["translation-retrieval"])
        assert float(a @ b) < 1 - 1e-6

    def test_fresh_encoder_keeps_documents_apart(self, small_corpus, small_model_config, text_params):
        assert not np.any(text_params["text.tokens"][0])
        docs = TextModel(small_model_config, text_params).encode_texts([e.document_tokens for e in small_corpus])
        sims = docs @ docs.T
        assert sims[~np.eye(len(docs), dtype=bool)].min() < 0.99

    def test_unknown_token(self, small_model_config, text_params):
        with pytest.raises(ModelInputError, match="unknown token id 999"):
            TextModel(small_model_config, text_params).encode_text([10, 999])

    def test_overlength_names_truncation(self, small_model_config, text_params):
        with pytest.raises(ModelInputError, match="truncate the input to at most"):
            TextModel(small_model_config, text_params).encode_text(list(range(10, 60)))


class TestSpeechModels:
    """Test cases for the late-fusion and dual speech paths."""

    def test_late_fusion_unit_norm(self, small_model_config, text_params):
        params = init_params("late-fusion", small_model_config, 1, text_params=text_params)
        frames = np.random.default_rng(0).uniform(-0.5, 0.5, (12, 8))
        e = LateFusionModel(small_model_config, params).encode_speech_late_fusion(frames, TASK_PROMPTS["document-retrieval"])
        assert abs(np.linalg.norm(e) - 1.0) < 1e-9

    def test_dual_heads_per_dim(self, small_model_config, text_params):
        params = init_params("dual-retrieval", small_model_config, 1, text_params=text_params)
        frames = np.random.default_rng(0).uniform(-0.5, 0.5, (7, 8))
        outputs = DualModel(small_model_config, params).encode_speech_dual(frames)
        assert sorted(outputs) == [2, 4, 8]
        for d, vec in outputs.items():
            assert vec.shape == (d,)
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-9

    def test_heads_are_independent(self, small_model_config, text_params):
        params = init_params("dual-retrieval", small_model_config, 1, text_params=text_params)
        frames = np.random.default_rng(0).uniform(-0.5, 0.5, (7, 8))
        before = DualModel(small_model_config, params).encode_speech_dual(frames)
        changed = {**params, "head.4": params["head.4"] + np.random.default_rng(1).normal(0.0, 1.0, (8, 4))}
        after = DualModel(small_model_config, changed).encode_speech_dual(frames)
        np.testing.assert_array_equal(after[2], before[2])
        np.testing.assert_array_equal(after[8], before[8])
        assert not np.allclose(after[4], before[4])

    def test_dim_loss_reaches_only_its_head(self, small_model_config, text_params):
        params = init_params("dual-retrieval", small_model_config, 1, text_params=text_params)
        frames = np.random.default_rng(0).uniform(-0.5, 0.5, (7, 8))
        bound = bind(params, trainable_filter("dual-retrieval"))
        outputs = DualModel(small_model_config, params).speech_tensors(bound, frames)
        ag.sum_all(ag.mul(outputs[4], ag.constant(np.eye(4)[:1]))).backward()
        grads = collect_gradients(bound)
        assert np.any(grads["head.4"] != 0)
        assert not np.any(grads["head.2"])
        assert not np.any(grads["head.8"])

    def test_overlength_speech_names_truncation(self, text_params):
        config = ModelConfig(vocab_size=128, hidden=8, d_max=8, dims=(2, 4, 8), blocks=1, max_length=16, frame_dim=8)
        params = init_params("late-fusion", config, 1, text_params=text_params)
        model = LateFusionModel(config, params)
        prompt = TASK_PROMPTS["document-retrieval"]
        with pytest.raises(ModelInputError, match="exceeds max length 16; truncate the input to at most 26 frames"):
            model.encode_speech_late_fusion(np.zeros((200, 8)), prompt)
        frames = np.random.default_rng(0).uniform(-0.5, 0.5, (26, 8))
        assert model.encode_speech_late_fusion(frames, prompt).shape == (8,)

    def test_empty_frames_rejected(self, small_model_config, text_params):
        params = init_params("dual-alignment", small_model_config, 1, text_params=text_params)
        with pytest.raises(ModelInputError, match="at least one frame"):
            DualModel(small_model_config, params).encode_speech_dual(np.zeros((0, 8)))

    def test_speech_variant_reuses_text_weights(self, small_model_config, text_params):
        params = init_params("late-fusion", small_model_config, 5, text_params=text_params)
        assert param_digest(params, "text.") == param_digest(text_params, "text.")

    def test_text_stack_frozen_for_speech(self):
        trainable = trainable_filter("late-fusion")
        assert not trainable("text.out")
        assert trainable("frontend.proj")
        assert trainable_filter("text-only")("text.out")

    def test_late_fusion_gradients(self, small_model_config, text_params):
        params = init_params("late-fusion", small_model_config, 1, text_params=text_params)
        model = LateFusionModel(small_model_config, params)
        frames = np.random.default_rng(2).uniform(-0.5, 0.5, (6, 8))
        target = np.eye(8)[:1]
        names = ("frontend.conv", "frontend.proj")

        def f(p):
            full = {**params, **p}
            bound = bind(full, lambda name: name in names)
            e = model.speech_tensor(bound, frames, TASK_PROMPTS["document-retrieval"])
            loss = ag.sum_all(ag.mul(e, ag.constant(target)))
            loss.backward()
            return loss.item(), collect_gradients(bound)

        assert grad_check(f, {n: params[n] for n in names}) < 1e-4


class TestCheckpoints:
    """Test cases for checkpoint persistence."""

    def test_round_trip(self, tmp_path, small_model_config):
        params = init_params("dual-retrieval", small_model_config, 3)
        path = save_checkpoint(params, tmp_path / "model.ckpt")
        loaded = load_checkpoint(path)
        assert checkpoint_bytes(loaded) == path.read_bytes()
        assert param_digest(loaded) == param_digest(params)

    def test_bad_magic(self, small_model_config):
        blob = bytearray(checkpoint_bytes(init_params("text-only", small_model_config, 0)))
        blob[0] ^= 0xFF
        with pytest.raises(CheckpointFormatError, match="magic"):
            parse_checkpoint(bytes(blob))

    def test_truncated(self, small_model_config):
        blob = checkpoint_bytes(init_params("text-only", small_model_config, 0))
        with pytest.raises(CheckpointFormatError, match="truncated"):
            parse_checkpoint(blob[:-3])
