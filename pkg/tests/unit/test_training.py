"""Unit tests for losses, batching, the training loop and few-shot pairs."""

import math
from dataclasses import replace

import numpy as np
import pytest

from model_zoo import TASK_PROMPTS, LateFusionModel, init_params, param_digest
from numeric_core import grad_check
from training import (
    FewShotConfig,
    LossConfig,
    Sampler,
    TrainingError,
    TrainRunConfig,
    batch_mrl_loss,
    contrastive_pair_loss,
    encoder_loss,
    info_nce,
    mrl_loss,
    query_alignment_loss,
    read_curve,
    setfit_pairs,
    setfit_train,
    sgd_step,
    train,
)

pytestmark = pytest.mark.unit


class TestInfoNCE:
    """Test cases for the in-batch InfoNCE loss."""

    def test_single_pair_is_zero_with_warning(self):
        result = info_nce([[1.0, 0.0]], [[0.0, 1.0]], 0.05)
        assert result.loss == 0.0
        assert result.warnings

    def test_identity_batch(self):
        result = info_nce(np.eye(2), np.eye(2), 1.0)
        assert result.loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert result.loss == pytest.approx(0.3133, abs=1e-4)

    def test_equidistant_query(self):
        q = np.array([[1.0, 0.0], [1.0, 0.0]])
        docs = np.array([[0.6, 0.8], [0.6, -0.8]])
        assert info_nce(q, docs, 0.1).loss == pytest.approx(math.log(2), abs=1e-12)

    def test_bad_temperature(self):
        with pytest.raises(TrainingError, match="temperature"):
            info_nce(np.eye(2), np.eye(2), 0.0)

    def test_temperature_keeps_argmax(self, unit_rows):
        q, docs = unit_rows(5, 8, 1), unit_rows(5, 8, 2)
        logits = q @ docs.T
        for tau in (0.05, 0.5, 5.0):
            np.testing.assert_array_equal(np.argmax(logits / tau, axis=1), np.argmax(logits, axis=1))


class TestMRLLoss:
    """Test cases for the Matryoshka sum of InfoNCE terms."""

    def test_single_full_dim_equals_info_nce(self, unit_rows):
        q, docs = unit_rows(4, 8, 3), unit_rows(4, 8, 4)
        assert mrl_loss(q, docs, LossConfig(0.1, (8,))).loss == info_nce(q, docs, 0.1).loss

    def test_matches_per_dim_reference(self, unit_rows):
        q, docs = unit_rows(6, 8, 5), unit_rows(6, 8, 6)
        cfg = LossConfig(0.05, (2, 4, 8))
        expected = 0.0
        for d in cfg.dims:
            qp = q[:, :d] / np.linalg.norm(q[:, :d], axis=1, keepdims=True)
            dp = docs[:, :d] / np.linalg.norm(docs[:, :d], axis=1, keepdims=True)
            expected += info_nce(qp, dp, 0.05).loss
        result = mrl_loss(q, docs, cfg)
        assert result.loss == pytest.approx(expected, rel=1e-12)
        assert result.loss >= max(result.per_dim.values())

    def test_dims_wider_than_embedding(self, unit_rows):
        with pytest.raises(TrainingError, match="exceed"):
            mrl_loss(unit_rows(2, 4), unit_rows(2, 4), LossConfig(0.1, (2, 8)))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed, unit_rows):
        cfg = LossConfig(0.2, (2, 4, 8))

        def f(p):
            r = mrl_loss(p["q"], p["docs"], cfg)
            return r.loss, r.gradients

        assert grad_check(f, {"q": unit_rows(4, 8, seed), "docs": unit_rows(4, 8, seed + 50)}) < 1e-4


class TestQueryAlignmentLoss:
    """Test cases for the cosine-plus-L1 alignment loss."""

    def test_equal_inputs(self):
        assert query_alignment_loss([[0.6, 0.8]], [[0.6, 0.8]]).loss == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        assert query_alignment_loss([[1.0, 0.0]], [[0.0, 1.0]]).loss == pytest.approx(2.0)

    def test_opposite(self):
        assert query_alignment_loss([[-1.0, 0.0]], [[1.0, 0.0]]).loss == pytest.approx(3.0)

    def test_zero_row_rejected(self):
        with pytest.raises(TrainingError, match="zero norm"):
            query_alignment_loss([[0.0, 0.0]], [[1.0, 0.0]])

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)

        def f(p):
            r = query_alignment_loss(p["speech"], p["text"])
            return r.loss, r.gradients

        params = {"speech": rng.standard_normal((3, 4)), "text": rng.standard_normal((3, 4))}
        assert grad_check(f, params) < 1e-4


class TestEncoderLossGradients:
    """Batch losses checked against central differences through the encoders."""

    CHECKED = {
        "text-only": ("text.b0.b1", "text.out"),
        "late-fusion": ("frontend.conv_bias", "frontend.proj"),
        "dual-retrieval": ("pooler.q", "head.2", "frontend.proj"),
        "dual-alignment": ("pooler.q", "head.4"),
    }

    @pytest.mark.parametrize("variant", sorted(CHECKED))
    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, variant, seed, small_corpus, small_model_config, text_params):
        params = init_params(variant, small_model_config, seed, text_params=None if variant == "text-only" else text_params)
        picks = np.random.default_rng(seed).choice(len(small_corpus), size=4, replace=False)
        batch = [small_corpus[int(i)] for i in picks]
        objective = "query-alignment" if variant == "dual-alignment" else "retrieval"
        cfg = LossConfig(0.5, small_model_config.dims, objective)
        names = self.CHECKED[variant]

        def f(p):
            r = encoder_loss(variant, small_model_config, {**params, **p}, batch, cfg, names=names)
            return r.loss, r.gradients

        assert grad_check(f, {n: params[n] for n in names}) < 1e-4

    def test_only_named_parameters_get_gradients(self, small_corpus, small_model_config, text_params):
        params = init_params("dual-retrieval", small_model_config, 0, text_params=text_params)
        result = encoder_loss("dual-retrieval", small_model_config, params, small_corpus[:4],
                              LossConfig(0.5, small_model_config.dims), names=("head.8",))
        assert sorted(result.gradients) == ["head.8"]
        assert sorted(result.per_dim) == [2, 4, 8]


class TestContrastivePairLoss:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed, unit_rows):
        labels = [1.0, 0.0, 0.0, 1.0]

        def f(p):
            r = contrastive_pair_loss(p["a"], p["b"], labels, (2, 4))
            return r.loss, r.gradients

        assert grad_check(f, {"a": unit_rows(4, 4, seed), "b": unit_rows(4, 4, seed + 70)}) < 1e-4

    def test_label_count_mismatch(self, unit_rows):
        with pytest.raises(TrainingError, match="labels"):
            contrastive_pair_loss(unit_rows(2, 4), unit_rows(2, 4), [1.0], (4,))


class TestSampler:
    """Test cases for batch construction."""

    def test_no_duplicate_documents(self, small_corpus):
        doubled = list(small_corpus) + list(small_corpus[:4])
        for batch in Sampler(4, seed=1).batches(doubled):
            ids = [e.document_id for e in batch]
            assert len(ids) == len(set(ids))
            assert len(batch) >= 2

    def test_seeded_order(self, small_corpus):
        first = [[e.example_id for e in b] for b in Sampler(4, 9).batches(small_corpus, 0)]
        second = [[e.example_id for e in b] for b in Sampler(4, 9).batches(small_corpus, 0)]
        assert first == second

    def test_batch_size_one_rejected(self):
        with pytest.raises(TrainingError, match="batch_size"):
            Sampler(1, 0)


class TestTrain:
    """Test cases for the training loop."""

    def test_sgd_step_respects_freeze(self):
        params = {"text.w": np.ones((1, 1)), "frontend.w": np.ones((1, 1))}
        grads = {"text.w": np.ones((1, 1)), "frontend.w": np.ones((1, 1))}
        updated = sgd_step(params, grads, 0.5, lambda name: name.startswith("frontend."))
        np.testing.assert_array_equal(updated["text.w"], [[1.0]])
        np.testing.assert_array_equal(updated["frontend.w"], [[0.5]])

    def test_zero_learning_rate_keeps_weights(self, small_corpus, small_model_config, text_params):
        result = train("text-only", small_corpus, TrainRunConfig(epochs=1, batch_size=4, learning_rate=0.0, max_length=32),
                       LossConfig(0.1, small_model_config.dims), small_model_config, text_params)
        assert param_digest(result.params) == param_digest(text_params)
        assert result.curve

    def test_fixed_seed_reproducible(self, small_corpus, small_model_config, text_params, tmp_path):
        run = TrainRunConfig(epochs=1, batch_size=4, learning_rate=0.1, max_length=32)
        loss = LossConfig(0.1, small_model_config.dims)
        a = train("text-only", small_corpus, run, loss, small_model_config, text_params, curve_path=tmp_path / "a.jsonl")
        b = train("text-only", small_corpus, run, loss, small_model_config, text_params, curve_path=tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert param_digest(a.params) == param_digest(b.params)
        record = read_curve(tmp_path / "a.jsonl")[0]
        assert set(record) == {"step", "epoch", "per_dim", "total", "batch_ids"}
        assert sorted(record["per_dim"]) == ["2", "4", "8"]

    def test_late_fusion_freezes_text_encoder(self, small_corpus, small_model_config, text_params):
        params = init_params("late-fusion", small_model_config, 1, text_params=text_params)
        result = train("late-fusion", small_corpus, TrainRunConfig(epochs=1, batch_size=4, learning_rate=0.1, max_length=32),
                       LossConfig(0.1, small_model_config.dims), small_model_config, params)
        assert param_digest(result.params, "text.") == param_digest(text_params, "text.")
        assert param_digest(result.params, "frontend.") != param_digest(params, "frontend.")

    def test_wrong_objective(self, small_corpus, small_model_config, text_params):
        params = init_params("dual-alignment", small_model_config, 1, text_params=text_params)
        with pytest.raises(TrainingError, match="query-alignment"):
            train("dual-alignment", small_corpus, TrainRunConfig(batch_size=4), LossConfig(0.1, small_model_config.dims),
                  small_model_config, params)

    def test_empty_data(self, small_model_config, text_params):
        with pytest.raises(TrainingError, match="empty"):
            train("text-only", [], TrainRunConfig(), LossConfig(0.1, small_model_config.dims), small_model_config, text_params)

    def test_dual_alignment_runs(self, small_corpus, small_model_config, text_params):
        params = init_params("dual-alignment", small_model_config, 1, text_params=text_params)
        loss = LossConfig(0.1, small_model_config.dims, objective="query-alignment")
        before = batch_mrl_loss("dual-alignment", small_model_config, params, small_corpus, loss)
        result = train("dual-alignment", small_corpus, TrainRunConfig(epochs=2, batch_size=6, learning_rate=0.05, max_length=32),
                       loss, small_model_config, params)
        assert math.isfinite(before)
        assert all(math.isfinite(r["total"]) for r in result.curve)

    def test_late_fusion_loss_decreases(self, small_corpus, small_model_config, text_params):
        params = init_params("late-fusion", small_model_config, 1, text_params=text_params)
        loss = LossConfig(0.5, small_model_config.dims)
        before = batch_mrl_loss("late-fusion", small_model_config, params, small_corpus, loss)
        run = TrainRunConfig(epochs=10, batch_size=len(small_corpus), learning_rate=0.02, max_length=32)
        result = train("late-fusion", small_corpus, run, loss, small_model_config, params)
        after = batch_mrl_loss("late-fusion", small_model_config, result.params, small_corpus, loss)
        assert len(result.curve) == 10
        assert after < before

    def test_trained_model_separates_prompts(self, small_corpus, small_model_config, text_params):
        loss = LossConfig(0.5, small_model_config.dims)
        text = train("text-only", small_corpus, TrainRunConfig(epochs=2, batch_size=6, learning_rate=0.05, max_length=32),
                     loss, small_model_config, text_params)
        params = init_params("late-fusion", small_model_config, 1, text_params=text.params)
        speech = train("late-fusion", small_corpus, TrainRunConfig(epochs=2, batch_size=6, learning_rate=0.05, max_length=32),
                       loss, small_model_config, params)
        model = LateFusionModel(small_model_config, speech.params)
        frames = small_corpus[0].query_frames
        vectors = [model.encode_speech_late_fusion(frames, prompt) for prompt in TASK_PROMPTS.values()]
        for i in range(len(vectors)):
            for j in range(i + 1, len(vectors)):
                assert float(vectors[i] @ vectors[j]) < 1 - 1e-6


class TestSetFit:
    """Test cases for few-shot pairs and the two-stage classifier."""

    def test_two_classes_one_shot(self, small_intents):
        by_class = {}
        for e in small_intents.examples:
            by_class.setdefault(e.intent, e)
        shots = [by_class[0], by_class[1]]
        pairs = setfit_pairs(shots, 1)
        assert len(pairs.negatives) == 1
        assert pairs.positives == []

    def test_ten_classes_two_shots(self, small_intents):
        template = small_intents.examples[0]
        shots = []
        for c in range(10):
            for j in range(2):
                shots.append(replace(template, example_id=2 * c + j, intent=c))
        pairs = setfit_pairs(shots, 2)
        assert len(pairs.negatives) == 180
        assert len(pairs.positives) == 10

    def test_single_class_rejected(self, small_intents):
        shots = [e for e in small_intents.examples if e.intent == 0][:2]
        with pytest.raises(TrainingError, match="at least 2 classes"):
            setfit_pairs(shots, 2)

    def test_missing_class_rejected(self, small_intents):
        shots = [e for e in small_intents.examples if e.intent in (0, 1)]
        with pytest.raises(TrainingError, match="no examples"):
            setfit_pairs(shots, 1, classes=[0, 1, 2])

    def test_zero_shot_classifier(self, small_intents, small_model_config, text_params):
        params = init_params("late-fusion", small_model_config, 1, text_params=text_params)
        classifier = setfit_train("late-fusion", small_model_config, params, [], FewShotConfig(n_shot=0), small_intents.labels)
        assert classifier.heads is None
        assert classifier.predict(small_intents.examples[0].query_frames, 8) in small_intents.labels

    def test_few_shot_fits_training_shots(self, small_intents, small_model_config, text_params):
        params = init_params("dual-retrieval", small_model_config, 1, text_params=text_params)
        cfg = FewShotConfig(n_shot=2, epochs=1, batch_size=8, learning_rate=0.01, regularization=1e4)
        classifier = setfit_train("dual-retrieval", small_model_config, params, small_intents.examples, cfg, small_intents.labels)
        assert classifier.heads is not None and sorted(classifier.heads) == [2, 4, 8]
        shots = [e for e in small_intents.examples if e.example_id % 6 < 2]
        predictions = classifier.predict_embedded([classifier.embed(e.query_frames) for e in shots], 8)
        assert predictions == [e.intent for e in shots]
