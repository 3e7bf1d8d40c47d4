"""Retrieval, keyword-spotting and intent evaluation plus the energy-ratio rank analysis."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import f1_score, recall_score

import mat_index
from model_zoo import TASK_PROMPTS, DualModel, LateFusionModel, ModelConfig, Params, TextModel, slice_prefix
from numeric_core import as_matrix, sym_eigenvalues
from synth_data import IntentCorpus, KeywordSet, PairedExample, corrupt_transcription
from training import FEW_SHOT_SIZES, FewShotConfig, setfit_train

logger = logging.getLogger(__name__)

Judgments = Dict[int, Dict[int, int]]
EIGEN_NEGATIVE_TOLERANCE = 1e-9
AVERAGING = "macro"


class EvaluationError(ValueError):
    """Raised for evaluation requests that cannot be scored."""


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _dcg(grades: Sequence[int]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg_at_k(ranking: Sequence[int], judgments: Dict[int, int], k: int) -> float:
    """Linear-gain nDCG@k; 0 when nothing is relevant."""
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    if not ranking:
        logger.warning("nDCG over an empty ranking is 0")
        return 0.0
    ideal = _dcg(sorted(judgments.values(), reverse=True)[:k])
    if ideal == 0:
        return 0.0
    return _dcg([judgments.get(doc, 0) for doc in list(ranking)[:k]]) / ideal


def macro_f1_recall(y_true: Sequence[int], y_pred: Sequence[int]) -> Tuple[float, float]:
    if len(y_true) != len(y_pred) or not y_true:
        raise EvaluationError("need equally long, nonempty label lists")
    f1 = f1_score(y_true, y_pred, average=AVERAGING, zero_division=0)
    recall = recall_score(y_true, y_pred, average=AVERAGING, zero_division=0)
    return float(f1), float(recall)


def judgments_for(examples: Sequence[PairedExample]) -> Judgments:
    return {e.example_id: {e.document_id: e.relevance} for e in examples}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Metric values keyed by ``(task, dim, metric)``."""
    metadata: Dict[str, Any] = field(default_factory=dict)
    values: Dict[Tuple[str, int, str], float] = field(default_factory=dict)

    def add(self, task: str, dim: int, metric: str, value: float) -> None:
        self.values[(task, int(dim), metric)] = float(value)

    def get(self, task: str, dim: int, metric: str) -> float:
        try:
            return self.values[(task, int(dim), metric)]
        except KeyError:
            raise EvaluationError(f"report has no value for task={task} dim={dim} metric={metric}")

    def merge(self, other: "EvalReport") -> "EvalReport":
        self.values.update(other.values)
        self.metadata.update(other.metadata)
        return self

    @property
    def tasks(self) -> List[str]:
        return sorted({task for task, _, _ in self.values})

    def dims(self, task: str) -> List[int]:
        return sorted({dim for t, dim, _ in self.values if t == task})

    def check_complete(self, dims: Sequence[int]) -> None:
        for task in self.tasks:
            missing = sorted(set(dims) - set(self.dims(task)))
            if missing:
                raise EvaluationError(f"task {task} is missing dims {missing}")

    def records(self) -> List[Dict[str, Any]]:
        return [
            {"task": task, "dim": dim, "metric": metric, "value": value}
            for (task, dim, metric), value in sorted(self.values.items())
        ]

    def to_lines(self) -> List[str]:
        lines = [json.dumps({"metadata": self.metadata}, sort_keys=True)]
        lines.extend(json.dumps(r, sort_keys=True) for r in self.records())
        return lines

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "EvalReport":
        lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        if not lines or "metadata" not in json.loads(lines[0]):
            raise EvaluationError(f"{path} does not start with a metadata record")
        report = cls(metadata=json.loads(lines[0])["metadata"])
        for line in lines[1:]:
            record = json.loads(line)
            report.add(record["task"], record["dim"], record["metric"], record["value"])
        return report

    def to_matrix_tsv(self, path: Union[str, Path], metric: str, tasks: Optional[Sequence[str]] = None) -> Path:
        """One row per task, one column per dim."""
        tasks = list(tasks) if tasks is not None else [t for t in self.tasks if any(m == metric for tt, _, m in self.values if tt == t)]
        dims = sorted({dim for t, dim, m in self.values if m == metric and t in tasks})
        rows = ["task\t" + "\t".join(str(d) for d in dims)]
        for task in tasks:
            cells = [f"{self.values[(task, d, metric)]:.6f}" if (task, d, metric) in self.values else "" for d in dims]
            rows.append(task + "\t" + "\t".join(cells))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# encoders seen by the evaluators
# ---------------------------------------------------------------------------

class QueryEncoder(Protocol):
    d_max: int

    def encode_queries(self, examples: Sequence[PairedExample], task: str, dim: int) -> np.ndarray: ...

    def encode_texts(self, sequences: Sequence[Sequence[int]]) -> np.ndarray: ...


class TextQueryEncoder:
    """Text-only model reading the written query."""

    def __init__(self, model: TextModel) -> None:
        self.model = model
        self.d_max = model.config.d_max

    def query_tokens(self, example: PairedExample) -> List[int]:
        return example.query_tokens

    def encode_queries(self, examples: Sequence[PairedExample], task: str, dim: int) -> np.ndarray:
        return np.vstack([self.model.encode_text(self.query_tokens(e), TASK_PROMPTS[task]) for e in examples])

    def encode_texts(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        return self.model.encode_texts(sequences)


class PipelinedQueryEncoder(TextQueryEncoder):
    """Text-only model reading a noisy transcription of the spoken query."""

    def __init__(self, model: TextModel, rate: float, seed: int) -> None:
        super().__init__(model)
        self.rate = rate
        self.seed = seed

    def query_tokens(self, example: PairedExample) -> List[int]:
        return corrupt_transcription(example.transcription_tokens, self.rate, self.seed + example.example_id, self.model.config.vocab_size)


class LateFusionQueryEncoder:
    def __init__(self, model: LateFusionModel) -> None:
        self.model = model
        self.d_max = model.config.d_max

    def encode_queries(self, examples: Sequence[PairedExample], task: str, dim: int) -> np.ndarray:
        return np.vstack([self.model.encode_speech_late_fusion(e.query_frames, TASK_PROMPTS[task]) for e in examples])

    def encode_texts(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        return self.model.encode_texts(sequences)


class DualQueryEncoder:
    """Per-dim head outputs, zero-padded to ``d_max`` so a prefix search returns the head vector.

    Every head is computed in one pass per example and kept for later dims.
    """

    def __init__(self, model: DualModel) -> None:
        self.model = model
        self.d_max = model.config.d_max
        # keyed by id(); the stored example keeps that id from being reused
        self._heads: Dict[int, Tuple[PairedExample, Dict[int, np.ndarray]]] = {}

    def heads(self, example: PairedExample) -> Dict[int, np.ndarray]:
        cached = self._heads.get(id(example))
        if cached is None or cached[0] is not example:
            cached = (example, self.model.encode_speech_dual(example.query_frames))
            self._heads[id(example)] = cached
        return cached[1]

    def encode_queries(self, examples: Sequence[PairedExample], task: str, dim: int) -> np.ndarray:
        rows = np.zeros((len(examples), self.d_max))
        for i, e in enumerate(examples):
            rows[i, :dim] = self.heads(e)[dim]
        return rows

    def encode_texts(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        return self.model.encode_texts(sequences)


class OracleEncoder:
    """A fixed random unit vector per token sequence; a query maps to its own target's vector."""

    def __init__(self, d_max: int, seed: int = 0) -> None:
        self.d_max = d_max
        self.seed = seed

    def _vector(self, tokens: Sequence[int]) -> np.ndarray:
        v = np.random.default_rng([self.seed, *[int(t) for t in tokens]]).standard_normal(self.d_max)
        return v / np.linalg.norm(v)

    def encode_queries(self, examples: Sequence[PairedExample], task: str, dim: int) -> np.ndarray:
        return self.encode_texts([e.target_tokens(task) for e in examples])

    def encode_texts(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        if not sequences:
            return np.zeros((0, self.d_max))
        return np.vstack([self._vector(s) for s in sequences])


def encoder_for(variant: str, model_config: ModelConfig, params: Params) -> QueryEncoder:
    if variant == "text-only":
        return TextQueryEncoder(TextModel(model_config, params))
    if variant == "late-fusion":
        return LateFusionQueryEncoder(LateFusionModel(model_config, params))
    if variant in ("dual-retrieval", "dual-alignment"):
        return DualQueryEncoder(DualModel(model_config, params))
    raise EvaluationError(f"unknown model variant '{variant}'")


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def build_document_shard(encoder: QueryEncoder, examples: Sequence[PairedExample], task: str,
                         dims: Sequence[int], created_at: int = 0) -> mat_index.IndexShard:
    docs: Dict[int, Sequence[int]] = {}
    for e in examples:
        docs.setdefault(e.document_id, e.target_tokens(task))
    ids = sorted(docs)
    vectors = encoder.encode_texts([docs[i] for i in ids])
    return mat_index.build(zip(ids, vectors), dims, d_max=encoder.d_max, created_at=created_at)


def eval_retrieval(encoder: QueryEncoder, examples: Sequence[PairedExample], judgments: Optional[Judgments],
                   dims: Sequence[int], k_list: Sequence[int] = (5, 10), task: str = "document-retrieval",
                   label: Optional[str] = None, shard: Optional[mat_index.IndexShard] = None) -> EvalReport:
    """Mean nDCG@k per dim; queries without judgments are skipped."""
    if not examples:
        raise EvaluationError("retrieval evaluation needs at least one query")
    judgments = judgments if judgments is not None else judgments_for(examples)
    shard = shard or build_document_shard(encoder, examples, task, dims)
    label = label or task
    scored = [e for e in examples if any(g > 0 for g in judgments.get(e.example_id, {}).values())]
    skipped = len(examples) - len(scored)
    if skipped:
        logger.warning(f"Skipped {skipped} queries without positive judgments")
    if not scored:
        raise EvaluationError("no query has a positive judgment")

    report = EvalReport(metadata={"averaging": AVERAGING})
    depth = max(k_list)
    for dim in dims:
        queries = encoder.encode_queries(scored, task, dim)
        totals = {k: 0.0 for k in k_list}
        for example, query in zip(scored, queries):
            ranking = mat_index.search(shard, query, dim, depth).ids
            for k in k_list:
                totals[k] += ndcg_at_k(ranking, judgments[example.example_id], k)
        for k in k_list:
            report.add(label, dim, f"ndcg@{k}", totals[k] / len(scored))
    logger.debug(f"Retrieval {label}: " + ", ".join(f"{d}={report.get(label, d, f'ndcg@{k_list[0]}'):.3f}" for d in dims))
    return report


def eval_pipelined(text_model: TextModel, examples: Sequence[PairedExample], judgments: Optional[Judgments],
                   dims: Sequence[int], rate: float, seed: int = 0, k_list: Sequence[int] = (5, 10),
                   task: str = "document-retrieval") -> EvalReport:
    """Retrieval with corrupted transcriptions read by the text-only model."""
    encoder = PipelinedQueryEncoder(text_model, rate, seed)
    return eval_retrieval(encoder, examples, judgments, dims, k_list, task, label=f"pipelined-{task}")


def _classify(vectors: np.ndarray, references: np.ndarray, dim: int, dims: Sequence[int]) -> np.ndarray:
    q = np.vstack([slice_prefix(v, dim, dims) for v in vectors])
    r = np.vstack([slice_prefix(v, dim, dims) for v in references])
    return np.argmax(q @ r.T, axis=1)


def eval_keyword_spotting(encoder: QueryEncoder, keywords: KeywordSet, dims: Sequence[int],
                          prompt: str = "transcription-retrieval", label: str = "kws") -> EvalReport:
    """Nearest-keyword classification of spoken queries; macro F1 and recall per dim."""
    if not keywords.keywords:
        raise EvaluationError("keyword set is empty")
    if len(keywords.keywords) < 2:
        raise EvaluationError("keyword spotting needs at least 2 keywords")
    if not keywords.queries:
        raise EvaluationError("keyword set has no spoken queries")
    references = encoder.encode_texts(keywords.keywords)
    y_true = [int(q.intent) for q in keywords.queries if q.intent is not None]
    report = EvalReport(metadata={"averaging": AVERAGING})
    for dim in dims:
        vectors = encoder.encode_queries(keywords.queries, prompt, dim)
        y_pred = [int(i) for i in _classify(vectors, references, dim, dims)]
        f1, recall = macro_f1_recall(y_true, y_pred)
        report.add(label, dim, "f1", f1)
        report.add(label, dim, "recall", recall)
    return report


def eval_prompt_ablation(encoder: LateFusionQueryEncoder, examples: Sequence[PairedExample], keywords: KeywordSet,
                         dims: Sequence[int], k: int = 5) -> EvalReport:
    """Each task prompt applied to document retrieval and to keyword spotting."""
    report = EvalReport(metadata={"averaging": AVERAGING})
    shard = build_document_shard(encoder, examples, "document-retrieval", dims)
    judgments = judgments_for(examples)
    for prompt in TASK_PROMPTS:
        prompted = _PromptOverride(encoder, prompt)
        report.merge(eval_retrieval(prompted, examples, judgments, dims, (k,), "document-retrieval",
                                    label=f"prompt={prompt}/retrieval", shard=shard))
        report.merge(eval_keyword_spotting(encoder, keywords, dims, prompt=prompt, label=f"prompt={prompt}/kws"))
    return report


class _PromptOverride:
    def __init__(self, inner: QueryEncoder, prompt: str) -> None:
        self.inner = inner
        self.prompt = prompt
        self.d_max = inner.d_max

    def encode_queries(self, examples: Sequence[PairedExample], task: str, dim: int) -> np.ndarray:
        return self.inner.encode_queries(examples, self.prompt, dim)

    def encode_texts(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        return self.inner.encode_texts(sequences)


def eval_quality_gap(encoder: QueryEncoder, clean: Sequence[PairedExample], degraded: Sequence[PairedExample],
                     dims: Sequence[int], k: int = 5) -> EvalReport:
    """Document retrieval on clean versus hesitant/quiet speech over the same documents."""
    metric = f"ndcg@{k}"
    report = eval_retrieval(encoder, clean, None, dims, (k,), label="quality-clean")
    report.merge(eval_retrieval(encoder, degraded, None, dims, (k,), label="quality-degraded"))
    for dim in dims:
        report.add("quality-gap", dim, metric,
                   report.get("quality-clean", dim, metric) - report.get("quality-degraded", dim, metric))
    return report


# ---------------------------------------------------------------------------
# few-shot intents
# ---------------------------------------------------------------------------

def split_shots(examples: Sequence[PairedExample], pool: int) -> Tuple[List[PairedExample], List[PairedExample]]:
    """First ``pool`` examples per class become the shot pool, the rest the test set."""
    counts: Dict[int, int] = {}
    shots, test = [], []
    for e in examples:
        if e.intent is None:
            raise EvaluationError(f"example {e.example_id} has no intent label")
        if counts.get(e.intent, 0) < pool:
            counts[e.intent] = counts.get(e.intent, 0) + 1
            shots.append(e)
        else:
            test.append(e)
    return shots, test


def eval_intent_fewshot(variant: str, model_config: ModelConfig, params: Params, intents: IntentCorpus,
                        n_shots: Sequence[int], dims: Sequence[int], base: Optional[FewShotConfig] = None) -> EvalReport:
    """Macro F1 and recall per (n, dim) on held-out intent queries."""
    if len(intents.labels) < 2:
        raise EvaluationError("intent evaluation needs at least 2 classes")
    base = base or FewShotConfig()
    pool = max(n_shots)
    per_class: Dict[int, int] = {}
    for e in intents.examples:
        if e.intent is not None:
            per_class[e.intent] = per_class.get(e.intent, 0) + 1
    if pool >= min(per_class.values()):
        raise EvaluationError(f"n-shot {pool} leaves no test queries for a class with {min(per_class.values())} examples")
    shots, test = split_shots(intents.examples, pool)
    y_true = [int(e.intent) for e in test if e.intent is not None]

    report = EvalReport(metadata={"averaging": AVERAGING, "classes": len(intents.labels), "test_queries": len(test)})
    for n in n_shots:
        if n not in FEW_SHOT_SIZES:
            raise EvaluationError(f"n-shot {n} is not one of {list(FEW_SHOT_SIZES)}")
        cfg = FewShotConfig(n_shot=n, epochs=base.epochs, batch_size=base.batch_size, learning_rate=base.learning_rate,
                            max_pairs=base.max_pairs, seed=base.seed, prompt=base.prompt,
                            regularization=base.regularization, max_iter=base.max_iter)
        classifier = setfit_train(variant, model_config, params, shots, cfg, intents.labels)
        vectors = [classifier.embed(e.query_frames) for e in test]
        for dim in dims:
            f1, recall = macro_f1_recall(y_true, classifier.predict_embedded(vectors, dim))
            report.add(f"intent-{n}shot", dim, "f1", f1)
            report.add(f"intent-{n}shot", dim, "recall", recall)
        logger.info(f"📊 intent {n}-shot: recall@{dims[-1]} = {report.get(f'intent-{n}shot', dims[-1], 'recall'):.3f}")
    return report


# ---------------------------------------------------------------------------
# energy ratio
# ---------------------------------------------------------------------------

@dataclass
class EnergyCurve:
    """``ratios[k - 1]`` is the share of variance in the top ``k`` eigenvalues."""
    dim: int
    ratios: np.ndarray
    source: str = "documents"

    def at(self, k: int) -> float:
        return float(self.ratios[k - 1])


def energy_curve(embeddings: np.ndarray, dim: int, source: str = "documents", centered: bool = True) -> EnergyCurve:
    x = as_matrix(embeddings, "embeddings")
    if dim < 1 or dim > x.shape[1]:
        raise EvaluationError(f"dim {dim} outside 1..{x.shape[1]}")
    if x.shape[0] < dim + 1:
        raise EvaluationError(f"energy curve at dim {dim} needs at least {dim + 1} rows, got {x.shape[0]}")
    prefix = x[:, :dim].copy()
    if centered:
        prefix = prefix - prefix.mean(axis=0, keepdims=True)
    cov = prefix.T @ prefix / (prefix.shape[0] - 1)
    eigenvalues = sym_eigenvalues(cov)
    if eigenvalues.min() < -EIGEN_NEGATIVE_TOLERANCE:
        raise EvaluationError(f"covariance has a negative eigenvalue {eigenvalues.min():.3e}")
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    total = eigenvalues.sum()
    if total <= 0:
        raise EvaluationError("embeddings have zero variance")
    ratios = np.cumsum(eigenvalues) / total
    ratios[-1] = 1.0 if abs(ratios[-1] - 1.0) <= EIGEN_NEGATIVE_TOLERANCE else ratios[-1]
    return EnergyCurve(dim=dim, ratios=ratios, source=source)


def dims_for_energy(curve: EnergyCurve, ratio: float) -> float:
    """Smallest ``k / d`` whose cumulative ratio reaches ``ratio``."""
    if not 0.0 < ratio <= 1.0:
        raise EvaluationError(f"ratio must be in (0, 1], got {ratio}")
    reached = np.flatnonzero(curve.ratios >= ratio - EIGEN_NEGATIVE_TOLERANCE)
    k = int(reached[0]) + 1 if reached.size else curve.dim
    return k / curve.dim


def energy_curves(queries: np.ndarray, documents: np.ndarray, dims: Sequence[int],
                  centered: bool = True) -> List[EnergyCurve]:
    """Curves for query, document and pooled embeddings at every dim."""
    sources = {"queries": queries, "documents": documents, "pooled": np.vstack([queries, documents])}
    return [energy_curve(matrix, dim, source, centered) for source, matrix in sources.items() for dim in dims]
