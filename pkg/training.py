"""Contrastive losses, the SGD training loop and few-shot adaptation.

Losses are written once against ``autograd`` tensors and exposed twice: as
tensor builders used inside the training loop, and as plain functions over
matrices returning a ``LossResult`` (used by tests and gradient checks).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.linear_model import LogisticRegression

import autograd as ag
from autograd import Tensor
from model_zoo import (
    TASK_PROMPTS,
    Bound,
    DualModel,
    LateFusionModel,
    Model,
    ModelConfig,
    Params,
    TextModel,
    bind,
    build_model,
    collect_gradients,
    prefix_tensor,
    save_checkpoint,
    slice_prefix,
    trainable_filter,
)
from numeric_core import as_matrix
from synth_data import PairedExample

logger = logging.getLogger(__name__)

OBJECTIVES = ("retrieval", "query-alignment")
FEW_SHOT_SIZES = (0, 1, 2, 4, 8, 16)


class TrainingError(ValueError):
    """Raised for bad training inputs and for divergence during a run."""

    def __init__(self, message: str, step: Optional[int] = None, batch_ids: Optional[Sequence[int]] = None) -> None:
        super().__init__(message)
        self.step = step
        self.batch_ids = list(batch_ids) if batch_ids is not None else None


class LossResult(NamedTuple):
    loss: float
    gradients: Dict[str, np.ndarray]
    warnings: List[str]
    per_dim: Dict[int, float]


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    dims: Tuple[int, ...] = (8, 16, 32, 64)
    objective: str = "retrieval"
    normalize_prefix: bool = True

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise TrainingError(f"temperature must be > 0, got {self.temperature}")
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise TrainingError("loss dims must not be empty")
        object.__setattr__(self, "dims", dims)
        if self.objective not in OBJECTIVES:
            raise TrainingError(f"unknown objective '{self.objective}'; expected one of {list(OBJECTIVES)}")


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 0.05
    max_length: int = 64
    seed: int = 11
    trainable: Optional[Callable[[str], bool]] = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise TrainingError(f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise TrainingError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")


@dataclass(frozen=True)
class FewShotConfig:
    n_shot: int = 8
    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 0.05
    max_pairs: int = 2000
    seed: int = 13
    prompt: str = "document-retrieval"
    regularization: float = 10.0
    max_iter: int = 2000

    def __post_init__(self) -> None:
        if self.n_shot not in FEW_SHOT_SIZES:
            raise TrainingError(f"n_shot must be one of {list(FEW_SHOT_SIZES)}, got {self.n_shot}")
        if self.batch_size < 1 or self.max_pairs < 1:
            raise TrainingError("batch_size and max_pairs must be positive")
        if self.prompt not in TASK_PROMPTS:
            raise TrainingError(f"unknown prompt '{self.prompt}'")


# ---------------------------------------------------------------------------
# losses on tensors
# ---------------------------------------------------------------------------

def info_nce_tensor(q: Tensor, docs: Tensor, temperature: float) -> Tensor:
    n = q.shape[0]
    logits = ag.scale(ag.matmul(q, ag.transpose(docs)), 1.0 / temperature)
    return ag.scale(ag.sum_all(ag.diagonal(ag.log_softmax_rows(logits))), -1.0 / n)


def _prefix(e: Tensor, d: int, normalize: bool) -> Tensor:
    # full-width rows are already unit norm
    if d == e.shape[1]:
        return e
    return prefix_tensor(e, d, normalize)


def mrl_tensor(q: Tensor, docs: Tensor, cfg: LossConfig) -> Tuple[Tensor, Dict[int, Tensor]]:
    terms = {
        d: info_nce_tensor(_prefix(q, d, cfg.normalize_prefix), _prefix(docs, d, cfg.normalize_prefix), cfg.temperature)
        for d in cfg.dims
    }
    return _sum_terms(list(terms.values())), terms


def alignment_tensor(speech: Tensor, text: Tensor) -> Tensor:
    """Mean over rows of ``(1 - cos) + mean |s - t|``."""
    cos = ag.sum_rows(ag.mul(ag.l2_normalize_rows(speech), ag.l2_normalize_rows(text)))
    return ag.add(ag.sub(ag.constant(np.ones((1, 1))), ag.mean_all(cos)), ag.mean_all(ag.absolute(ag.sub(speech, text))))


def pair_tensor(a: Tensor, b: Tensor, labels: np.ndarray, dims: Sequence[int], normalize: bool = True) -> Tensor:
    """Squared error between prefix cosine and pair label, summed over dims, mean over pairs."""
    target = ag.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    terms = []
    for d in dims:
        cos = ag.sum_rows(ag.mul(_prefix(a, d, normalize), _prefix(b, d, normalize)))
        err = ag.sub(cos, target)
        terms.append(ag.mean_all(ag.mul(err, err)))
    return _sum_terms(terms)


def _sum_terms(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = ag.add(total, term)
    return total


# ---------------------------------------------------------------------------
# losses on matrices
# ---------------------------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray, names: Tuple[str, str]) -> Tuple[np.ndarray, np.ndarray]:
    a = as_matrix(a, names[0])
    b = as_matrix(b, names[1])
    if a.shape != b.shape:
        raise TrainingError(f"{names[0]} {a.shape} and {names[1]} {b.shape} must have matching shapes")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise TrainingError("loss needs at least one nonempty row")
    return a, b


def _degenerate_warning(n: int) -> List[str]:
    if n != 1:
        return []
    warning = "degenerate batch of one pair: InfoNCE has no negatives and is exactly 0"
    logger.warning(warning)
    return [warning]


def info_nce(q: np.ndarray, docs: np.ndarray, temperature: float) -> LossResult:
    """In-batch-negative InfoNCE with gradients for ``q`` and ``docs``."""
    if not temperature > 0:
        raise TrainingError(f"temperature must be > 0, got {temperature}")
    q, docs = _check_pair(q, docs, ("queries", "documents"))
    tq, td = ag.parameter(q, "q"), ag.parameter(docs, "docs")
    loss = info_nce_tensor(tq, td, temperature)
    loss.backward()
    value = loss.item()
    return LossResult(value, {"q": tq.grad, "docs": td.grad}, _degenerate_warning(q.shape[0]), {q.shape[1]: value})


def mrl_loss(q_full: np.ndarray, d_full: np.ndarray, cfg: LossConfig) -> LossResult:
    """Unweighted sum of InfoNCE over re-normalized prefixes."""
    q_full, d_full = _check_pair(q_full, d_full, ("queries", "documents"))
    if max(cfg.dims) > q_full.shape[1]:
        raise TrainingError(f"loss dims {list(cfg.dims)} exceed embedding width {q_full.shape[1]}")
    tq, td = ag.parameter(q_full, "q"), ag.parameter(d_full, "docs")
    total, terms = mrl_tensor(tq, td, cfg)
    total.backward()
    per_dim = {d: t.item() for d, t in terms.items()}
    return LossResult(total.item(), {"q": tq.grad, "docs": td.grad}, _degenerate_warning(q_full.shape[0]), per_dim)


def query_alignment_loss(speech: np.ndarray, text: np.ndarray) -> LossResult:
    speech, text = _check_pair(speech, text, ("speech", "text"))
    for name, m in (("speech", speech), ("text", text)):
        zero = np.flatnonzero(np.linalg.norm(m, axis=1) == 0.0)
        if zero.size:
            raise TrainingError(f"{name} row {int(zero[0])} has zero norm; cosine is undefined")
    ts, tt = ag.parameter(speech, "speech"), ag.parameter(text, "text")
    loss = alignment_tensor(ts, tt)
    loss.backward()
    return LossResult(loss.item(), {"speech": ts.grad, "text": tt.grad}, [], {speech.shape[1]: loss.item()})


def contrastive_pair_loss(a: np.ndarray, b: np.ndarray, labels: Sequence[float], dims: Sequence[int]) -> LossResult:
    a, b = _check_pair(a, b, ("left", "right"))
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.shape[0] != a.shape[0]:
        raise TrainingError(f"{labels.shape[0]} labels for {a.shape[0]} pairs")
    ta, tb = ag.parameter(a, "a"), ag.parameter(b, "b")
    loss = pair_tensor(ta, tb, labels, dims)
    loss.backward()
    return LossResult(loss.item(), {"a": ta.grad, "b": tb.grad}, [], {})


# ---------------------------------------------------------------------------
# batching and optimization
# ---------------------------------------------------------------------------

class Sampler:
    """Seeded shuffling into batches without repeated document ids.

    An example whose document already sits in the current batch is deferred
    to the next one. A trailing batch with a single example is dropped since
    it carries no negatives.
    """

    def __init__(self, batch_size: int, seed: int) -> None:
        if batch_size < 2:
            raise TrainingError(f"batch_size must be >= 2, got {batch_size}")
        self.batch_size = batch_size
        self.seed = seed

    def batches(self, examples: Sequence[PairedExample], epoch: int = 0) -> Iterator[List[PairedExample]]:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(examples))
        pending = [examples[i] for i in order]
        while pending:
            batch: List[PairedExample] = []
            deferred: List[PairedExample] = []
            seen = set()
            rest = pending
            for position, example in enumerate(rest):
                if len(batch) == self.batch_size:
                    deferred.extend(rest[position:])
                    break
                if example.document_id in seen:
                    deferred.append(example)
                    continue
                seen.add(example.document_id)
                batch.append(example)
            pending = deferred
            if len(batch) < 2:
                logger.debug(f"Dropping trailing batch of {len(batch)} example(s)")
                continue
            yield batch


def sgd_step(params: Params, grads: Dict[str, np.ndarray], learning_rate: float,
             trainable: Callable[[str], bool]) -> Params:
    """``p - lr * g`` for trainable names; everything else is returned untouched."""
    updated = dict(params)
    for name, grad in grads.items():
        if name not in params:
            raise TrainingError(f"gradient for unknown parameter '{name}'")
        if trainable(name):
            updated[name] = params[name] - learning_rate * grad
    return updated


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: Params
    curve: List[Dict[str, object]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _target_vectors(model: Model, examples: Sequence[PairedExample], variant: str) -> Dict[int, np.ndarray]:
    """Frozen text-side vectors keyed by example id."""
    if variant == "dual-alignment":
        return {e.example_id: model.encode_text(e.transcription_tokens) for e in examples}
    return {e.example_id: model.encode_text(e.target_tokens()) for e in examples}


def _batch_loss(variant: str, model: Model, bound: Bound, batch: Sequence[PairedExample],
                targets: Optional[Dict[int, np.ndarray]], cfg: LossConfig) -> Tuple[Tensor, Dict[int, Tensor]]:
    if variant == "text-only":
        q = ag.concat_rows([model.text_tensor(bound, e.query_tokens, TASK_PROMPTS[e.task]) for e in batch])
        docs = ag.concat_rows([model.text_tensor(bound, e.target_tokens()) for e in batch])
        return mrl_tensor(q, docs, cfg)

    assert targets is not None
    target_rows = np.vstack([targets[e.example_id] for e in batch])
    if variant == "late-fusion":
        assert isinstance(model, LateFusionModel)
        q = ag.concat_rows([model.speech_tensor(bound, e.query_frames, TASK_PROMPTS[e.task]) for e in batch])
        return mrl_tensor(q, ag.constant(target_rows), cfg)

    assert isinstance(model, DualModel)
    heads = [model.speech_tensors(bound, e.query_frames) for e in batch]
    terms: Dict[int, Tensor] = {}
    for d in cfg.dims:
        speech = ag.concat_rows([h[d] for h in heads])
        text = np.vstack([slice_prefix(row, d, cfg.dims) for row in target_rows])
        if variant == "dual-alignment":
            terms[d] = alignment_tensor(speech, ag.constant(text))
        else:
            terms[d] = info_nce_tensor(speech, ag.constant(text), cfg.temperature)
    return _sum_terms(list(terms.values())), terms


def train(variant: str, examples: Sequence[PairedExample], run: TrainRunConfig, loss: LossConfig,
          model_config: ModelConfig, params: Params,
          curve_path: Optional[Union[str, Path]] = None,
          checkpoint_path: Optional[Union[str, Path]] = None) -> TrainResult:
    """Train ``variant`` starting from ``params``; only trainable names move."""
    if not examples:
        raise TrainingError("training data is empty")
    expected = "query-alignment" if variant == "dual-alignment" else "retrieval"
    if loss.objective != expected:
        raise TrainingError(f"variant '{variant}' trains with the {expected} objective, not {loss.objective}")
    if run.max_length != model_config.max_length:
        logger.warning(f"run max_length {run.max_length} differs from model max_length {model_config.max_length}")

    trainable = run.trainable or trainable_filter(variant)
    model = build_model(variant, model_config, params)
    targets = None if variant == "text-only" else _target_vectors(model, examples, variant)
    sampler = Sampler(run.batch_size, run.seed)
    result = TrainResult(params=dict(params))

    step = 0
    for epoch in range(run.epochs):
        epoch_losses = []
        for batch in sampler.batches(examples, epoch):
            batch_ids = [e.example_id for e in batch]
            model.params = result.params
            bound = bind(result.params, trainable)
            total, terms = _batch_loss(variant, model, bound, batch, targets, loss)
            value = total.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (batch ids {batch_ids})", step, batch_ids)
            total.backward()
            result.params = sgd_step(result.params, collect_gradients(bound), run.learning_rate, trainable)
            record = {
                "step": step,
                "epoch": epoch,
                "per_dim": {str(d): t.item() for d, t in terms.items()},
                "total": value,
                "batch_ids": batch_ids,
            }
            result.curve.append(record)
            epoch_losses.append(value)
            logger.debug(f"{variant} step {step}: loss {value:.4f}")
            step += 1
        if epoch_losses:
            logger.info(f"📊 {variant} epoch {epoch + 1}/{run.epochs}: mean loss {np.mean(epoch_losses):.4f} over {len(epoch_losses)} steps")

    if curve_path is not None:
        write_curve(curve_path, result.curve)
    if checkpoint_path is not None:
        save_checkpoint(result.params, checkpoint_path)
    return result


def write_curve(path: Union[str, Path], curve: Sequence[Dict[str, object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in curve:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_curve(path: Union[str, Path]) -> List[Dict[str, object]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def encoder_loss(variant: str, model_config: ModelConfig, params: Params, examples: Sequence[PairedExample],
                 loss: LossConfig, names: Optional[Sequence[str]] = None) -> LossResult:
    """Training loss of ``examples`` as one batch, from parameters to the loss.

    Gradients cover ``names``, or the variant's trainable parameters when
    ``names`` is None. No update is applied.
    """
    model = build_model(variant, model_config, params)
    targets = None if variant == "text-only" else _target_vectors(model, examples, variant)
    wanted = set(names) if names is not None else None
    trainable = trainable_filter(variant) if wanted is None else (lambda name: name in wanted)
    bound = bind(params, trainable)
    total, terms = _batch_loss(variant, model, bound, examples, targets, loss)
    total.backward()
    warnings = _degenerate_warning(len(examples)) if variant != "dual-alignment" else []
    return LossResult(total.item(), collect_gradients(bound), warnings, {d: t.item() for d, t in terms.items()})


def batch_mrl_loss(variant: str, model_config: ModelConfig, params: Params, examples: Sequence[PairedExample],
                   loss: LossConfig) -> float:
    """Loss of one forward pass over ``examples`` as a single batch; no update."""
    return encoder_loss(variant, model_config, params, examples, loss, names=()).loss


# ---------------------------------------------------------------------------
# few-shot adaptation
# ---------------------------------------------------------------------------

class ContrastivePair(NamedTuple):
    left: int
    right: int
    label: float


class PairSet(NamedTuple):
    positives: List[ContrastivePair]
    negatives: List[ContrastivePair]

    @property
    def all(self) -> List[ContrastivePair]:
        return self.positives + self.negatives


def select_shots(examples: Sequence[PairedExample], n_per_class: int) -> List[PairedExample]:
    """First ``n_per_class`` examples of every intent, in input order."""
    taken: Dict[int, int] = {}
    shots = []
    for example in examples:
        if example.intent is None:
            raise TrainingError(f"example {example.example_id} has no intent label")
        if taken.get(example.intent, 0) < n_per_class:
            taken[example.intent] = taken.get(example.intent, 0) + 1
            shots.append(example)
    short = {c: n for c, n in taken.items() if n < n_per_class}
    if short:
        raise TrainingError(f"n-shot {n_per_class} exceeds available examples for classes {sorted(short)}")
    return shots


def setfit_pairs(shots: Sequence[PairedExample], n_per_class: int,
                 classes: Optional[Sequence[int]] = None) -> PairSet:
    """Unordered pairs over ``shots``: same-class positives and all cross-class negatives.

    Indices refer to positions in ``shots``; only the first ``n_per_class``
    examples of each class are used.
    """
    chosen = select_shots(shots, n_per_class)
    labels = [int(e.intent) for e in chosen if e.intent is not None]
    present = sorted(set(labels))
    if classes is not None:
        empty = sorted(set(classes) - set(present))
        if empty:
            raise TrainingError(f"classes {empty} have no examples")
    if len(present) < 2:
        raise TrainingError(f"few-shot pairs need at least 2 classes, got {len(present)}")
    index = {id(e): i for i, e in enumerate(shots)}
    positions = [index[id(e)] for e in chosen]
    positives, negatives = [], []
    for i in range(len(chosen)):
        for j in range(i + 1, len(chosen)):
            if labels[i] == labels[j]:
                positives.append(ContrastivePair(positions[i], positions[j], 1.0))
            else:
                negatives.append(ContrastivePair(positions[i], positions[j], 0.0))
    return PairSet(positives, negatives)


def speech_prefix_tensors(model: Model, bound: Bound, frames: np.ndarray, prompt: Sequence[int]) -> Dict[int, Tensor]:
    """One unit-norm tensor per Matryoshka dim for a spoken query."""
    if isinstance(model, DualModel):
        return model.speech_tensors(bound, frames)
    if isinstance(model, LateFusionModel):
        e = model.speech_tensor(bound, frames, prompt)
        return {d: _prefix(e, d, model.config.normalize_prefix) for d in model.config.dims}
    raise TrainingError("few-shot adaptation needs a speech model")


class FewShotClassifier:
    """Intent classifier over a (possibly adapted) speech encoder.

    With logistic heads it predicts per dim; without them it falls back to the
    label-similarity argmax.
    """

    def __init__(self, variant: str, model_config: ModelConfig, params: Params, classes: Sequence[int],
                 prompt: Sequence[int], heads: Optional[Dict[int, LogisticRegression]] = None,
                 label_vectors: Optional[np.ndarray] = None) -> None:
        self.variant = variant
        self.model = build_model(variant, model_config, params)
        self.dims = model_config.dims
        self.classes = list(classes)
        self.prompt = list(prompt)
        self.heads = heads
        self.label_vectors = label_vectors
        if heads is None and label_vectors is None:
            raise TrainingError("classifier needs logistic heads or label vectors")

    def embed(self, frames: np.ndarray) -> Dict[int, np.ndarray]:
        outputs = speech_prefix_tensors(self.model, bind(self.model.params), frames, self.prompt)
        return {d: t.value.reshape(-1) for d, t in outputs.items()}

    def predict_embedded(self, vectors: Sequence[Dict[int, np.ndarray]], dim: int) -> List[int]:
        if dim not in self.dims:
            raise TrainingError(f"dimension {dim} is not configured")
        x = np.vstack([v[dim] for v in vectors])
        if self.heads is not None:
            return [int(c) for c in self.heads[dim].predict(x)]
        assert self.label_vectors is not None
        labels = np.vstack([slice_prefix(row, dim, self.dims) for row in self.label_vectors])
        return [self.classes[int(i)] for i in np.argmax(x @ labels.T, axis=1)]

    def predict(self, frames: np.ndarray, dim: int) -> int:
        return self.predict_embedded([self.embed(frames)], dim)[0]


def _stage_one(variant: str, model_config: ModelConfig, params: Params, shots: Sequence[PairedExample],
               pairs: Sequence[ContrastivePair], cfg: FewShotConfig) -> Params:
    trainable = trainable_filter(variant)
    prompt = TASK_PROMPTS[cfg.prompt]
    model = build_model(variant, model_config, params)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            unique = sorted({p.left for p in batch} | {p.right for p in batch})
            slot = {idx: k for k, idx in enumerate(unique)}
            model.params = params
            bound = bind(params, trainable)
            embedded = [speech_prefix_tensors(model, bound, shots[idx].query_frames, prompt) for idx in unique]
            left = np.array([slot[p.left] for p in batch])
            right = np.array([slot[p.right] for p in batch])
            labels = np.array([p.label for p in batch])
            terms = []
            for d in model_config.dims:
                rows = ag.concat_rows([e[d] for e in embedded])
                # rows are unit norm already; compare them at full width
                terms.append(pair_tensor(ag.take_rows(rows, left), ag.take_rows(rows, right), labels, (d,), normalize=False))
            total = _sum_terms(terms)
            if not math.isfinite(total.item()):
                raise TrainingError(f"non-finite few-shot loss at step {step}", step, [shots[i].example_id for i in unique])
            total.backward()
            params = sgd_step(params, collect_gradients(bound), cfg.learning_rate, trainable)
            step += 1
    logger.debug(f"Few-shot stage 1: {step} steps over {len(pairs)} pairs")
    return params


def setfit_train(variant: str, model_config: ModelConfig, params: Params, shots: Sequence[PairedExample],
                 cfg: FewShotConfig, label_tokens: Dict[int, List[int]]) -> FewShotClassifier:
    """Two-stage few-shot adaptation; ``n_shot == 0`` yields the zero-shot classifier."""
    classes = sorted(label_tokens)
    if len(classes) < 2:
        raise TrainingError(f"few-shot classification needs at least 2 classes, got {len(classes)}")
    prompt = TASK_PROMPTS[cfg.prompt]

    if cfg.n_shot == 0:
        text_model = TextModel(model_config, params)
        label_vectors = text_model.encode_texts([label_tokens[c] for c in classes])
        return FewShotClassifier(variant, model_config, params, classes, prompt, label_vectors=label_vectors)

    chosen = select_shots(shots, cfg.n_shot)
    pair_set = setfit_pairs(chosen, cfg.n_shot, classes)
    pairs = pair_set.all
    if len(pairs) > cfg.max_pairs:
        keep = np.sort(np.random.default_rng(cfg.seed).choice(len(pairs), size=cfg.max_pairs, replace=False))
        pairs = [pairs[i] for i in keep]
    adapted = _stage_one(variant, model_config, params, chosen, pairs, cfg)

    heads: Dict[int, LogisticRegression] = {}
    classifier = FewShotClassifier(variant, model_config, adapted, classes, prompt, heads=heads)
    vectors = [classifier.embed(e.query_frames) for e in chosen]
    y = np.array([int(e.intent) for e in chosen if e.intent is not None])
    for d in model_config.dims:
        head = LogisticRegression(C=cfg.regularization, max_iter=cfg.max_iter)
        head.fit(np.vstack([v[d] for v in vectors]), y)
        heads[d] = head
    logger.info(f"✅ Few-shot {cfg.n_shot}-shot classifier: {len(chosen)} shots, {len(pairs)} pairs")
    return classifier
