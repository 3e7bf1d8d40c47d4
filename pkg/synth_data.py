"""Deterministic bilingual, bimodal toy corpora.

A shared "world" (vocabulary layout, word meanings, acoustic prototypes) is
derived from ``CorpusConfig.world_seed`` so every corpus, intent set and
keyword set generated with one config speaks the same language. Per-corpus
randomness comes from the ``seed`` argument.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from model_zoo import FIRST_CONTENT_TOKEN

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TASKS = ("document-retrieval", "transcription-retrieval", "translation-retrieval")
FILLERS_PER_LANGUAGE = 16
HESITATION_STEP = 0.1
MIN_DURATION_S = 3.0
MAX_DURATION_S = 30.0
MIN_QUALITY_SCORE = 3.2
SILENCE_FLOOR_DB = -120.0

# reference speech-rate magnitudes (chars/s) for natural vs hesitant read speech
NATURAL_CHARS_PER_SECOND = 16.88
HESITANT_CHARS_PER_SECOND = 7.51

_SYLLABLES = ("ba", "de", "ki", "lo", "mu", "na", "si", "to", "wa", "yo", "fe", "gu", "ja", "ri", "xe", "po")


class CorpusError(ValueError):
    """Raised for invalid generator requests or malformed corpus files."""


@dataclass(frozen=True)
class QualityProfile:
    """Speech degradation knobs; the defaults are the clean profile."""
    hesitation_factor: float = 1.0
    volume_offset_db: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.hesitation_factor < 1.0:
            raise CorpusError(f"hesitation_factor must be >= 1, got {self.hesitation_factor}")
        if abs(self.hesitation_steps * HESITATION_STEP - (self.hesitation_factor - 1.0)) > 1e-9:
            raise CorpusError(
                f"hesitation_factor must be 1 plus a multiple of {HESITATION_STEP}, got {self.hesitation_factor}"
            )
        if self.noise_sigma < 0.0:
            raise CorpusError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def hesitation_steps(self) -> int:
        return int(round((self.hesitation_factor - 1.0) / HESITATION_STEP))

    @property
    def is_clean(self) -> bool:
        return self.hesitation_factor == 1.0 and self.volume_offset_db == 0.0 and self.noise_sigma == 0.0


CLEAN_PROFILE = QualityProfile()
HESITANT_QUIET_PROFILE = QualityProfile(hesitation_factor=2.2, volume_offset_db=-25.0, noise_sigma=0.01)


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 512
    z_dim: int = 16
    world_seed: int = 1234
    query_keywords: int = 4
    query_fillers: int = 2
    doc_length_factor: int = 2
    frame_dim: int = 16
    layer_count: int = 1
    frames_per_token: int = 2
    frame_seconds: float = 0.25
    frame_noise: float = 0.05
    topic_spread: float = 0.35
    word_temperature: float = 0.25
    entity_count: int = 32
    entities_per_topic: int = 4
    query_entities: int = 1
    topic_angle_floor_deg: float = 30.0
    task_mix: Tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self) -> None:
        if self.doc_length_factor < 2:
            raise CorpusError("documents must be at least twice the query length")
        if not 0 <= self.query_entities <= self.entities_per_topic <= self.entity_count:
            raise CorpusError(
                f"need 0 <= query_entities ({self.query_entities}) <= entities_per_topic "
                f"({self.entities_per_topic}) <= entity_count ({self.entity_count})"
            )
        mix = tuple(float(x) for x in self.task_mix)
        if len(mix) != len(TASKS) or any(x < 0 for x in mix) or sum(mix) <= 0:
            raise CorpusError(f"task_mix needs {len(TASKS)} nonnegative weights, got {self.task_mix}")
        object.__setattr__(self, "task_mix", mix)

    @property
    def feature_dim(self) -> int:
        return self.frame_dim * self.layer_count


@dataclass(frozen=True)
class LatentTopic:
    id: int
    latent: np.ndarray


@dataclass
class PairedExample:
    """One query with its speech, transcription, translation and positive document."""
    example_id: int
    topic_id: int
    task: str
    query_tokens: List[int]
    transcription_tokens: List[int]
    translation_tokens: List[int]
    document_tokens: List[int]
    document_id: int
    query_frames: np.ndarray
    duration_s: float
    quality_score: float
    latent: np.ndarray
    relevance: int = 1
    intent: Optional[int] = None

    def target_tokens(self, task: Optional[str] = None) -> List[int]:
        task = task or self.task
        if task == "document-retrieval":
            return self.document_tokens
        if task == "transcription-retrieval":
            return self.transcription_tokens
        return self.translation_tokens


@dataclass
class IntentCorpus:
    labels: Dict[int, List[int]]
    examples: List[PairedExample]


@dataclass
class KeywordSet:
    keywords: List[List[int]]
    queries: List[PairedExample] = field(default_factory=list)


class Rejection(NamedTuple):
    index: int
    duration_s: float
    score: float
    rule: str


class FilterResult(NamedTuple):
    kept: List[Tuple[float, float]]
    rejections: List[Rejection]


# ---------------------------------------------------------------------------
# the shared world
# ---------------------------------------------------------------------------

class World:
    """Vocabulary layout plus word meanings and acoustic prototypes.

    Content ids hold Wolof words, their French translations, filler words for
    each language and finally named entities, which both languages share.
    """

    def __init__(self, config: CorpusConfig) -> None:
        self.config = config
        content = config.vocab_size - FIRST_CONTENT_TOKEN - 2 * FILLERS_PER_LANGUAGE - config.entity_count
        self.words_per_language = content // 2
        if self.words_per_language < 8:
            raise CorpusError(f"vocab_size {config.vocab_size} leaves no room for content words")
        w = self.words_per_language
        self.wolof_words = np.arange(FIRST_CONTENT_TOKEN, FIRST_CONTENT_TOKEN + w)
        self.french_words = self.wolof_words + w
        self.wolof_fillers = np.arange(FIRST_CONTENT_TOKEN + 2 * w, FIRST_CONTENT_TOKEN + 2 * w + FILLERS_PER_LANGUAGE)
        self.french_fillers = self.wolof_fillers + FILLERS_PER_LANGUAGE
        self.entities = np.arange(self.french_fillers[-1] + 1, self.french_fillers[-1] + 1 + config.entity_count)

        rng = np.random.default_rng(config.world_seed)
        meanings = rng.standard_normal((w, config.z_dim))
        self.meanings = meanings / np.linalg.norm(meanings, axis=1, keepdims=True)
        self.prototypes = rng.uniform(-0.5, 0.5, size=(config.vocab_size, config.feature_dim))

    def translate(self, wolof_token: int) -> int:
        return int(wolof_token) + self.words_per_language

    def topic_entities(self, topic_id: int) -> np.ndarray:
        """Entities a topic talks about; pools wrap around once topics outnumber them."""
        k = self.config.entities_per_topic
        return self.entities[(topic_id * k + np.arange(k)) % self.config.entity_count]

    def word_probs(self, latent: np.ndarray) -> np.ndarray:
        logits = self.meanings @ latent / self.config.word_temperature
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def sample_keywords(self, rng: np.random.Generator, latent: np.ndarray, count: int) -> List[int]:
        picks = rng.choice(self.words_per_language, size=count, replace=False, p=self.word_probs(latent))
        return [int(self.wolof_words[i]) for i in picks]

    def separated_latents(self, rng: np.random.Generator, count: int) -> List[np.ndarray]:
        floor = math.cos(math.radians(self.config.topic_angle_floor_deg))
        latents: List[np.ndarray] = []
        for _ in range(10000):
            if len(latents) == count:
                break
            z = rng.standard_normal(self.config.z_dim)
            z /= np.linalg.norm(z)
            if all(float(z @ other) <= floor for other in latents):
                latents.append(z)
        if len(latents) < count:
            raise CorpusError(
                f"could not place {count} topics {self.config.topic_angle_floor_deg} degrees apart in {self.config.z_dim} dims"
            )
        return latents

    def speak(self, tokens: Sequence[int], rng: np.random.Generator, profile: QualityProfile,
              degrade_rng: np.random.Generator) -> np.ndarray:
        """Frames for ``tokens``: prototypes plus channel noise, then quality degradation."""
        cfg = self.config
        clean = np.repeat(self.prototypes[np.asarray(tokens)], cfg.frames_per_token, axis=0)
        clean = clean + cfg.frame_noise * rng.standard_normal(clean.shape)
        frames = clean
        n_clean = clean.shape[0]
        # every hesitation step adds at least one filler frame
        extra = profile.hesitation_steps * max(1, int(math.floor(HESITATION_STEP * n_clean + 0.5)))
        if extra:
            fillers = 0.02 * degrade_rng.standard_normal((extra, clean.shape[1]))
            slots = np.sort(degrade_rng.integers(0, n_clean + 1, size=extra))
            frames = np.insert(clean, slots, fillers, axis=0)
        if profile.noise_sigma > 0:
            frames = frames + profile.noise_sigma * degrade_rng.standard_normal(frames.shape)
        frames = frames * 10.0 ** (profile.volume_offset_db / 20.0)
        frames = np.clip(frames, -1.0, 1.0)
        # stored as half precision on disk; keep the in-memory copy identical
        return frames.astype(np.float16).astype(np.float64)

    def quality_score(self, rng: np.random.Generator, profile: QualityProfile) -> float:
        penalty = 0.6 * (profile.hesitation_factor - 1.0) + 10.0 * profile.noise_sigma
        penalty += max(0.0, -profile.volume_offset_db) * 0.02
        return float(np.clip(4.1 - penalty + 0.3 * rng.standard_normal(), 1.0, 5.0))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _example_rngs(seed: int, stream: int, example_id: int) -> Tuple[np.random.Generator, np.random.Generator]:
    content = np.random.default_rng([seed, stream, example_id, 0])
    degrade = np.random.default_rng([seed, stream, example_id, 1])
    return content, degrade


def _make_example(world: World, example_id: int, topic_id: int, latent: np.ndarray, task: str,
                  seed: int, stream: int, profile: QualityProfile) -> PairedExample:
    cfg = world.config
    rng, degrade_rng = _example_rngs(seed, stream, example_id)
    keywords = world.sample_keywords(rng, latent, cfg.query_keywords)
    entities = [int(t) for t in rng.choice(world.topic_entities(topic_id), size=cfg.query_entities, replace=False)]
    fillers = [int(t) for t in rng.choice(world.wolof_fillers, size=cfg.query_fillers)]
    query = keywords + entities + fillers
    order = rng.permutation(len(query))
    query = [query[i] for i in order]

    translation = [
        world.translate(t) if t in keywords else t if t in entities else int(rng.choice(world.french_fillers))
        for t in query
    ]
    doc_len = cfg.doc_length_factor * len(query)
    document = ([world.translate(t) for t in keywords] + entities) * 2
    related = world.sample_keywords(rng, latent, max(0, min(2, doc_len - len(document))))
    document += [world.translate(t) for t in related]
    document += [int(t) for t in rng.choice(world.french_fillers, size=max(0, doc_len - len(document)))]
    document = [document[i] for i in rng.permutation(len(document))]

    frames = world.speak(query, rng, profile, degrade_rng)
    return PairedExample(
        example_id=example_id,
        topic_id=topic_id,
        task=task,
        query_tokens=query,
        transcription_tokens=list(query),
        translation_tokens=translation,
        document_tokens=document,
        document_id=example_id,
        query_frames=frames,
        duration_s=frames.shape[0] * cfg.frame_seconds,
        quality_score=world.quality_score(degrade_rng, profile),
        latent=latent,
    )


def gen_corpus(topics: int, examples_per_topic: int, seed: int,
               profile: QualityProfile = CLEAN_PROFILE,
               config: Optional[CorpusConfig] = None) -> List[PairedExample]:
    """Paired query/document examples, ``topics * examples_per_topic`` of them."""
    config = config or CorpusConfig()
    if topics < 2:
        raise CorpusError(f"need at least 2 topics, got {topics}")
    if examples_per_topic < 1:
        raise CorpusError("examples_per_topic must be >= 1")
    world = World(config)
    if world.words_per_language < topics * config.query_keywords:
        raise CorpusError(
            f"vocab too small: {world.words_per_language} content words cannot cover "
            f"{topics} topics x {config.query_keywords} keywords"
        )
    rng = np.random.default_rng([seed, 0])
    topic_list = [LatentTopic(i, z) for i, z in enumerate(world.separated_latents(rng, topics))]
    task_p = np.array(config.task_mix) / sum(config.task_mix)

    examples = []
    for topic in topic_list:
        for j in range(examples_per_topic):
            example_id = topic.id * examples_per_topic + j
            z = topic.latent + config.topic_spread * rng.standard_normal(config.z_dim)
            latent = z / np.linalg.norm(z)
            task = TASKS[int(rng.choice(len(TASKS), p=task_p))]
            examples.append(_make_example(world, example_id, topic.id, latent, task, seed, 1, profile))
    logger.info(f"Generated {len(examples)} paired examples over {topics} topics (seed {seed})")
    return examples


def gen_intents(classes: int, per_class: int, seed: int,
                profile: QualityProfile = CLEAN_PROFILE,
                config: Optional[CorpusConfig] = None) -> IntentCorpus:
    """Spoken intent queries; each class label is its two most typical words."""
    config = config or CorpusConfig()
    if classes < 2:
        raise CorpusError(f"need at least 2 intent classes, got {classes}")
    world = World(config)
    rng = np.random.default_rng([seed, 2])
    latents = world.separated_latents(rng, classes)
    labels = {c: [int(world.wolof_words[i]) for i in np.argsort(-(world.meanings @ z))[:2]] for c, z in enumerate(latents)}
    examples = []
    for c, z_c in enumerate(latents):
        for j in range(per_class):
            example_id = c * per_class + j
            z = z_c + config.topic_spread * rng.standard_normal(config.z_dim)
            example = _make_example(world, example_id, c, z / np.linalg.norm(z), "document-retrieval", seed, 3, profile)
            example.intent = c
            examples.append(example)
    return IntentCorpus(labels=labels, examples=examples)


def gen_keywords(count: int, queries_per_keyword: int, seed: int,
                 profile: QualityProfile = CLEAN_PROFILE,
                 config: Optional[CorpusConfig] = None) -> KeywordSet:
    """Two-word keywords (place names) and spoken utterances of them."""
    config = config or CorpusConfig()
    if count < 2:
        raise CorpusError(f"need at least 2 keywords, got {count}")
    world = World(config)
    rng = np.random.default_rng([seed, 4])
    keywords: List[List[int]] = []
    seen = set()
    while len(keywords) < count:
        pair = tuple(int(t) for t in rng.choice(world.wolof_words, size=2, replace=False))
        if pair not in seen:
            seen.add(pair)
            keywords.append(list(pair))
    queries = []
    for label, keyword in enumerate(keywords):
        for j in range(queries_per_keyword):
            example_id = label * queries_per_keyword + j
            content_rng, degrade_rng = _example_rngs(seed, 5, example_id)
            frames = world.speak(keyword, content_rng, profile, degrade_rng)
            queries.append(PairedExample(
                example_id=example_id, topic_id=label, task="transcription-retrieval",
                query_tokens=list(keyword), transcription_tokens=list(keyword),
                translation_tokens=[world.translate(t) for t in keyword],
                document_tokens=list(keyword), document_id=label,
                query_frames=frames, duration_s=frames.shape[0] * config.frame_seconds,
                quality_score=world.quality_score(degrade_rng, profile),
                latent=np.zeros(config.z_dim), intent=label,
            ))
    return KeywordSet(keywords=keywords, queries=queries)


def split_corpus(examples: Sequence[PairedExample], test_fraction: float, seed: int) -> Tuple[List[PairedExample], List[PairedExample]]:
    if not 0.0 < test_fraction < 1.0:
        raise CorpusError(f"test_fraction must be in (0, 1), got {test_fraction}")
    order = np.random.default_rng([seed, 6]).permutation(len(examples))
    n_test = max(1, int(round(len(examples) * test_fraction)))
    test_ids = set(int(i) for i in order[:n_test])
    train = [e for i, e in enumerate(examples) if i not in test_ids]
    test = [e for i, e in enumerate(examples) if i in test_ids]
    return train, test


def corrupt_transcription(tokens: Sequence[int], rate: float, seed: int, vocab_size: int = 512) -> List[int]:
    """Replace each token with a uniform random content token with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise CorpusError(f"corruption rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    flips = rng.random(len(tokens)) < rate
    replacements = rng.integers(FIRST_CONTENT_TOKEN, vocab_size, size=len(tokens))
    return [int(r) if flip else int(t) for t, flip, r in zip(tokens, flips, replacements)]


# ---------------------------------------------------------------------------
# speech-quality proxies and segment filtering
# ---------------------------------------------------------------------------

def render_tokens(tokens: Iterable[int]) -> str:
    """Deterministic pseudo-words for token ids."""
    words = []
    for t in tokens:
        t = int(t)
        word = _SYLLABLES[t % 16] + _SYLLABLES[(t // 16) % 16]
        if t >= 256:
            word += _SYLLABLES[(t // 256) % 16]
        words.append(word)
    return " ".join(words)


def chars_per_second(transcript: str, duration: float) -> float:
    if duration <= 0:
        raise CorpusError(f"duration must be positive, got {duration}")
    return len(transcript.strip()) / duration


def mean_volume_db(frames: np.ndarray) -> float:
    """``20 log10(RMS)``, floored at -120 dB."""
    samples = np.asarray(frames, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise CorpusError("mean_volume_db needs at least one sample")
    rms = float(np.sqrt(np.mean(samples * samples)))
    if rms <= 0.0:
        return SILENCE_FLOOR_DB
    return max(SILENCE_FLOOR_DB, 20.0 * math.log10(rms))


def filter_segments(segments: Sequence[Tuple[float, float]]) -> FilterResult:
    """Keep segments lasting 3-30 s with a quality score strictly above 3.2."""
    kept: List[Tuple[float, float]] = []
    rejections: List[Rejection] = []
    for index, (duration, score) in enumerate(segments):
        if duration < 0:
            raise CorpusError(f"segment {index} has negative duration {duration}")
        if not MIN_DURATION_S <= duration <= MAX_DURATION_S:
            rejections.append(Rejection(index, duration, score, "duration"))
        elif not score > MIN_QUALITY_SCORE:
            rejections.append(Rejection(index, duration, score, "score"))
        else:
            kept.append((duration, score))
    for rejection in rejections:
        logger.debug(f"Rejected segment {rejection.index} ({rejection.duration_s:.2f}s, score {rejection.score:.2f}): {rejection.rule}")
    return FilterResult(kept, rejections)


def lexical_diversity(token_lists: Iterable[Sequence[int]]) -> float:
    """Unique-to-total token ratio over all sequences."""
    tokens = [t for seq in token_lists for t in seq]
    return len(set(tokens)) / len(tokens) if tokens else 0.0


def quality_report(examples: Sequence[PairedExample]) -> Dict[str, Any]:
    if not examples:
        raise CorpusError("quality_report needs at least one example")
    rates = [chars_per_second(render_tokens(e.transcription_tokens), e.duration_s) for e in examples]
    volumes = [mean_volume_db(e.query_frames) for e in examples]
    filtered = filter_segments([(e.duration_s, e.quality_score) for e in examples])
    by_rule: Dict[str, int] = {}
    for rejection in filtered.rejections:
        by_rule[rejection.rule] = by_rule.get(rejection.rule, 0) + 1
    return {
        "examples": len(examples),
        "chars_per_second": float(np.mean(rates)),
        "mean_volume_db": float(np.mean(volumes)),
        "lexical_diversity": lexical_diversity(e.transcription_tokens for e in examples),
        "segments_kept": len(filtered.kept),
        "segments_rejected": dict(sorted(by_rule.items())),
    }


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _example_record(example: PairedExample) -> Dict[str, Any]:
    record = asdict(example)
    frames = np.asarray(example.query_frames)
    record["query_frames"] = frames.astype("<f2").tobytes().hex()
    record["frames_shape"] = list(frames.shape)
    record["latent"] = [float(x) for x in example.latent]
    return record


def _example_from_record(record: Dict[str, Any], line_no: int) -> PairedExample:
    try:
        shape = tuple(record.pop("frames_shape"))
        raw = bytes.fromhex(record["query_frames"])
        record["query_frames"] = np.frombuffer(raw, dtype="<f2").astype(np.float64).reshape(shape)
        record["latent"] = np.array(record["latent"], dtype=np.float64)
        return PairedExample(**record)
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"malformed example on line {line_no}: {e}")


def corpus_lines(examples: Sequence[PairedExample], header: Optional[Dict[str, Any]] = None) -> List[str]:
    head = {"schema_version": SCHEMA_VERSION, **(header or {})}
    lines = [json.dumps(head, sort_keys=True)]
    lines.extend(json.dumps(_example_record(e), sort_keys=True) for e in examples)
    return lines


def write_corpus(path: Union[str, Path], examples: Sequence[PairedExample],
                 header: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(corpus_lines(examples, header)) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {len(examples)} examples to {path}")
    return path


def read_corpus(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[PairedExample]]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CorpusError(f"{path}: unsupported schema_version {header.get('schema_version')!r} on line 1")
    examples = [_example_from_record(json.loads(line), n) for n, line in enumerate(lines[1:], start=2) if line.strip()]
    return header, examples
