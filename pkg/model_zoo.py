"""Toy encoders: a Matryoshka text encoder, a Late-Fusion speech path through it,
and a Dual speech encoder with attention pooling and per-dimension heads.

Parameters live in flat ``name -> ndarray`` dicts so checkpoints, freeze
filters and gradient maps all share one naming scheme:

- ``text.*``      token table, transformer-lite blocks, output projection
- ``frontend.*``  strided conv downsampler and projector ``W``
- ``pooler.q``    learnable attention-pooling query
- ``head.<d>``    Dual projector for Matryoshka dimension ``d``
"""

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autograd as ag
from autograd import Tensor
from numeric_core import as_matrix, softmax_rows

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
Bound = Dict[str, Tensor]

VARIANTS = ("text-only", "late-fusion", "dual-retrieval", "dual-alignment")
SPEECH_VARIANTS = VARIANTS[1:]

EOS_TOKEN = 0
PROMPT_MARK = 1
TASK_PROMPTS: Dict[str, Tuple[int, ...]] = {
    "document-retrieval": (PROMPT_MARK, 2),
    "transcription-retrieval": (PROMPT_MARK, 3),
    "translation-retrieval": (PROMPT_MARK, 4),
}
FIRST_CONTENT_TOKEN = 8
PROMPT_INIT_SCALE = 0.25

CHECKPOINT_MAGIC = b"MATZOO1"


class ModelInputError(ValueError):
    """Raised for inputs an encoder cannot process."""


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is malformed."""


def validate_dims(dims: Sequence[int], d_max: int) -> Tuple[int, ...]:
    """Check a Matryoshka dimension set: nonempty, strictly increasing, ending at ``d_max``."""
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ModelInputError("Matryoshka dims must not be empty")
    if any(d <= 0 for d in dims) or any(b <= a for a, b in zip(dims, dims[1:])):
        raise ModelInputError(f"Matryoshka dims must be positive and strictly increasing, got {list(dims)}")
    if dims[-1] != d_max:
        raise ModelInputError(f"largest Matryoshka dim {dims[-1]} must equal d_max {d_max}")
    return dims


@dataclass(frozen=True)
class ModelConfig:
    """Sizes of the toy model zoo."""
    vocab_size: int = 512
    hidden: int = 64
    d_max: int = 64
    dims: Tuple[int, ...] = (8, 16, 32, 64)
    blocks: int = 2
    max_length: int = 64
    frame_dim: int = 16
    layer_count: int = 1
    conv_kernel: int = 3
    conv_stride: int = 2
    normalize_prefix: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", validate_dims(self.dims, self.d_max))
        if self.vocab_size <= FIRST_CONTENT_TOKEN:
            raise ModelInputError(f"vocab_size must exceed {FIRST_CONTENT_TOKEN}")
        if self.conv_kernel < 1 or self.conv_stride < 1:
            raise ModelInputError("conv kernel and stride must be positive")

    @property
    def feature_dim(self) -> int:
        # stacked encoder layers are emulated by widening each frame
        return self.frame_dim * self.layer_count


# ---------------------------------------------------------------------------
# parameter initialization and binding
# ---------------------------------------------------------------------------

def _gaussian(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


def init_text_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    h = config.hidden
    params: Params = {"text.tokens": _gaussian(rng, (config.vocab_size, h), 1.0 / math.sqrt(h))}
    # the pooled end marker starts empty so the final position reads its context
    params["text.tokens"][EOS_TOKEN] = 0.0
    params["text.tokens"][PROMPT_MARK:FIRST_CONTENT_TOKEN] *= PROMPT_INIT_SCALE
    for b in range(config.blocks):
        for name in ("wq", "wk", "wv", "wo"):
            params[f"text.b{b}.{name}"] = _gaussian(rng, (h, h), 1.0 / math.sqrt(h))
        params[f"text.b{b}.w1"] = _gaussian(rng, (h, 2 * h), 1.0 / math.sqrt(h))
        params[f"text.b{b}.b1"] = np.zeros((1, 2 * h))
        params[f"text.b{b}.w2"] = _gaussian(rng, (2 * h, h), 0.5 / math.sqrt(2 * h))
    params["text.out"] = _gaussian(rng, (h, config.d_max), 1.0 / math.sqrt(h))
    return params


def init_frontend_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    fan_in = config.conv_kernel * config.feature_dim
    h = config.hidden
    return {
        "frontend.conv": _gaussian(rng, (fan_in, h), 1.0 / math.sqrt(fan_in)),
        "frontend.conv_bias": np.zeros((1, h)),
        "frontend.proj": _gaussian(rng, (h, h), 1.0 / math.sqrt(h)),
    }


def init_dual_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    params = init_frontend_params(config, rng)
    params["pooler.q"] = np.zeros((1, config.hidden))
    for d in config.dims:
        params[f"head.{d}"] = _gaussian(rng, (config.hidden, d), 1.0 / math.sqrt(config.hidden))
    return params


def init_params(variant: str, config: ModelConfig, seed: int, text_params: Optional[Params] = None) -> Params:
    """Fresh parameters for ``variant``; speech variants reuse ``text_params`` when given."""
    if variant not in VARIANTS:
        raise ModelInputError(f"unknown model variant '{variant}'; expected one of {list(VARIANTS)}")
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in text_params.items()} if text_params else init_text_params(config, rng)
    if variant == "late-fusion":
        params.update(init_frontend_params(config, rng))
    elif variant.startswith("dual"):
        params.update(init_dual_params(config, rng))
    return dict(sorted(params.items()))


def trainable_filter(variant: str) -> Callable[[str], bool]:
    """Names updated by training: the text stack stays frozen for every speech variant."""
    if variant == "text-only":
        return lambda name: name.startswith("text.")
    return lambda name: not name.startswith("text.")


def bind(params: Params, trainable: Optional[Callable[[str], bool]] = None) -> Bound:
    """Wrap parameters as graph leaves; only names passing ``trainable`` collect gradients."""
    return {
        name: Tensor(value, requires_grad=bool(trainable and trainable(name)), name=name)
        for name, value in params.items()
    }


def collect_gradients(bound: Bound) -> Dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for name, t in bound.items() if t.requires_grad
    }


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def prefix_tensor(e: Tensor, d: int, normalize: bool = True) -> Tensor:
    sliced = ag.slice_cols(e, d)
    return ag.l2_normalize_rows(sliced) if normalize else sliced


def slice_prefix(e: np.ndarray, d: int, dims: Sequence[int], normalize: bool = True) -> np.ndarray:
    """First ``d`` coordinates of ``e``, re-normalized to unit norm."""
    if d not in dims:
        raise ModelInputError(f"dimension {d} is not a configured Matryoshka dim {list(dims)}")
    vec = np.asarray(e, dtype=np.float64).reshape(-1)
    if d > vec.shape[0]:
        raise ModelInputError(f"dimension {d} exceeds vector length {vec.shape[0]}")
    prefix = vec[:d].copy()
    if not normalize:
        return prefix
    norm = np.linalg.norm(prefix)
    return prefix / norm if norm > 0 else prefix


def attention_pool(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``softmax(q x^T / sqrt(d)) x`` for one learnable query row."""
    x = as_matrix(x, "pool input")
    q = as_matrix(q, "pool query")
    if x.shape[0] < 1:
        raise ModelInputError("attention pooling needs at least one row")
    weights = softmax_rows(q @ x.T / math.sqrt(x.shape[1]))
    return (weights @ x).reshape(-1)


def attention_pool_tensor(x: Tensor, q: Tensor) -> Tensor:
    scores = ag.scale(ag.matmul(q, ag.transpose(x)), 1.0 / math.sqrt(x.shape[1]))
    return ag.matmul(ag.softmax_rows(scores), x)


def conv_windows(frames: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """im2col for a 1-D strided convolution with 'same'-style padding.

    Output length is ``ceil(len / stride)``.
    """
    length, channels = frames.shape
    out_len = -(-length // stride)
    pad_total = max((out_len - 1) * stride + kernel - length, 0)
    left = pad_total // 2
    padded = np.zeros((length + pad_total, channels))
    padded[left:left + length] = frames
    windows = np.empty((out_len, kernel * channels))
    for t in range(out_len):
        windows[t] = padded[t * stride:t * stride + kernel].reshape(-1)
    return windows


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class TextModel:
    """Transformer-lite text encoder with final-token pooling."""

    def __init__(self, config: ModelConfig, params: Params) -> None:
        self.config = config
        self.params = params

    def validate_tokens(self, tokens: Sequence[int], prompt: Sequence[int] = ()) -> List[int]:
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise ModelInputError("token sequence must contain at least one token")
        sequence = list(prompt) + tokens + [EOS_TOKEN]
        bad = [t for t in sequence if t < 0 or t >= self.config.vocab_size]
        if bad:
            raise ModelInputError(f"unknown token id {bad[0]} (vocab size {self.config.vocab_size})")
        if len(sequence) > self.config.max_length:
            keep = self.config.max_length - len(prompt) - 1
            raise ModelInputError(
                f"sequence of {len(sequence)} positions exceeds max length {self.config.max_length}; "
                f"truncate the input to at most {keep} tokens"
            )
        return sequence

    def stack_tensor(self, bound: Bound, x: Tensor) -> Tensor:
        """Run the blocks over ``x`` (s x h); return the unit-norm pooled embedding (1 x d_max)."""
        inv_sqrt_h = 1.0 / math.sqrt(self.config.hidden)
        for b in range(self.config.blocks):
            p = f"text.b{b}."
            q = ag.matmul(x, bound[p + "wq"])
            k = ag.matmul(x, bound[p + "wk"])
            v = ag.matmul(x, bound[p + "wv"])
            attn = ag.softmax_rows(ag.scale(ag.matmul(q, ag.transpose(k)), inv_sqrt_h))
            x = ag.add(x, ag.matmul(ag.matmul(attn, v), bound[p + "wo"]))
            hidden = ag.tanh(ag.add(ag.matmul(x, bound[p + "w1"]), bound[p + "b1"]))
            x = ag.add(x, ag.matmul(hidden, bound[p + "w2"]))
        rows = x.shape[0]
        last = ag.slice_rows(x, rows - 1, rows)
        return ag.l2_normalize_rows(ag.matmul(last, bound["text.out"]))

    def text_tensor(self, bound: Bound, tokens: Sequence[int], prompt: Sequence[int] = ()) -> Tensor:
        sequence = self.validate_tokens(tokens, prompt)
        return self.stack_tensor(bound, ag.take_rows(bound["text.tokens"], np.array(sequence)))

    def encode_text(self, tokens: Sequence[int], prompt: Optional[Sequence[int]] = None) -> np.ndarray:
        bound = bind(self.params)
        return self.text_tensor(bound, tokens, prompt or ()).value.reshape(-1)

    def encode_texts(self, sequences: Sequence[Sequence[int]], prompt: Optional[Sequence[int]] = None) -> np.ndarray:
        bound = bind(self.params)
        if not sequences:
            return np.zeros((0, self.config.d_max))
        return np.vstack([self.text_tensor(bound, s, prompt or ()).value for s in sequences])


class SpeechFrontend:
    """Strided conv downsampler followed by the projector ``W`` into the text width."""

    def __init__(self, config: ModelConfig) -> None:
        self.config = config

    def check_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ModelInputError("speech input needs at least one frame")
        if frames.shape[1] != self.config.feature_dim:
            raise ModelInputError(
                f"frame width {frames.shape[1]} does not match configured feature dim {self.config.feature_dim}"
            )
        return frames

    def tensor(self, bound: Bound, frames: np.ndarray) -> Tensor:
        windows = conv_windows(self.check_frames(frames), self.config.conv_kernel, self.config.conv_stride)
        conv = ag.tanh(ag.add(ag.matmul(ag.constant(windows), bound["frontend.conv"]), bound["frontend.conv_bias"]))
        return ag.matmul(conv, bound["frontend.proj"])


class LateFusionModel(TextModel):
    """Speech rows are spliced in front of the prompt and run through the frozen text stack."""

    def __init__(self, config: ModelConfig, params: Params) -> None:
        super().__init__(config, params)
        self.frontend = SpeechFrontend(config)

    def speech_tensor(self, bound: Bound, frames: np.ndarray, prompt: Sequence[int]) -> Tensor:
        speech = self.frontend.tensor(bound, frames)
        tail = [int(t) for t in prompt] + [EOS_TOKEN]
        positions = speech.shape[0] + len(tail)
        if positions > self.config.max_length:
            keep = (self.config.max_length - len(tail)) * self.config.conv_stride
            raise ModelInputError(
                f"speech sequence of {positions} positions ({np.shape(frames)[0]} frames) exceeds max length "
                f"{self.config.max_length}; truncate the input to at most {keep} frames"
            )
        tail_rows = ag.take_rows(bound["text.tokens"], np.array(tail))
        return self.stack_tensor(bound, ag.concat_rows([speech, tail_rows]))

    def encode_speech_late_fusion(self, frames: np.ndarray, prompt: Sequence[int]) -> np.ndarray:
        return self.speech_tensor(bind(self.params), frames, prompt).value.reshape(-1)


class DualModel(TextModel):
    """Speech-only encoder: frontend, attention pooling, one projector per dim."""

    def __init__(self, config: ModelConfig, params: Params) -> None:
        super().__init__(config, params)
        self.frontend = SpeechFrontend(config)

    def speech_tensors(self, bound: Bound, frames: np.ndarray) -> Dict[int, Tensor]:
        pooled = attention_pool_tensor(self.frontend.tensor(bound, frames), bound["pooler.q"])
        return {d: ag.l2_normalize_rows(ag.matmul(pooled, bound[f"head.{d}"])) for d in self.config.dims}

    def encode_speech_dual(self, frames: np.ndarray) -> Dict[int, np.ndarray]:
        outputs = self.speech_tensors(bind(self.params), frames)
        return {d: t.value.reshape(-1) for d, t in outputs.items()}


Model = Union[TextModel, LateFusionModel, DualModel]


def build_model(variant: str, config: ModelConfig, params: Params) -> Model:
    if variant == "text-only":
        return TextModel(config, params)
    if variant == "late-fusion":
        return LateFusionModel(config, params)
    if variant in ("dual-retrieval", "dual-alignment"):
        return DualModel(config, params)
    raise ModelInputError(f"unknown model variant '{variant}'")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(params: Params) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name in sorted(params):
        value = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    return b"".join(chunks)


def save_checkpoint(params: Params, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    logger.debug(f"Saved checkpoint with {len(params)} parameters to {path}")
    return path


def parse_checkpoint(blob: bytes) -> Params:
    def take(offset: int, size: int) -> bytes:
        if offset + size > len(blob):
            raise CheckpointFormatError(f"checkpoint truncated at offset {offset} (needed {size} bytes)")
        return blob[offset:offset + size]

    if take(0, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic at offset 0")
    offset = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack("<I", take(offset, 4))
    offset += 4
    params: Params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(offset, 2))
        offset += 2
        name = take(offset, name_len).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack("<B", take(offset, 1))
        offset += 1
        shape = struct.unpack(f"<{ndim}I", take(offset, 4 * ndim))
        offset += 4 * ndim
        size = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(take(offset, size), dtype="<f8").reshape(shape).astype(np.float64)
        offset += size
    if offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - offset} trailing bytes after offset {offset}")
    return params


def load_checkpoint(path: Union[str, Path]) -> Params:
    return parse_checkpoint(Path(path).read_bytes())


def param_digest(params: Params, prefix: str = "") -> str:
    """SHA-256 over the raw bytes of every parameter whose name starts with ``prefix``."""
    digest = hashlib.sha256()
    for name in sorted(params):
        if name.startswith(prefix):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return digest.hexdigest()
