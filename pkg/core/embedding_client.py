"""
Vision-language probe scoring for DxAgents.

Image and text embeddings come from a remote embedding service or from a
synthetic oracle world. A finding probe is scored by the cosine similarity
of the image embedding with its positive and negative descriptions; a
softmax over the two similarities gives the positive probability, which is
compared against the threshold psi.
"""

import abc
import json
import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import requests

from .cache_manager import CacheManager
from .constants import BACKOFF_BASE_SECONDS, DEFAULT_MAX_RETRIES, DEFAULT_PSI, DEFAULT_TIMEOUT
from .errors import (
    BackendError,
    BackendTimeout,
    ConfigError,
    DimensionMismatch,
    ImageNotFound,
    PreconditionError,
    ProtocolError,
    ZeroVector,
)
from .utils import call_with_retries

if TYPE_CHECKING:
    from .config import RunConfig

logger = logging.getLogger(__name__)

EmbeddingVector = np.ndarray


class ClipMode(str, Enum):
    CONTRASTIVE = "contrastive"
    POSITIVE_ONLY = "positive_only"


class Verdict(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


@dataclass(frozen=True)
class FindingProbe:
    positive: str
    negative: str

    def __post_init__(self) -> None:
        if not self.positive.strip() or not self.negative.strip():
            raise PreconditionError("probe descriptions must be non-empty")
        if self.positive == self.negative:
            raise PreconditionError("positive and negative descriptions must differ")


@dataclass(frozen=True)
class VlmConfig:
    psi: float = DEFAULT_PSI
    mode: ClipMode = ClipMode.CONTRASTIVE

    def __post_init__(self) -> None:
        if not 0.0 < self.psi < 1.0:
            raise PreconditionError(f"psi {self.psi} outside (0, 1)")


@dataclass(frozen=True)
class FindingObservation:
    probe: FindingProbe
    p_positive: float
    verdict: Verdict
    s_pos: float
    s_neg: Optional[float]
    mode: ClipMode = ClipMode.CONTRASTIVE

    @property
    def description(self) -> str:
        return self.probe.positive

    def to_dict(self) -> Dict[str, Any]:
        return {
            "positive": self.probe.positive,
            "negative": self.probe.negative,
            "p_positive": self.p_positive,
            "verdict": self.verdict.value,
            "s_pos": self.s_pos,
            "s_neg": self.s_neg,
            "mode": self.mode.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FindingObservation":
        return cls(
            probe=FindingProbe(data["positive"], data["negative"]),
            p_positive=float(data["p_positive"]),
            verdict=Verdict(data["verdict"]),
            s_pos=float(data["s_pos"]),
            s_neg=None if data.get("s_neg") is None else float(data["s_neg"]),
            mode=ClipMode(data.get("mode", ClipMode.CONTRASTIVE.value)),
        )


def as_embedding(values: Any, dimension: Optional[int] = None) -> EmbeddingVector:
    """
    Validate and convert raw values to an embedding vector.

    Raises:
        DimensionMismatch: If the length differs from dimension.
        ProtocolError: If values are not a flat list of finite reals.
    """
    try:
        vector = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ProtocolError(f"embedding is not numeric: {e}")
    if vector.ndim != 1 or vector.size < 2:
        raise ProtocolError(f"embedding must be a flat vector of length >= 2, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise ProtocolError("embedding contains non-finite entries")
    if dimension is not None and vector.size != dimension:
        raise DimensionMismatch(f"expected dimension {dimension}, got {vector.size}")
    return vector


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """
    Cosine similarity clamped to [-1, 1].

    Raises:
        DimensionMismatch: If the vectors differ in length.
        ZeroVector: If either vector has zero norm.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimensions {a.shape} and {b.shape} differ")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def contrastive_softmax(s_pos: float, s_neg: float) -> Tuple[float, float]:
    """Softmax over (s_pos, s_neg) on raw similarities, no temperature scaling."""
    logits = np.array([s_pos, s_neg], dtype=np.float64)
    weights = np.exp(logits - logits.max())
    probabilities = weights / weights.sum()
    return float(probabilities[0]), float(probabilities[1])


def probe_probability(s_pos: float, s_neg: Optional[float], mode: ClipMode) -> float:
    """
    Positive probability of a probe from its similarities.

    Contrastive mode takes the first softmax component; positive-only mode
    maps the single cosine affinely into [0, 1].
    """
    if mode == ClipMode.POSITIVE_ONLY:
        return (s_pos + 1.0) / 2.0
    if s_neg is None:
        raise PreconditionError("contrastive scoring needs a negative similarity")
    return contrastive_softmax(s_pos, s_neg)[0]


def decide(p_positive: float, psi: float) -> Verdict:
    return Verdict.POSITIVE if p_positive > psi else Verdict.NEGATIVE


class EmbeddingBackend(abc.ABC):
    """Interface every embedding backend implements."""

    name = "abstract"

    @property
    @abc.abstractmethod
    def dimension(self) -> Optional[int]:
        """Declared embedding dimension (None until known)."""

    @abc.abstractmethod
    def embed_text(self, text: str) -> EmbeddingVector:
        """Embed a finding description."""

    @abc.abstractmethod
    def embed_image(self, image_ref: str) -> EmbeddingVector:
        """Embed an image by reference."""

    def ping(self) -> None:
        """Raise BackendError if the backend is unreachable."""

    def describe(self) -> Dict[str, Any]:
        return {"backend": self.name}


class SyntheticEmbeddingBackend(EmbeddingBackend):
    """
    Oracle world where embeddings are indicator vectors over a vocabulary.

    A text embeds as the L2-normalized indicator of the vocabulary tokens it
    contains (case-insensitive substring match). An image embeds as the
    normalized indicator of its declared true findings. Texts or images with
    no token embed as the zero vector.
    """

    name = "synthetic"

    def __init__(self, vocabulary: List[str], images: Dict[str, List[str]]):
        if len(vocabulary) < 2:
            raise ConfigError("embedding.world", "vocabulary needs at least two tokens")
        self.vocabulary = list(vocabulary)
        self._lowered = [token.casefold() for token in self.vocabulary]
        if len(set(self._lowered)) != len(self._lowered):
            raise ConfigError("embedding.world", "vocabulary tokens must be unique")
        self._index = {token: i for i, token in enumerate(self._lowered)}
        self.images: Dict[str, Tuple[str, ...]] = {}
        for image_id, findings in images.items():
            unknown = [f for f in findings if f.casefold() not in self._index]
            if unknown:
                raise ConfigError("embedding.world", f"image {image_id!r} lists unknown findings {unknown}")
            self.images[image_id] = tuple(findings)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SyntheticEmbeddingBackend":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError("embedding.world", f"{path} is not valid UTF-8 JSON: {e}")
        try:
            images = {entry["id"]: list(entry["findings"]) for entry in data["images"]}
            return cls(list(data["vocabulary"]), images)
        except (KeyError, TypeError) as e:
            raise ConfigError("embedding.world", f"{path} is not a synthetic world: {e}")

    @property
    def dimension(self) -> int:
        return len(self.vocabulary)

    @staticmethod
    def _normalize(vector: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise PreconditionError("text must be non-empty")
        lowered = text.casefold()
        vector = np.array([1.0 if token in lowered else 0.0 for token in self._lowered])
        return self._normalize(vector)

    def embed_image(self, image_ref: str) -> EmbeddingVector:
        if image_ref not in self.images:
            raise ImageNotFound(f"image {image_ref!r} is not in the synthetic world")
        vector = np.zeros(self.dimension)
        for finding in self.images[image_ref]:
            vector[self._index[finding.casefold()]] = 1.0
        return self._normalize(vector)

    def truth(self, image_ref: str, token: str) -> bool:
        """Whether the oracle declares token present in image_ref."""
        return token.casefold() in {f.casefold() for f in self.images[image_ref]}

    def describe(self) -> Dict[str, Any]:
        return {"backend": self.name, "dimension": self.dimension, "images": len(self.images)}


class RemoteEmbeddingClient(EmbeddingBackend):
    """Client for an HTTP embedding service: POST {base_url}/embed."""

    name = "remote"

    def __init__(self,
                 base_url: str,
                 dimension: Optional[int] = None,
                 timeout: float = DEFAULT_TIMEOUT,
                 max_attempts: int = DEFAULT_MAX_RETRIES,
                 backoff_base: float = BACKOFF_BASE_SECONDS,
                 session: Optional[Any] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.base_url = base_url.rstrip("/")
        self._dimension = dimension
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.session = session if session is not None else requests.Session()
        self.sleep = sleep

    @property
    def dimension(self) -> Optional[int]:
        return self._dimension

    def _embed(self, kind: str, payload: str) -> EmbeddingVector:
        url = f"{self.base_url}/embed"

        def attempt() -> EmbeddingVector:
            try:
                response = self.session.post(url, json={"kind": kind, "payload": payload}, timeout=self.timeout)
            except requests.Timeout as e:
                raise BackendTimeout(f"embedding timeout: {e}")
            except requests.RequestException as e:
                raise BackendError(f"embedding transport error: {e}")
            if response.status_code == 404 and kind == "image":
                raise ImageNotFound(f"image {payload!r} not found by {url}")
            if response.status_code == 429 or response.status_code >= 500:
                raise BackendError(f"HTTP {response.status_code} from {url}")
            if response.status_code >= 400:
                raise ProtocolError(f"HTTP {response.status_code} from {url}")
            try:
                body = response.json()
                values = body["embedding"]
                declared = int(body.get("dim", len(values)))
            except (ValueError, KeyError, TypeError) as e:
                raise ProtocolError(f"malformed embedding response: {e}")
            vector = as_embedding(values)
            if vector.size != declared:
                raise DimensionMismatch(f"response declares dim {declared} but has {vector.size} values")
            if self._dimension is None:
                self._dimension = declared
            elif vector.size != self._dimension:
                raise DimensionMismatch(f"expected dimension {self._dimension}, got {vector.size}")
            return vector

        return call_with_retries(attempt, self.max_attempts, self.backoff_base, self.sleep, label=f"{kind} embedding")

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise PreconditionError("text must be non-empty")
        return self._embed("text", text)

    def embed_image(self, image_ref: str) -> EmbeddingVector:
        return self._embed("image", image_ref)

    def ping(self) -> None:
        try:
            response = self.session.get(self.base_url, timeout=self.timeout)
        except requests.RequestException as e:
            raise BackendError(f"embedding endpoint {self.base_url} unreachable: {e}", retryable=False)
        if response.status_code >= 500:
            raise BackendError(f"embedding endpoint {self.base_url} answered HTTP {response.status_code}",
                               retryable=False)

    def describe(self) -> Dict[str, Any]:
        return {"backend": self.name, "base_url": self.base_url, "dimension": self._dimension}


class ProbeScorer:
    """Scores finding probes against images through a cached embedding backend."""

    def __init__(self, backend: EmbeddingBackend, cache: Optional[CacheManager] = None):
        self.backend = backend
        self.cache = cache if cache is not None else CacheManager()

    def _cached(self, kind: str, key: str, compute: Callable[[str], EmbeddingVector]) -> EmbeddingVector:
        vector = self.cache.get_embedding(kind, key)
        if vector is None:
            vector = compute(key)
            self.cache.cache_embedding(kind, key, vector)
        return vector

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._cached("text", text, self.backend.embed_text)

    def embed_image(self, image_ref: str) -> EmbeddingVector:
        return self._cached("image", image_ref, self.backend.embed_image)

    @staticmethod
    def _similarity(image: EmbeddingVector, text: EmbeddingVector) -> float:
        # A zero embedding carries no evidence.
        if not np.any(image) or not np.any(text):
            if image.shape != text.shape:
                raise DimensionMismatch(f"dimensions {image.shape} and {text.shape} differ")
            return 0.0
        return cosine_similarity(image, text)

    def score_probe(self, image_ref: str, probe: FindingProbe, cfg: VlmConfig) -> FindingObservation:
        """
        Score one probe against an image.

        Args:
            image_ref: Opaque image reference.
            probe: Positive/negative description pair.
            cfg: Threshold and scoring mode.

        Returns:
            The observation with probability, verdict and raw similarities.
        """
        image = self.embed_image(image_ref)
        s_pos = self._similarity(image, self.embed_text(probe.positive))
        s_neg: Optional[float] = None
        if cfg.mode == ClipMode.CONTRASTIVE:
            s_neg = self._similarity(image, self.embed_text(probe.negative))
        p_positive = probe_probability(s_pos, s_neg, cfg.mode)
        return FindingObservation(probe, p_positive, decide(p_positive, cfg.psi), s_pos, s_neg, cfg.mode)


def build_embedding_backend(cfg: "RunConfig") -> EmbeddingBackend:
    """Instantiate the embedding backend named by the run configuration."""
    if cfg.embedding_backend == "synthetic":
        if not cfg.embedding_world:
            raise ConfigError("embedding.world", "synthetic backend requires a world file")
        return SyntheticEmbeddingBackend.from_file(cfg.resolve(cfg.embedding_world))
    if not cfg.embedding_base_url:
        raise ConfigError("embedding.base_url", "remote backend requires a base URL")
    return RemoteEmbeddingClient(
        base_url=cfg.embedding_base_url,
        dimension=cfg.embedding_dimension or None,
        timeout=cfg.embedding_timeout,
        max_attempts=cfg.max_retries,
    )
