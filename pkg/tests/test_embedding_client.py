import math

import numpy as np
import pytest
import requests

from conftest import FakeResponse
from core.cache_manager import CacheManager
from core.errors import (
    BackendError,
    ConfigError,
    DimensionMismatch,
    ImageNotFound,
    PreconditionError,
    ProtocolError,
    ZeroVector,
)
from core.embedding_client import (
    ClipMode,
    FindingProbe,
    ProbeScorer,
    RemoteEmbeddingClient,
    SyntheticEmbeddingBackend,
    Verdict,
    VlmConfig,
    contrastive_softmax,
    cosine_similarity,
    decide,
    probe_probability,
)

TOKENS = ["enlarged cardiac silhouette", "widened heart shadow", "kerley b lines"]


class TestCosineSimilarity:
    def test_identity_and_orthogonality(self):
        unit = np.array([0.6, 0.8])
        assert cosine_similarity(unit, unit) == pytest.approx(1.0, abs=1e-12)
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_diagonal(self):
        a = np.array([1.0, 1.0]) / math.sqrt(2)
        assert cosine_similarity(a, np.array([1.0, 0.0])) == pytest.approx(0.7071067811865476, abs=1e-12)

    def test_errors(self):
        with pytest.raises(DimensionMismatch):
            cosine_similarity(np.ones(2), np.ones(3))
        with pytest.raises(ZeroVector):
            cosine_similarity(np.zeros(2), np.ones(2))


class TestProbeProbability:
    def test_symmetric_similarities(self):
        p = probe_probability(0.5, 0.5, ClipMode.CONTRASTIVE)
        assert p == pytest.approx(0.5, abs=1e-12)
        assert decide(p, 0.55) == Verdict.NEGATIVE

    def test_full_contrast(self):
        p = probe_probability(1.0, 0.0, ClipMode.CONTRASTIVE)
        assert p == pytest.approx(0.7310585786, abs=1e-9)
        assert decide(p, 0.55) == Verdict.POSITIVE

    def test_threshold_guards_small_margins(self):
        p = probe_probability(0.6, 0.5, ClipMode.CONTRASTIVE)
        assert p == pytest.approx(0.5249791875, abs=1e-9)
        assert decide(p, 0.55) == Verdict.NEGATIVE

    def test_threshold_is_strict(self):
        assert decide(0.55, 0.55) == Verdict.NEGATIVE

    def test_positive_only_mode(self):
        assert probe_probability(0.5, None, ClipMode.POSITIVE_ONLY) == pytest.approx(0.75)
        assert probe_probability(-1.0, None, ClipMode.POSITIVE_ONLY) == 0.0
        with pytest.raises(PreconditionError):
            probe_probability(0.5, None, ClipMode.CONTRASTIVE)


def test_softmax_properties_on_random_pairs():
    rng = np.random.default_rng(20240611)
    pairs = rng.uniform(-1.0, 1.0, size=(10_000, 2))
    shifts = rng.uniform(-5.0, 5.0, size=10_000)
    bumps = rng.uniform(1e-3, 0.5, size=10_000)
    for (s_pos, s_neg), shift, bump in zip(pairs, shifts, bumps):
        p_pos, p_neg = contrastive_softmax(s_pos, s_neg)
        assert abs(p_pos + p_neg - 1.0) <= 1e-12
        shifted, _ = contrastive_softmax(s_pos + shift, s_neg + shift)
        assert abs(shifted - p_pos) <= 1e-12
        assert contrastive_softmax(s_pos + bump, s_neg)[0] > p_pos


class TestVlmConfig:
    @pytest.mark.parametrize("psi", [0.0, 1.0, 1.5])
    def test_psi_range(self, psi):
        with pytest.raises(PreconditionError):
            VlmConfig(psi=psi)

    def test_probe_parts_must_differ(self):
        with pytest.raises(PreconditionError):
            FindingProbe("same", "same")


class TestSyntheticWorld:
    def test_text_embedding_is_normalized_indicator(self):
        backend = SyntheticEmbeddingBackend(TOKENS, {})
        vector = backend.embed_text("There is an Enlarged Cardiac Silhouette")
        assert vector.tolist() == [1.0, 0.0, 0.0]
        both = backend.embed_text("enlarged cardiac silhouette and kerley b lines")
        assert both == pytest.approx(np.array([1.0, 0.0, 1.0]) / math.sqrt(2))
        assert np.array_equal(backend.embed_text("no token here"), np.zeros(3))

    def test_image_embedding(self):
        backend = SyntheticEmbeddingBackend(TOKENS, {"img1": ["enlarged cardiac silhouette", "kerley b lines"]})
        assert backend.embed_image("img1") == pytest.approx(np.array([1.0, 0.0, 1.0]) / math.sqrt(2))
        assert np.array_equal(backend.embed_image("img1"), backend.embed_image("img1"))
        with pytest.raises(ImageNotFound):
            backend.embed_image("img2")

    def test_empty_text_is_rejected(self):
        with pytest.raises(PreconditionError):
            SyntheticEmbeddingBackend(TOKENS, {}).embed_text("  ")

    def test_unknown_image_finding(self):
        with pytest.raises(ConfigError):
            SyntheticEmbeddingBackend(TOKENS, {"img1": ["pneumothorax"]})

    @pytest.mark.parametrize("content", [b"[1, 2", b"\xff{}"])
    def test_undecodable_world_file(self, tmp_path, content):
        path = tmp_path / "world.json"
        path.write_bytes(content)
        with pytest.raises(ConfigError) as info:
            SyntheticEmbeddingBackend.from_file(path)
        assert info.value.key == "embedding.world"

    def test_bundled_world_oracle(self, synthetic_backend, world_guidelines):
        """Every (image, finding) pair of the bundled world scores Positive exactly when it is true."""
        scorer = ProbeScorer(synthetic_backend)
        cfg = VlmConfig(psi=0.5)
        negative = "There is no such finding."
        checked = 0
        for image in synthetic_backend.images:
            for disease in world_guidelines.diseases:
                for finding in disease.descriptions:
                    observation = scorer.score_probe(image, FindingProbe(f"There is {finding}.", negative), cfg)
                    expected = synthetic_backend.truth(image, finding)
                    assert (observation.verdict == Verdict.POSITIVE) == expected, (image, finding)
                    checked += 1
        assert checked == 80


class TestProbeScorer:
    def test_single_true_finding(self, scorer):
        observation = scorer.score_probe(
            "img05", FindingProbe("Visible pleural line", "Nothing visible"), VlmConfig(psi=0.55))
        assert observation.s_pos == pytest.approx(1.0)
        assert observation.s_neg == 0.0
        assert observation.p_positive == pytest.approx(0.7310585786, abs=1e-9)
        assert observation.verdict == Verdict.POSITIVE

    def test_image_without_findings(self, scorer):
        observation = scorer.score_probe(
            "img09", FindingProbe("Visible pleural line", "Nothing visible"), VlmConfig(psi=0.5))
        assert observation.p_positive == pytest.approx(0.5)
        assert observation.verdict == Verdict.NEGATIVE

    def test_positive_only_skips_negative(self, scorer):
        observation = scorer.score_probe(
            "img05", FindingProbe("Visible pleural line", "Nothing visible"),
            VlmConfig(psi=0.55, mode=ClipMode.POSITIVE_ONLY))
        assert observation.s_neg is None
        assert observation.p_positive == pytest.approx(1.0)

    def test_embeddings_are_cached(self, synthetic_backend):
        cache = CacheManager(16)
        scorer = ProbeScorer(synthetic_backend, cache)
        probe = FindingProbe("Meniscus sign", "Nothing visible")
        first = scorer.score_probe("img08", probe, VlmConfig())
        second = scorer.score_probe("img08", probe, VlmConfig())
        assert first == second
        stats = cache.get_cache_stats()
        assert stats["cache_size"] == 3
        assert stats["hits"] == 3

    def test_observation_dict_round_trip(self, scorer):
        observation = scorer.score_probe("img01", FindingProbe("Widened heart shadow", "Nothing"), VlmConfig())
        assert type(observation).from_dict(observation.to_dict()) == observation


class TestCacheManager:
    def test_lru_eviction(self):
        cache = CacheManager(2)
        cache.cache_embedding("text", "a", np.ones(2))
        cache.cache_embedding("text", "b", np.ones(2))
        assert cache.get_embedding("text", "a") is not None
        cache.cache_embedding("text", "c", np.ones(2))
        assert cache.get_embedding("text", "b") is None
        assert cache.get_embedding("text", "a") is not None

    def test_disabled_cache(self):
        cache = CacheManager(0)
        cache.cache_embedding("image", "x", np.ones(2))
        assert cache.get_embedding("image", "x") is None

    def test_clear_resets_statistics(self):
        cache = CacheManager(4)
        cache.cache_embedding("text", "a", np.ones(2))
        cache.get_embedding("text", "a")
        cache.clear_cache()
        assert cache.get_cache_stats() == {"cache_size": 0, "max_cache_size": 4, "hits": 0, "misses": 0}


class TestRemoteEmbeddingClient:
    def make(self, session, dimension=None):
        return RemoteEmbeddingClient("http://emb.local", dimension=dimension, session=session,
                                     sleep=lambda _: None, max_attempts=2)

    def test_adopts_dimension_from_first_response(self, fake_session):
        session = fake_session(
            FakeResponse(200, {"embedding": [0.1, 0.2, 0.3], "dim": 3}),
            FakeResponse(200, {"embedding": [0.1, 0.2], "dim": 2}),
        )
        client = self.make(session)
        assert client.embed_text("a").tolist() == [0.1, 0.2, 0.3]
        assert client.dimension == 3
        with pytest.raises(DimensionMismatch):
            client.embed_text("b")
        assert session.posts[0]["json"] == {"kind": "text", "payload": "a"}

    def test_declared_dimension_must_match(self, fake_session):
        session = fake_session(FakeResponse(200, {"embedding": [0.1, 0.2], "dim": 3}))
        with pytest.raises(DimensionMismatch):
            self.make(session).embed_text("a")

    def test_missing_image(self, fake_session):
        with pytest.raises(ImageNotFound):
            self.make(fake_session(FakeResponse(404))).embed_image("img-x")

    def test_malformed_response(self, fake_session):
        with pytest.raises(ProtocolError):
            self.make(fake_session(FakeResponse(200, {"vector": [1, 2]}))).embed_text("a")
        with pytest.raises(ProtocolError):
            self.make(fake_session(FakeResponse(200, {"embedding": [1, float("nan")]}))).embed_text("a")

    def test_transient_errors_are_retried(self, fake_session):
        session = fake_session(requests.ConnectionError("down"), FakeResponse(200, {"embedding": [1.0, 0.0]}))
        assert self.make(session).embed_image("img").tolist() == [1.0, 0.0]
        with pytest.raises(BackendError):
            self.make(fake_session(FakeResponse(500), FakeResponse(503))).embed_text("a")

    def test_ping(self, fake_session):
        session = fake_session()
        self.make(session).ping()
        session.get_status = 502
        with pytest.raises(BackendError):
            self.make(session).ping()
        session.get_error = requests.ConnectionError("refused")
        with pytest.raises(BackendError):
            self.make(session).ping()
