from __future__ import annotations

import math

import numpy as np
import pytest
from fastapi.testclient import TestClient

from clinex_sidecar.backends import HashedSentenceEncoder, HashedTokenEncoder, RuleLexiconNER
from clinex_sidecar.config import SidecarConfig
from clinex_sidecar.service import create_app


@pytest.fixture(scope="module")
def client() -> TestClient:
    return TestClient(create_app(SidecarConfig(sentence_dim=384, token_dim=128)))


class TestHealth:
    def test_reports_all_three_model_ids_and_dims(self, client):
        data = client.get("/health").json()
        assert data["status"] == "ok"
        assert data["sentence_model"] == "hashed-bow-384-v1"
        assert data["token_model"] == "hashed-tok-128-v1"
        assert data["ner_model"] == "lexicon-rule-ner-v1"
        assert data["sentence_dim"] == 384
        assert data["token_dim"] == 128


class TestEmbedSentence:
    def test_unit_norm_and_declared_dim(self, client):
        data = client.post("/embed_sentence", json={"text": "chest pain and fever"}).json()
        vector = np.asarray(data["vector"])
        assert vector.shape == (384,)
        assert math.isclose(float(np.linalg.norm(vector)), 1.0, abs_tol=1e-6)

    def test_deterministic(self, client):
        a = client.post("/embed_sentence", json={"text": "same text"}).json()["vector"]
        b = client.post("/embed_sentence", json={"text": "same text"}).json()["vector"]
        assert a == b

    def test_empty_text_is_400(self, client):
        assert client.post("/embed_sentence", json={"text": ""}).status_code == 400
        assert client.post("/embed_sentence", json={"text": "   "}).status_code == 400


class TestEmbedTokens:
    def test_rows_match_token_count(self, client):
        data = client.post("/embed_tokens", json={"text": "aspirin given"}).json()
        assert data["tokens"] == ["aspirin", "given"]
        matrix = np.asarray(data["vectors"])
        assert matrix.shape == (2, 128)

    def test_every_row_unit_norm(self, client):
        data = client.post("/embed_tokens", json={"text": "fever cough dyspnea fatigue"}).json()
        matrix = np.asarray(data["vectors"])
        assert np.abs(np.linalg.norm(matrix, axis=1) - 1.0).max() < 1e-6

    def test_identical_tokens_identical_rows(self, client):
        data = client.post("/embed_tokens", json={"text": "fever then fever"}).json()
        matrix = np.asarray(data["vectors"])
        assert np.array_equal(matrix[0], matrix[2])

    def test_empty_text_is_400(self, client):
        assert client.post("/embed_tokens", json={"text": ""}).status_code == 400


class TestNer:
    def test_frozen_fixture_sentence(self, client):
        data = client.post("/ner", json={"text": "treated with aspirin and warfarin"}).json()
        assert data["entities"] == [
            {"text": "aspirin", "label": "medication"},
            {"text": "warfarin", "label": "medication"},
        ]

    def test_empty_text_returns_empty_list(self, client):
        assert client.post("/ner", json={"text": ""}).json() == {"entities": []}

    def test_no_entities_in_function_words(self, client):
        assert client.post("/ner", json={"text": "the the the"}).json() == {"entities": []}

    def test_suffix_rules_and_multiword(self, client):
        text = "A 62-year-old woman with cholangitis was given enoxaparin for atrial fibrillation."
        entities = client.post("/ner", json={"text": text}).json()["entities"]
        assert {"text": "cholangitis", "label": "diagnosis"} in entities
        assert {"text": "enoxaparin", "label": "medication"} in entities
        assert {"text": "atrial fibrillation", "label": "diagnosis"} in entities


class TestModelNotLoaded:
    def test_missing_model_answers_503(self):
        app = create_app(
            SidecarConfig(),
            sentence_encoder=HashedSentenceEncoder(dim=384),
            token_encoder=HashedTokenEncoder(dim=128),
            ner_model=None,
            load_defaults=False,
        )
        client = TestClient(app)
        assert client.post("/ner", json={"text": "aspirin"}).status_code == 503
        assert client.post("/embed_sentence", json={"text": "x"}).status_code == 200

    def test_health_shows_missing_model(self):
        app = create_app(
            SidecarConfig(),
            sentence_encoder=HashedSentenceEncoder(dim=384),
            token_encoder=None,
            ner_model=None,
            load_defaults=False,
        )
        data = TestClient(app).get("/health").json()
        assert data["token_model"] is None


class TestStartupSelfCheck:
    def test_declared_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="declares"):
            create_app(
                SidecarConfig(sentence_dim=64),
                sentence_encoder=HashedSentenceEncoder(dim=384),
                load_defaults=False,
            )


class TestBackendsDirect:
    def test_sentence_encoder_stable_across_instances(self):
        a = HashedSentenceEncoder(dim=64).encode("pulmonary embolism")
        b = HashedSentenceEncoder(dim=64).encode("pulmonary embolism")
        assert np.array_equal(a, b)

    def test_suffix_stoplist(self):
        assert RuleLexiconNER().recognize("the patient fell into a coma") == []
