from __future__ import annotations

import json
import time
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from clinex_sidecar.bpe import BpeTokenizer
from clinex_sidecar.serve_adapter import create_app
from clinex_sidecar.train import (
    TrainingConfig,
    TrainingDataError,
    complete_text,
    load_artifact,
    load_pairs,
    template_hash_from_pairs,
    train_adapter,
    verify_manifest,
)

PAIRS = Path(__file__).parent / "data" / "pairs.jsonl"

# The 15 structured-output categories, as documented in the harness wire
# contract the pairs were exported under.
KNOWN_CATEGORIES = {
    "age", "comorbidities", "diagnosis", "diagnostic_procedures", "family_history",
    "gender", "interventional_therapy", "laboratory_values", "life_style",
    "medical_surgical_history", "pathology", "patient_outcome_assessment",
    "pharmacological_therapy", "signs_symptoms", "social_history",
}


def parse_structured(text: str) -> dict:
    """Wire-contract check: first JSON object in the text, string values,
    unknown keys dropped.  Raises ValueError when no object parses."""
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except ValueError:
            pass
        else:
            if isinstance(value, dict):
                return {
                    key: value[key]
                    for key in value
                    if key in KNOWN_CATEGORIES and isinstance(value[key], str)
                }
        start = text.find("{", start + 1)
    raise ValueError("no JSON object in completion")


SMOKE = TrainingConfig(steps=50, seed=0)


@pytest.fixture(scope="module")
def smoke_result(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("artifact")
    started = time.monotonic()
    result = train_adapter(PAIRS, out_dir, SMOKE)
    result.train_seconds = time.monotonic() - started
    return result


class TestBpeTokenizer:
    def test_encoding_is_exactly_invertible(self):
        pairs = load_pairs(PAIRS)
        texts = [p["prompt"] for p in pairs] + [p["completion"] for p in pairs]
        tokenizer = BpeTokenizer.train(texts, 200)
        for text in texts:
            assert tokenizer.decode(tokenizer.encode(text)) == text

    def test_save_load_round_trip(self, tmp_path):
        tokenizer = BpeTokenizer.train(["abc abc abd", "abd abc"], 10)
        tokenizer.save(tmp_path / "tok.json")
        loaded = BpeTokenizer.load(tmp_path / "tok.json")
        assert loaded.encode("abc abd") == tokenizer.encode("abc abd")

    def test_merges_absorb_structured_glue(self):
        pairs = load_pairs(PAIRS)
        tokenizer = BpeTokenizer.train([p["completion"] for p in pairs], 300)
        assert any('": "' in piece for piece in tokenizer.vocab)


class TestPairsContract:
    def test_fixture_has_32_pairs(self):
        assert len(load_pairs(PAIRS)) == 32

    def test_template_hash_matches_exporter_manifest(self):
        pairs = load_pairs(PAIRS)
        manifest = json.loads(PAIRS.with_suffix(".manifest.json").read_text())
        assert template_hash_from_pairs(pairs) == manifest["minimal_template_sha256"]
        assert verify_manifest(PAIRS, pairs) == manifest["minimal_template_sha256"]

    def test_tampered_template_detected(self, tmp_path):
        pairs = load_pairs(PAIRS)
        pairs[3]["prompt"] = "Do something else.\n\nClinical report:\n" + pairs[3]["prompt"]
        tampered = tmp_path / "pairs.jsonl"
        with tampered.open("w") as handle:
            for pair in pairs:
                handle.write(json.dumps(pair) + "\n")
        (tmp_path / "pairs.manifest.json").write_text(
            PAIRS.with_suffix(".manifest.json").read_text()
        )
        with pytest.raises(TrainingDataError, match="template"):
            verify_manifest(tampered, load_pairs(tampered))


class TestSmokeTraining:
    def test_loss_decreases_over_50_steps(self, smoke_result):
        assert len(smoke_result.losses) == 50
        assert smoke_result.final_loss < smoke_result.initial_loss
        assert smoke_result.final_loss < 1.0  # memorization well under way

    def test_runtime_within_budget(self, smoke_result):
        assert smoke_result.train_seconds < 900  # 15 min budget; CPU run takes ~20 s

    def test_artifact_contents(self, smoke_result):
        files = {path.name for path in smoke_result.artifact_dir.iterdir()}
        assert {"base.pt", "adapter.pt", "tokenizer.json", "config.json", "losses.jsonl"} <= files
        losses = [
            json.loads(line)["loss"]
            for line in (smoke_result.artifact_dir / "losses.jsonl").read_text().splitlines()
        ]
        assert losses == smoke_result.losses

    def test_served_adapter_answers_training_prompt_parseably(self, smoke_result):
        model, tokenizer = load_artifact(smoke_result.artifact_dir)
        first_pair = load_pairs(PAIRS)[0]
        completion = complete_text(model, tokenizer, first_pair["prompt"])
        parsed = parse_structured(completion)
        assert parsed, f"no known categories in: {completion[:120]}"
        for value in parsed.values():
            assert isinstance(value, str)

    def test_chat_endpoint_serves_adapter(self, smoke_result):
        client = TestClient(create_app(str(smoke_result.artifact_dir)))
        first_pair = load_pairs(PAIRS)[0]
        response = client.post(
            "/chat/completions",
            json={
                "model": "adapter",
                "messages": [
                    {"role": "system", "content": first_pair["system"]},
                    {"role": "user", "content": first_pair["prompt"]},
                ],
            },
        )
        assert response.status_code == 200
        completion = response.json()["choices"][0]["message"]["content"]
        assert parse_structured(completion)

    def test_fixed_seed_reproduces_data_order_and_loss_curve(self, tmp_path):
        config = TrainingConfig(steps=6, seed=13, batch_size=8)
        first = train_adapter(PAIRS, tmp_path / "a", config)
        second = train_adapter(PAIRS, tmp_path / "b", config)
        for loss_a, loss_b in zip(first.losses, second.losses):
            assert loss_a == pytest.approx(loss_b, abs=1e-5)


class TestTrainingValidation:
    def test_limit_subsets_pairs(self):
        assert len(load_pairs(PAIRS, limit=8)) == 8

    def test_missing_fields_rejected(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "x", "prompt": "p"}\n', encoding="utf-8")
        with pytest.raises(TrainingDataError):
            load_pairs(bad)

    def test_empty_pairs_rejected(self, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("", encoding="utf-8")
        with pytest.raises(TrainingDataError):
            load_pairs(empty)
