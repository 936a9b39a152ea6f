import pytest
from fastapi.testclient import TestClient
from numpy.testing import assert_allclose

from app.main import app
from app.services.flow_model import save_checkpoint


@pytest.fixture
def client(isolated_settings):
    with TestClient(app) as c:
        yield c


@pytest.fixture
def saved_model(isolated_settings, flat_model):
    save_checkpoint(flat_model, f"{isolated_settings.MODEL_DIR}/flat")
    return flat_model


class TestHealth:
    @pytest.mark.parametrize("path", ["/", "/health", "/api/v1/health"])
    def test_ok(self, client, path):
        response = client.get(path)
        assert response.status_code == 200
        assert response.json()["status"] == "ok"

    def test_lists_checkpoints(self, client, saved_model):
        assert client.get("/health").json()["checkpoints"] == ["flat"]

    def test_reports_timing(self, client):
        assert "x-elapsed-ms" in client.get("/").headers


class TestLedger:
    def test_counts_a_config(self, client, make_config):
        response = client.post("/api/v1/ledger", json=make_config("decomp").model_dump(mode="json"))
        assert response.status_code == 200
        body = response.json()
        assert body["scheme"] == "decomp"
        assert (body["ledger"]["trunk"], body["ledger"]["heads"], body["ledger"]["total"]) == (1320, 54, 1374)

    def test_inconsistent_config_is_rejected(self, client, make_config):
        body = make_config("nanoflow").model_dump(mode="json")
        body["groups"] = 3
        response = client.post("/api/v1/ledger", json=body)
        assert response.status_code == 422
        assert "divide" in response.json()["detail"]


class TestSample:
    def test_draws_from_a_checkpoint(self, client, saved_model):
        response = client.post("/api/v1/sample", json={"checkpoint": "flat", "n": 3, "temperature": 0.5, "seed": 1})
        assert response.status_code == 200
        assert_allclose(response.json()["samples"], saved_model.sample(3, 0.5, 1))

    def test_paths_cannot_escape_the_model_dir(self, client, saved_model):
        response = client.post("/api/v1/sample", json={"checkpoint": "../flat"})
        assert response.status_code == 422

    def test_missing_checkpoint(self, client):
        response = client.post("/api/v1/sample", json={"checkpoint": "nowhere"})
        assert response.status_code == 404

    def test_temperature_must_be_positive(self, client, saved_model):
        response = client.post("/api/v1/sample", json={"checkpoint": "flat", "temperature": 0})
        assert response.status_code == 422


class TestLogLikelihood:
    def test_matches_the_model(self, client, saved_model, batch):
        response = client.post("/api/v1/log-likelihood", json={"checkpoint": "flat", "data": batch.tolist()})
        assert response.status_code == 200
        body = response.json()
        expected = saved_model.log_likelihood(batch).numpy()
        assert_allclose(body["log_likelihood"], expected)
        assert_allclose(body["per_dim"], expected / 4)
        assert body["mean_per_dim"] == pytest.approx(expected.mean() / 4)

    def test_wrong_record_shape(self, client, saved_model):
        response = client.post("/api/v1/log-likelihood", json={"checkpoint": "flat", "data": [[0.0, 1.0]]})
        assert response.status_code == 422
