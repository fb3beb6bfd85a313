import json
import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient

from sepsense import service as svc
from sepsense.bundle import ModelBundle
from sepsense.uncertainty import CorrelationMatrix


@pytest.fixture(scope="module")
def bundle(schema, small_imputer, small_predictor, small_rho):
    return ModelBundle(schema=schema, imputer=small_imputer,
                       predictors={"ras": small_predictor}, rho=small_rho)


@pytest.fixture()
def console(bundle, small_splits, tmp_path):
    _, _, test = small_splits
    state = svc.ConsoleState(bundle, test[:6],
                             observation_log=str(tmp_path / "obs.jsonl"),
                             score_masks=2, uw_samples=4)
    return state


@pytest.fixture()
def client(console):
    app = svc.create_app(state=console)
    return TestClient(app)


class TestPatientList:
    def test_all_patients_listed_with_tiers(self, client, console):
        body = client.get("/patients").json()
        assert len(body) == len(console.records)
        for row in body:
            assert set(row) == {"id", "latest_risk", "latest_U", "risk_tier"}
            assert row["risk_tier"] == svc.risk_tier(row["latest_risk"])

    def test_tier_thresholds(self):
        assert svc.risk_tier(0.1) == "green"
        assert svc.risk_tier(0.33) == "yellow"
        assert svc.risk_tier(0.7) == "red"
        assert svc.risk_tier(0.66) == "red"

    def test_repeated_get_identical(self, client):
        assert client.get("/patients").content == client.get("/patients").content

    def test_no_cohort_gives_503(self):
        app = svc.create_app(state=None)
        c = TestClient(app)
        r = c.get("/patients")
        assert r.status_code == 503
        assert r.json()["code"] == "no_cohort"


class TestTrajectory:
    def test_shape_and_band(self, client, console):
        pid = next(iter(console.records))
        body = client.get(f"/patients/{pid}/trajectory").json()
        rec = console.records[pid]
        assert len(body["hours"]) == rec.n
        for i, row in enumerate(body["hours"]):
            assert row["hour"] == i
            total = row["U_x"] + row["U_w"]
            lo = max(row["risk"] - 2 * np.sqrt(total), 0.0)
            hi = min(row["risk"] + 2 * np.sqrt(total), 1.0)
            assert row["band_low"] == pytest.approx(lo)
            assert row["band_high"] == pytest.approx(hi)
            assert 0.0 <= row["band_low"] <= row["band_high"] <= 1.0

    def test_unknown_patient_404(self, client):
        r = client.get("/patients/nobody/trajectory")
        assert r.status_code == 404
        assert r.json()["code"] == "not_found"

    def test_observed_lists_match_mask(self, client, console, schema):
        pid = next(iter(console.records))
        rec = console.records[pid]
        body = client.get(f"/patients/{pid}/trajectory").json()
        for i, row in enumerate(body["hours"]):
            expected = {schema.names[j] for j in np.flatnonzero(rec.M_obs[i])}
            assert set(row["observed"]) == expected


class TestRecommendations:
    def test_ranked_descending_unobserved_only(self, client, console, schema):
        pid = next(iter(console.records))
        rec = console.records[pid]
        hour = rec.n - 1
        body = client.get(f"/patients/{pid}/recommendations",
                          params={"hour": hour, "top": 5}).json()
        items = body["items"]
        reductions = [i["expected_reduction"] for i in items]
        assert reductions == sorted(reductions, reverse=True)
        for item in items:
            j = schema.index(item["variable"])
            assert not rec.M_obs[hour, j]
            assert item["sigma"] > 0

    def test_top_clamped_to_unobserved_count(self, client, console):
        pid = next(iter(console.records))
        hour = console.records[pid].n - 1
        body = client.get(f"/patients/{pid}/recommendations",
                          params={"hour": hour, "top": 999}).json()
        unobs = (~console.records[pid].M_obs[hour]).sum()
        lab_unobs = sum(1 for j in np.flatnonzero(~console.records[pid].M_obs[hour])
                        if not console.schema.vital_flags[j])
        assert len(body["items"]) == lab_unobs <= unobs

    def test_hour_out_of_range_422(self, client, console):
        pid = next(iter(console.records))
        r = client.get(f"/patients/{pid}/recommendations",
                       params={"hour": 999, "top": 3})
        assert r.status_code == 422
        assert r.json()["code"] == "invalid"

    def test_top1_matches_whatif_reduction_under_diagonal_rho(
            self, bundle, small_splits, tmp_path):
        # with diagonal correlations, the single-variable counterfactual
        # reduction equals that variable's recommendation score exactly
        _, _, test = small_splits
        diag = CorrelationMatrix(rho=np.eye(bundle.schema.k),
                                 support=np.zeros((bundle.schema.k,) * 2, int))
        b2 = ModelBundle(schema=bundle.schema, imputer=bundle.imputer,
                         predictors=bundle.predictors, rho=diag)
        state = svc.ConsoleState(b2, test[:2], score_masks=2, uw_samples=4)
        app = svc.create_app(state=state)
        client = TestClient(app)
        pid = next(iter(state.records))
        hour = state.records[pid].n - 1
        rec_body = client.get(f"/patients/{pid}/recommendations",
                              params={"hour": hour, "top": 1}).json()
        if not rec_body["items"]:
            pytest.skip("fully observed hour")
        item = rec_body["items"][0]
        wi = client.post(f"/patients/{pid}/whatif",
                         json={"hour": hour, "variables": [item["variable"]]}).json()
        reduction = wi["before"]["U_x"] - wi["after"]["U_x"]
        assert reduction == pytest.approx(item["expected_reduction"], rel=1e-9)


class TestWhatIf:
    def test_empty_selection_identity(self, client, console):
        pid = next(iter(console.records))
        hour = console.records[pid].n - 1
        body = client.post(f"/patients/{pid}/whatif",
                           json={"hour": hour, "variables": []}).json()
        assert body["after"] == body["before"]

    def test_selecting_all_unobserved_zeroes_ux(self, client, console, schema):
        pid = next(iter(console.records))
        rec = console.records[pid]
        hour = rec.n - 1
        names = [schema.names[j] for j in np.flatnonzero(~rec.M_obs[hour])
                 if not schema.vital_flags[j]]
        body = client.post(f"/patients/{pid}/whatif",
                           json={"hour": hour, "variables": names}).json()
        assert body["after"]["U_x"] == pytest.approx(0.0, abs=1e-12)

    def test_observed_variable_conflict_409(self, client, console, schema):
        pid = next(iter(console.records))
        rec = console.records[pid]
        hour = rec.n - 1
        name = schema.names[int(np.flatnonzero(rec.M_obs[hour])[0])]
        r = client.post(f"/patients/{pid}/whatif",
                        json={"hour": hour, "variables": [name]})
        assert r.status_code == 409
        assert name in r.json()["message"]

    def test_whatif_never_mutates_state(self, client, console, schema):
        pid = next(iter(console.records))
        rec = console.records[pid]
        hour = rec.n - 1
        before = client.get(f"/patients/{pid}/trajectory").content
        names = [schema.names[j] for j in np.flatnonzero(~rec.M_obs[hour])
                 if not schema.vital_flags[j]][:3]
        for k in range(1, len(names) + 1):
            client.post(f"/patients/{pid}/whatif",
                        json={"hour": hour, "variables": names[:k]})
        assert client.get(f"/patients/{pid}/trajectory").content == before


class TestObserve:
    def _target(self, console, schema):
        pid = next(iter(console.records))
        rec = console.records[pid]
        hour = rec.n - 1
        j = next(int(j) for j in np.flatnonzero(~rec.M_obs[hour])
                 if not schema.vital_flags[j])
        return pid, hour, schema.names[j], j

    def test_observe_updates_trajectory_and_persists(self, client, console,
                                                     schema, bundle,
                                                     small_splits):
        pid, hour, name, j = self._target(console, schema)
        r = client.post(f"/patients/{pid}/observe",
                        json={"hour": hour, "variable": name, "value": 4.2})
        assert r.status_code == 200
        assert name in r.json()["hours"][hour]["observed"]
        assert console.records[pid].Z[hour, j] == 4.2

        # recommendations no longer offer the observed variable
        rec_body = client.get(f"/patients/{pid}/recommendations",
                              params={"hour": hour, "top": 99}).json()
        assert name not in [i["variable"] for i in rec_body["items"]]

        # durable across a service restart on the same log
        _, _, test = small_splits
        state2 = svc.ConsoleState(bundle, test[:6],
                                  observation_log=console.observation_log,
                                  score_masks=2, uw_samples=4)
        assert state2.records[pid].M_obs[hour, j]
        assert state2.records[pid].Z[hour, j] == 4.2

    def test_conflict_409(self, client, console, schema):
        pid, hour, name, j = self._target(console, schema)
        assert client.post(f"/patients/{pid}/observe",
                           json={"hour": hour, "variable": name,
                                 "value": 1.0}).status_code == 200
        r = client.post(f"/patients/{pid}/observe",
                        json={"hour": hour, "variable": name, "value": 2.0})
        assert r.status_code == 409

    def test_concurrent_observes_one_winner(self, bundle, small_splits,
                                            tmp_path, schema):
        _, _, test = small_splits
        state = svc.ConsoleState(bundle, test[:2],
                                 observation_log=str(tmp_path / "log.jsonl"),
                                 score_masks=2, uw_samples=4)
        app = svc.create_app(state=state)
        client = TestClient(app)
        pid = next(iter(state.records))
        rec = state.records[pid]
        hour = rec.n - 1
        name = next(schema.names[int(j)]
                    for j in np.flatnonzero(~rec.M_obs[hour])
                    if not schema.vital_flags[int(j)])
        codes = []

        def shoot():
            r = client.post(f"/patients/{pid}/observe",
                            json={"hour": hour, "variable": name, "value": 1.0})
            codes.append(r.status_code)

        threads = [threading.Thread(target=shoot) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(codes) == [200, 409]

    def test_non_finite_value_422(self, client, console, schema):
        pid, hour, name, _ = self._target(console, schema)
        raw = '{"hour": %d, "variable": "%s", "value": NaN}' % (hour, name)
        r = client.post(f"/patients/{pid}/observe", content=raw,
                        headers={"Content-Type": "application/json"})
        assert r.status_code == 422
        assert not console.records[pid].M_obs[hour, schema.index(name)]

    def test_audit_log_records_mutations(self, client, console, schema):
        pid, hour, name, _ = self._target(console, schema)
        client.post(f"/patients/{pid}/observe",
                    json={"hour": hour, "variable": name, "value": 3.3})
        lines = open(console.observation_log).read().splitlines()
        entry = json.loads(lines[-1])
        assert entry["patient"] == pid
        assert entry["variable"] == name
        assert entry["value"] == 3.3
        assert "ts" in entry


def test_every_error_carries_code_and_message(client):
    for response in (client.get("/patients/ghost/trajectory"),
                     client.post("/patients/ghost/whatif",
                                 json={"hour": "x", "variables": []})):
        body = response.json()
        assert "code" in body and "message" in body
