import json

import numpy as np
import pandas as pd
import pytest

from nlhomog.homogenization import artifacts as ha
from nlhomog.homogenization import evolution as hv
from nlhomog.homogenization import oracle as ho


def _report(inverse_epsilon, errors):
    times = np.linspace(0.0, 0.1, len(errors))
    return hv.EvolutionReport(
        epsilon=1.0 / inverse_epsilon, times=times, l2_error=np.asarray(errors),
        weighted_mass=np.full(len(errors), 0.5),
        weighted_energy=np.linspace(0.5, 0.4, len(errors)),
        sup_error=max(errors), mass_drift=0.0, max_energy_increase=-1e-3, frame_gap=0.0,
        comparison_excess=0.0, plain_final_error=errors[-1], ansatz_final_error=errors[-1] / 2,
        mode_amplitudes=0.5 * np.exp(-4.0 * np.pi ** 2 * 0.02 * times), wavevector=(1,),
        steps=10, dt=0.01)


class TestJson:
    def test_to_jsonable(self):
        value = ha.to_jsonable({"a": np.arange(3), 2: np.float64(0.5), "c": (np.int64(1), 2)})
        assert value == {"a": [0, 1, 2], "2": 0.5, "c": [1, 2]}

    def test_write_json_sorts_keys(self, tmp_path):
        path = ha.write_json(str(tmp_path / "x.json"), {"b": np.eye(2), "a": 1})
        text = open(path, encoding="utf-8").read()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text)["b"] == [[1.0, 0.0], [0.0, 1.0]]

    def test_manifest_has_no_timestamps(self):
        manifest = ha.manifest({"study": "cell"}, "cell", "0.1.0")
        assert set(manifest) == {"study", "config", "versions"}
        assert manifest["versions"]["nlhomog"] == "0.1.0"

    def test_oracle_payload(self):
        report = ho.OracleReport({name: 0.0 for name in ho.COMPARED_FIELDS}, 1e-8)
        assert ha.oracle_payload(report)["passed"]


class TestEvolutionTables:
    def test_csv_name_and_precision(self, tmp_path):
        report = _report(16, [0.0, 1.0 / 3.0, 0.25])
        path = ha.write_evolution_csv(report, str(tmp_path))
        assert path.endswith("evolve_eps16.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ha.EVOLUTION_COLUMNS
        assert frame["l2_error"][1] == 1.0 / 3.0

    def test_paths_ordered_by_inverse_epsilon(self, tmp_path):
        for m in (32, 8, 16):
            ha.write_evolution_csv(_report(m, [0.0, 0.1]), str(tmp_path))
        names = [p.rsplit("/", 1)[-1] for p in ha.get_evolution_csv_paths(str(tmp_path))]
        assert names == ["evolve_eps8.csv", "evolve_eps16.csv", "evolve_eps32.csv"]

    def test_aggregate(self, tmp_path):
        ha.write_evolution_csv(_report(8, [0.0, 0.2, 0.1]), str(tmp_path))
        ha.write_evolution_csv(_report(16, [0.0, 0.1, 0.05]), str(tmp_path))
        table = ha.aggregate_evolution(ha.read_evolution_csvs(str(tmp_path)))
        assert list(table["inverse_epsilon"]) == [8, 16]
        np.testing.assert_allclose(table["sup_error"], [0.2, 0.1])
        np.testing.assert_allclose(table["energy_first"], [0.5, 0.5])
        np.testing.assert_allclose(table["energy_last"], [0.4, 0.4])

    def test_summary(self):
        reports = [_report(8, [0.0, 0.1, 0.2, 0.2, 0.2]), _report(16, [0.0, 0.05, 0.1, 0.1, 0.1])]
        summary = hv.ConvergenceSummary((1 / 8, 1 / 16), (0.2, 0.1), (0.5,), True)
        payload = ha.evolution_summary(reports, summary, np.array([[0.02]]))
        assert [run["inverse_epsilon"] for run in payload["runs"]] == [8, 16]
        assert payload["runs"][0]["mode_decay_diffusivity"] == pytest.approx(0.02, rel=1e-10)
        assert payload["monotone"]

    def test_summary_records_csv_traces(self, tmp_path):
        reports = [_report(8, [0.0, 0.1, 0.2, 0.2, 0.2]), _report(16, [0.0, 0.05, 0.1, 0.1, 0.1])]
        for report in reports:
            ha.write_evolution_csv(report, str(tmp_path))
        summary = hv.ConvergenceSummary((1 / 8, 1 / 16), (0.2, 0.1), (0.5,), True)
        traces = ha.aggregate_evolution(ha.read_evolution_csvs(str(tmp_path)))
        payload = ha.evolution_summary(reports, summary, np.array([[0.02]]), traces)
        assert [trace["inverse_epsilon"] for trace in payload["traces"]] == [8, 16]
        assert payload["traces"][1]["sup_error"] == 0.1
        assert "traces" not in ha.evolution_summary(reports, summary, np.array([[0.02]]))
