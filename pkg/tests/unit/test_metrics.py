import json
import math

import numpy as np
import pytest

from dome.federation import METRIC_COLUMNS, RoundRecord
from dome.metrics import (
    column_values,
    read_json,
    read_metrics_csv,
    training_summary,
    write_json,
    write_metrics_csv,
)


def record(round_id, loss=None, angle=None):
    return RoundRecord(
        round=round_id,
        epoch=1,
        participants=(0, 1),
        aggregate=np.zeros(2),
        g_hat=np.zeros(4),
        retained_r=2,
        rho_spent=0.1 * round_id,
        loss=loss,
        grad_recon_err=0.5,
        subspace_angle=angle,
        bytes_up=16,
        bytes_down=160,
    )


class TestMetricsCsv:
    def test_header_and_blank_diagnostics(self, tmp_path):
        path = tmp_path / "out" / "metrics.csv"
        write_metrics_csv([record(1, loss=2.5), record(2, loss=1.25, angle=0.01)], str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert lines[1] == "1,1,2.5,0.5,,2,0.1,16,160"
        assert lines[2].startswith("2,1,1.25,0.5,0.01,2,")

    def test_reads_back(self, tmp_path):
        path = str(tmp_path / "metrics.csv")
        write_metrics_csv([record(1, loss=2.5), record(2, loss=1.0 / 3.0)], path)
        table = read_metrics_csv(path)
        assert column_values(table, "round") == [1, 2]
        assert column_values(table, "loss") == [2.5, 1.0 / 3.0]
        assert column_values(table, "subspace_angle") == [None, None]

    def test_identical_records_identical_bytes(self, tmp_path):
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        records = [record(i, loss=1.0 / i) for i in range(1, 5)]
        write_metrics_csv(records, str(first))
        write_metrics_csv(records, str(second))
        assert first.read_bytes() == second.read_bytes()


class TestJson:
    def test_sorted_with_trailing_newline(self, tmp_path):
        path = tmp_path / "report.json"
        write_json({"b": 1, "a": [1.5, 2]}, str(path))
        text = path.read_text()
        assert text.endswith("}\n")
        assert text.index('"a"') < text.index('"b"')
        assert read_json(str(path)) == {"a": [1.5, 2], "b": 1}

    def test_infinity_survives(self, tmp_path):
        path = str(tmp_path / "report.json")
        write_json({"epsilon_prime": math.inf}, path)
        assert math.isinf(read_json(path)["epsilon_prime"])


class TestSummary:
    @pytest.mark.parametrize(
        ("epsilon_prime", "holds"),
        (pytest.param(4.0, "True", id="within budget"), pytest.param(9.0, "False", id="over budget")),
    )
    def test_summary(self, tmp_path, epsilon_prime, holds):
        path = str(tmp_path / "metrics.csv")
        write_metrics_csv([record(1, loss=3.0), record(2, loss=1.5)], path)
        privacy = {"rho_spent": 0.2, "epsilon_prime": epsilon_prime, "epsilon": 8.0, "private": True}
        summary = training_summary(read_metrics_csv(path), privacy)
        values = dict(zip(summary.columns["quantity"].values(), summary.columns["value"].values()))
        assert values["rounds"] == "2"
        assert values["final_loss"] == "1.5"
        assert values["bytes_up_per_client"] == "16"
        assert values["budget_holds"] == holds

    def test_report_file_is_plain_json(self, tmp_path):
        path = tmp_path / "report.json"
        write_json({"x": 1}, str(path))
        assert json.loads(path.read_text()) == {"x": 1}
