import json
import math
import os
from typing import Any, Dict, Iterable, Optional, Union

import agate
from dbt.events import AdapterLogger

from dome.federation import METRIC_COLUMNS, RoundRecord
from dome.privacy import PrivacyReport

logger = AdapterLogger("Dome")

Cell = Union[int, float, None]


def _format(value: Cell) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, (bool, int)):
        return str(int(value))
    return repr(float(value))


def _parse(value: Optional[str]) -> Cell:
    if value is None or value == "":
        return None
    if value.lstrip("-").isdigit():
        return int(value)
    return float(value)


def metrics_table(records: Iterable[RoundRecord]) -> agate.Table:
    rows = [[_format(record.to_row()[column]) for column in METRIC_COLUMNS] for record in records]
    return agate.Table(rows, list(METRIC_COLUMNS), [agate.Text()] * len(METRIC_COLUMNS))


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_metrics_csv(records: Iterable[RoundRecord], path: str) -> agate.Table:
    _ensure_parent(path)
    table = metrics_table(records)
    table.to_csv(path)
    logger.info(f"Wrote {len(table.rows)} rounds of metrics to {path}")
    return table


def read_metrics_csv(path: str) -> agate.Table:
    return agate.Table.from_csv(path, column_types=[agate.Text()] * len(METRIC_COLUMNS))


def column_values(table: agate.Table, column: str) -> list:
    return [_parse(value) for value in table.columns[column].values()]


def write_json(obj: Dict[str, Any], path: str) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, sort_keys=True, indent=2))
        f.write("\n")
    logger.info(f"Wrote {path}")


def read_json(path: str) -> Dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_privacy_report(report: PrivacyReport, path: str) -> None:
    write_json(report.to_dict(), path)


def training_summary(table: agate.Table, privacy: Dict[str, Any]) -> agate.Table:
    """Two-column summary of a finished run, built from its metrics file and privacy report."""
    losses = [value for value in column_values(table, "loss") if value is not None]
    uplink = column_values(table, "bytes_up")
    epsilon_prime = privacy["epsilon_prime"]
    rows = [
        ("rounds", str(len(table.rows))),
        ("epochs", str(max((value for value in column_values(table, "epoch")), default=0))),
        ("final_loss", repr(losses[-1]) if losses else ""),
        ("best_loss", repr(min(losses)) if losses else ""),
        ("bytes_up_per_client", str(uplink[-1]) if uplink else ""),
        ("rho_spent", repr(float(privacy["rho_spent"]))),
        ("epsilon_prime", repr(float(epsilon_prime))),
        ("epsilon", repr(float(privacy["epsilon"]))),
        ("budget_holds", str(not privacy["private"] or epsilon_prime <= privacy["epsilon"])),
        ("private", str(privacy["private"])),
    ]
    return agate.Table(rows, ["quantity", "value"], [agate.Text(), agate.Text()])


def is_finite(value: Cell) -> bool:
    return value is not None and math.isfinite(value)
