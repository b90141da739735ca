import json
import math
import os
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from core.errors import DataError, StorageError
from core.harness import CELL_KEYS, EXPERIMENT_KINDS, SweepReport
from core.logging_utils import log_debug, log_info

CSV_FLOAT_FORMAT = "%.6g"
_SCALARS = (str, int, float, bool, type(None))


def _plain(value: Any) -> Any:
    """JSON-ready copy: numpy scalars unwrapped, NaN/inf written as null."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def report_basename(report: SweepReport) -> str:
    return f"{report.kind}_seed{report.master_seed}"


def report_frame(report: SweepReport) -> pd.DataFrame:
    """
    Tidy table: one `cell` row per grid cell followed by the `summary` rows.
    Only scalar fields become columns: `row_type`, the kind's cell keys, then
    every other field sorted by name, so a reloaded report renders the same CSV.
    """
    rows = [dict(row_type='cell', **row) for row in report.cells]
    rows += [dict(row_type='summary', **row) for row in report.summary]
    scalar_keys = {key for row in rows for key, value in row.items()
                   if isinstance(value, _SCALARS + (np.generic,))}
    leading = ['row_type'] + [key for key in CELL_KEYS.get(report.kind, ()) if key in scalar_keys]
    columns = leading + sorted(scalar_keys - set(leading))
    return pd.DataFrame([{key: row.get(key) for key in columns} for row in rows], columns=columns)


def _write_text(path: str, text: str):
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    except OSError as e:
        raise StorageError(f"Could not write {path}: {e}") from e


def emit_report(report: SweepReport, output_dir: str) -> List[str]:
    """
    Writes `<kind>_seed<master>.json` (full precision, config echo) and the
    matching tidy CSV, plus `_samples.csv` when per-sample rows were kept.
    Identical reports always give identical bytes.
    """
    try:
        os.makedirs(output_dir, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Could not create output directory {output_dir}: {e}") from e

    base = os.path.join(output_dir, report_basename(report))
    written = []

    json_path = base + ".json"
    _write_text(json_path, json.dumps(_plain(report.to_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n")
    written.append(json_path)

    csv_path = base + ".csv"
    _write_text(csv_path, report_frame(report).to_csv(index=False, float_format=CSV_FLOAT_FORMAT,
                                                      lineterminator="\n"))
    written.append(csv_path)

    if report.samples is not None:
        samples_path = base + "_samples.csv"
        _write_text(samples_path, report.samples.to_csv(index=False, float_format=CSV_FLOAT_FORMAT,
                                                        lineterminator="\n"))
        written.append(samples_path)

    for path in written:
        log_debug(f"Wrote {path}")
    log_info(f"{report.kind} report: {len(report.cells)} cells, {len(report.summary)} summary rows -> {output_dir}")
    return written


def load_report(path: str) -> SweepReport:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data: Dict[str, Any] = json.load(f)
    except FileNotFoundError:
        raise StorageError(f"Report not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"Report {path} is not valid JSON: {e}") from e
    except OSError as e:
        raise StorageError(f"Could not read report {path}: {e}") from e

    required = ('kind', 'version', 'created_at', 'input_sha256', 'master_seed', 'config', 'cells', 'summary')
    missing = [key for key in required if key not in data]
    if missing:
        raise DataError(f"Report {path} is missing {missing}")
    if data['kind'] not in EXPERIMENT_KINDS:
        raise DataError(f"Report {path} has unknown kind '{data['kind']}'")
    return SweepReport(
        kind=data['kind'],
        cells=data['cells'],
        summary=data['summary'],
        config=data['config'],
        master_seed=data['master_seed'],
        input_sha256=data['input_sha256'],
        created_at=data['created_at'],
        version=data['version'],
        extras=data.get('extras', {}),
    )
