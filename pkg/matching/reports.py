"""
Deterministic CSV / JSON emitters.

Every document carries its provenance (the command and all flags) and no
timestamps, so equal invocations produce byte-identical files.
"""
import json
import logging
import math
import os
import sys
from fractions import Fraction
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"


def format_float(value: float) -> str:
    return FLOAT_FORMAT % value


def normalise(value: Any) -> Any:
    """Converts results into JSON-ready values; floats keep 12 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return str(value)
        return float(format_float(value))
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, np.ndarray):
        return normalise(value.tolist())
    if isinstance(value, Mapping):
        return {str(key): normalise(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [normalise(item) for item in value]
    if isinstance(value, pd.DataFrame):
        return normalise(value.to_dict(orient="records"))
    if hasattr(value, "model_dump"):
        return normalise(value.model_dump())
    return value


def provenance_header(provenance: Mapping[str, Any]) -> str:
    """One '# key=value' line per provenance entry, in insertion order."""
    return "".join(f"# {key}={_provenance_value(value)}\n" for key, value in provenance.items())


def _provenance_value(value: Any) -> str:
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_provenance_value(v) for v in value)
    return str(value)


def csv_document(frame: pd.DataFrame, provenance: Mapping[str, Any]) -> str:
    body = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return provenance_header(provenance) + body


def json_document(result: Any, provenance: Mapping[str, Any]) -> str:
    payload: Dict[str, Any] = {"provenance": normalise(dict(provenance)), "result": normalise(result)}
    return json.dumps(payload, indent=2) + "\n"


def write_output(text: str, destination: Optional[Union[str, os.PathLike]] = None) -> None:
    """
    Writes a finished document to a file, or to stdout when no path is given.

    Args:
        text: Document contents.
        destination: Output path; parent directories are created as needed.
    """
    if destination is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    directory = os.path.dirname(os.fspath(destination))
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        with open(destination, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        logger.info(f"Wrote report to {destination}")
    except OSError as e:
        logger.error(f"Failed to write report {destination}: {e}")
        raise
