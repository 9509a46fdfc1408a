"""Atomic artifact writers.

Every file the CLI produces goes through here: content is written to a temporary
file in the destination directory and renamed over the target, so an interrupted
run leaves either the old artifact or the new one.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd


def clean_data_for_json(data: Any) -> Any:
    """
    Makes data JSON-compliant: NaN and +/-Infinity become None, tuples become lists,
    enums become their value and DataFrames become lists of records.
    """
    if isinstance(data, pd.DataFrame):
        data = data.to_dict(orient='records')

    def clean_value(v: Any) -> Any:
        if isinstance(v, dict):
            return {str(k): clean_value(val) for k, val in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean_value(item) for item in v]
        if isinstance(v, Enum):
            return clean_value(v.value)
        if isinstance(v, np.generic):
            return clean_value(v.item())
        if isinstance(v, float):
            if math.isnan(v) or math.isinf(v):
                return None
            return float(v)
        return v

    return clean_value(data)


def write_text_atomic(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as fh:
            fh.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_json_atomic(path: Path, payload: Any) -> Path:
    text = json.dumps(clean_data_for_json(payload), indent=2, ensure_ascii=False)
    return write_text_atomic(path, text + '\n')


def write_csv_atomic(path: Path, frame: pd.DataFrame) -> Path:
    return write_text_atomic(path, frame.to_csv(index=False, lineterminator='\n'))


def read_json(path: Path) -> Any:
    with open(path, 'r', encoding='utf-8') as fh:
        return json.load(fh)
