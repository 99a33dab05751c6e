import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

import numpy as np
import pandas as pd

from src.exceptions import IngestionError
from src.logger import logger

T = TypeVar("T")
R = TypeVar("R")


def derive_seeds(seed: int, count: int) -> List[int]:
    """
    Derives independent per-item seeds from one master seed.

    Parameters:
    seed (int): master seed
    count (int): number of child seeds

    Returns:
    list[int]: child seeds, identical for identical (seed, count)
    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """
    Applies fn to every item, optionally on a thread pool. Results always come
    back in item order, whatever the completion order.
    """
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def ensure_dir(path: str) -> str:
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def to_jsonable(value):
    """Converts numpy containers and scalars into plain JSON types."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: str, payload: dict) -> str:
    try:
        ensure_dir(os.path.dirname(path))
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(to_jsonable(payload), handle, indent=2)
        logger.info(f"Wrote {path}")
        return path
    except Exception as e:
        logger.error(f"Error writing {path}: {e}")
        raise IngestionError(f"Error writing {path}: {e}", sys)


def read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except Exception as e:
        logger.error(f"Error reading {path}: {e}")
        raise IngestionError(f"Error reading {path}: {e}", sys)


def append_jsonl(path: str, rows: Iterable[dict]) -> int:
    """
    Appends one JSON object per line.

    Returns:
    int: number of rows written
    """
    count = 0
    try:
        ensure_dir(os.path.dirname(path))
        with open(path, "a", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(to_jsonable(row)) + "\n")
                count += 1
        return count
    except Exception as e:
        logger.error(f"Error appending to {path}: {e}")
        raise IngestionError(f"Error appending to {path}: {e}", sys)


def read_jsonl(path: str) -> List[dict]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]
    except Exception as e:
        logger.error(f"Error reading {path}: {e}")
        raise IngestionError(f"Error reading {path}: {e}", sys)


def write_csv(path: str, rows: List[dict], columns: Sequence[str] = None) -> str:
    try:
        ensure_dir(os.path.dirname(path))
        frame = pd.DataFrame(to_jsonable(rows), columns=list(columns) if columns else None)
        frame.to_csv(path, index=False)
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path
    except Exception as e:
        logger.error(f"Error writing {path}: {e}")
        raise IngestionError(f"Error writing {path}: {e}", sys)
