"""
Stage checkpoints on disk: CSV tables, plain text and joblib pickles.
Everything is written to a temp file beside the target and moved into place.
"""
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import joblib
import pandas as pd

from riskforge.lib.errors import IoFailure, MissingArtifact

TABLE_FLOAT_FORMAT = '%.10g'


@contextmanager
def atomic_output(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_table(df: pd.DataFrame, path, float_format=TABLE_FLOAT_FORMAT):
    with atomic_output(path) as tmp:
        df.to_csv(tmp, index=False, float_format=float_format, lineterminator="\n", encoding="utf-8")


def write_text(text: str, path):
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)


def dump_object(obj, path):
    with atomic_output(path) as tmp:
        joblib.dump(obj, tmp)


def require(path, stage: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(stage, f"{path} not found, run the '{stage}' stage first")
    return path


def read_table(path, stage: str) -> pd.DataFrame:
    path = require(path, stage)
    try:
        return pd.read_csv(path, encoding="utf-8")
    except (OSError, pd.errors.ParserError) as e:
        raise IoFailure(str(path), str(e)) from e


def read_text(path, stage: str) -> str:
    return require(path, stage).read_text(encoding="utf-8")


def load_object(path, stage: str):
    path = require(path, stage)
    try:
        return joblib.load(path)
    except (OSError, EOFError) as e:
        raise IoFailure(str(path), str(e)) from e
