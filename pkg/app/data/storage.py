import io
import json
import logging
import os
import tempfile

import numpy as np
import pandas as pd

from app.data.synthetic_data import Corpus
from app.errors import ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_FIELDS = ("version", "arch", "params", "ema_params", "schedule", "noise")
LOSS_CURVE_COLUMNS = ["step", "loss", "weight", "t"]


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def _format_rows(rows):
    return "".join(" ".join(str(int(v)) for v in row) + "\n" for row in rows)


def _read_rows(path):
    try:
        frame = pd.read_csv(path, sep=" ", header=None, dtype=np.int64)
    except FileNotFoundError:
        raise ConfigError(f"corpus file not found: {path}")
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"malformed corpus file {path}: {e}")
    return frame.to_numpy(dtype=np.int64)


def save_corpus(corpus, path):
    """Unpaired corpora go to `path`; paired ones to `path.src` and `path.tgt`."""
    if corpus.sources is None:
        atomic_write_text(path, _format_rows(corpus.rows))
        return {"rows": path}
    atomic_write_text(path + ".src", _format_rows(corpus.sources))
    atomic_write_text(path + ".tgt", _format_rows(corpus.rows))
    return {"sources": path + ".src", "rows": path + ".tgt"}


def load_corpus(path, source_path=None):
    if source_path is None and not os.path.exists(path) and os.path.exists(path + ".tgt"):
        return load_corpus(path + ".tgt", source_path=path + ".src")
    rows = _read_rows(path)
    sources = _read_rows(source_path) if source_path is not None else None
    if sources is not None and len(sources) != len(rows):
        raise ConfigError(f"{source_path} and {path} have different row counts")
    return Corpus(rows=rows, sources=sources)


def write_json(obj, path):
    return atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def read_json(path):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}")


def _float_list(values):
    return "[" + ", ".join(format(float(v), ".17g") for v in values) + "]"


def save_checkpoint(path, arch, params, ema_params, schedule, noise):
    fields = {
        "version": json.dumps(CHECKPOINT_VERSION),
        "arch": json.dumps(arch, indent=2),
        "params": _float_list(params),
        "ema_params": "null" if ema_params is None else _float_list(ema_params),
        "schedule": json.dumps(schedule, indent=2),
        "noise": json.dumps(noise, indent=2),
    }
    body = ",\n".join(f"  {json.dumps(name)}: {fields[name]}" for name in CHECKPOINT_FIELDS)
    atomic_write_text(path, "{\n" + body + "\n}\n")
    logger.info(f"Saved checkpoint to {path}")
    return {"path": path, "n_params": len(params)}


def load_checkpoint(path):
    document = read_json(path)
    missing = [name for name in CHECKPOINT_FIELDS if name not in document]
    if missing:
        raise ConfigError(f"checkpoint {path} is missing fields: {', '.join(missing)}")
    if document["version"] != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {document['version']}")
    return document


def save_loss_curve(records, path):
    frame = pd.DataFrame(records, columns=LOSS_CURVE_COLUMNS)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    return atomic_write_text(path, buffer.getvalue())


def load_loss_curve(path):
    return pd.read_csv(path)
