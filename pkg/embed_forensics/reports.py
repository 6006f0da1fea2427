"""JSON run reports and csv tables written by the command line tools."""

import datetime
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

REPORT_SUFFIX = ".report.json"


def file_digest(path, chunk_size=1 << 20):
    """sha256 of a file's bytes, as hex."""
    sha = hashlib.sha256()
    with open(path, "rb") as fin:
        for chunk in iter(lambda: fin.read(chunk_size), b""):
            sha.update(chunk)
    return sha.hexdigest()


def input_digests(paths):
    """
    Digest every input file.

    Parameters
    ----------
    paths : dict
        ``role -> path``; ``None`` entries are skipped.
    """
    out = {}
    for role, path in sorted(paths.items()):
        if path is None:
            continue
        if isinstance(path, (list, tuple)):
            out[role] = [{"path": str(p), "sha256": file_digest(p)} for p in path]
        else:
            out[role] = {"path": str(path), "sha256": file_digest(path)}
    return out


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def build_report(command, config, seed, results, inputs=None, rules=None, deterministic=False):
    """
    Assemble the provenance record of one run.

    ``generated_at`` is left out when ``deterministic`` is set, so identical
    runs give byte-identical reports.
    """
    from . import __version__

    report = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "input_digests": input_digests(inputs or {}),
        "rules": rules or [],
        "results": results,
    }
    if not deterministic:
        report["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    return report


def write_report(report, path):
    """
    Write a report as sorted, indented JSON.

    Will over write if exists.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fout:
        json.dump(report, fout, sort_keys=True, indent=2, default=_json_default)
        fout.write("\n")
    logger.debug("wrote report '%s'", path)
    return path


def write_table(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.debug("wrote table '%s' (%d rows)", path, len(frame))
    return path
