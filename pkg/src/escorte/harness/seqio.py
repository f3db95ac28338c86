"""Sequence files and corpus manifests.

A sequence file is UTF-8 JSON Lines. Line 1 is a header::

    {"schema": "escorte-seq", "version": 1, "seq_id": "seq0003", "frames": 412}

Every following line is one frame, keys in this order::

    {"seq_id": str, "frame": int, "t": float, "action": "following"|"lagging"|"stopping",
     "gap_m": float,
     "detections": [{"x": f, "y": f, "w": f, "h": f, "feat": [f, ...], "subject": 0|1}, ...]}

Floats are written with 17 significant digits (``format(v, ".17g")``), which
round-trips every float64 exactly. A corpus directory holds the sequence
files plus ``manifest.json`` mapping each file to its split.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Iterable

import numpy as np

from ..action import ActionState
from ..simworld import Corpus, Detection, FrameRecord, Sequence_

log = logging.getLogger(__name__)

SEQ_SCHEMA = "escorte-seq"
CORPUS_SCHEMA = "escorte-corpus"
VERSION = 1
MANIFEST = "manifest.json"


class ParseError(ValueError):
    pass


class VersionError(ValueError):
    pass


def _f(v: float) -> str:
    return format(float(v), ".17g")


def _det_json(d: Detection) -> str:
    x, y, w, h = d.bbox
    feat = ",".join(_f(v) for v in d.feature)
    return (
        f'{{"x":{_f(x)},"y":{_f(y)},"w":{_f(w)},"h":{_f(h)},'
        f'"feat":[{feat}],"subject":{int(d.is_subject)}}}'
    )


def frame_line(seq_id: str, fr: FrameRecord) -> str:
    dets = ",".join(_det_json(d) for d in fr.detections)
    return (
        f'{{"seq_id":{json.dumps(seq_id)},"frame":{fr.frame},"t":{_f(fr.t)},'
        f'"action":"{fr.action.tag}","gap_m":{_f(fr.gap_m)},"detections":[{dets}]}}'
    )


def dumps_sequence(seq: Sequence_) -> str:
    header = json.dumps(
        {"schema": SEQ_SCHEMA, "version": VERSION, "seq_id": seq.seq_id, "frames": len(seq.frames)},
        sort_keys=True,
    )
    return "".join(line + "\n" for line in [header] + [frame_line(seq.seq_id, f) for f in seq.frames])


def save_sequence(seq: Sequence_, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_sequence(seq), encoding="utf-8")


def _parse_frame(obj: dict) -> FrameRecord:
    dets = tuple(
        Detection(
            (float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"])),
            np.asarray(d["feat"], dtype=float),
            bool(d["subject"]),
        )
        for d in obj["detections"]
    )
    return FrameRecord(
        int(obj["frame"]), float(obj["t"]), dets, ActionState.from_tag(obj["action"]), float(obj["gap_m"])
    )


def loads_sequence(text: str, source: str = "<string>") -> Sequence_:
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        log.warning("%s: empty sequence file", source)
        return Sequence_("", [])
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"{source}:1: malformed header: {e.msg}") from None
    if not isinstance(header, dict) or header.get("schema") != SEQ_SCHEMA:
        raise ParseError(f"{source}:1: not an {SEQ_SCHEMA} file")
    if header.get("version") != VERSION:
        raise VersionError(f"{source}: schema version {header.get('version')}, expected {VERSION}")
    seq_id = header.get("seq_id", "")
    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            frames.append(_parse_frame(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{source}:{lineno}: malformed frame record ({e})") from None
    return Sequence_(seq_id, frames)


def load_sequence(path: str | os.PathLike) -> Sequence_:
    return loads_sequence(Path(path).read_text(encoding="utf-8"), str(path))


def save_corpus(corpus: Corpus, out_dir: str | os.PathLike, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for seq in corpus.sequences:
        name = f"{seq.seq_id}.jsonl"
        save_sequence(seq, out / name)
        entries.append({"file": name, "seq_id": seq.seq_id, "split": seq.split})
    manifest = {"schema": CORPUS_SCHEMA, "version": VERSION, "meta": meta or {}, "sequences": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_corpus(corpus_dir: str | os.PathLike, splits: Iterable[str] | None = None) -> Corpus:
    root = Path(corpus_dir)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"{root}: no {MANIFEST}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{root / MANIFEST}: {e}") from None
    if manifest.get("schema") != CORPUS_SCHEMA:
        raise ParseError(f"{root / MANIFEST}: not an {CORPUS_SCHEMA} manifest")
    if manifest.get("version") != VERSION:
        raise VersionError(f"{root / MANIFEST}: version {manifest.get('version')}, expected {VERSION}")
    wanted = None if splits is None else set(splits)
    corpus = Corpus()
    for e in manifest["sequences"]:
        if wanted is not None and e["split"] not in wanted:
            continue
        seq = load_sequence(root / e["file"])
        seq.split = e["split"]
        corpus.sequences.append(seq)
    return corpus
