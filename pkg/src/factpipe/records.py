"""Input/output record types and streaming JSONL helpers.

The scoring input is one JSON object per line with ``id``, ``system_id``,
``prompt``, and ``response``; results files mirror that shape with the
report fields added. Readers and writers stream line-by-line so large
batches never need whole-file buffering.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator


@dataclass
class Response:
    """A long-form model output under evaluation."""

    id: str
    response: str
    system_id: str = ""
    prompt: str = ""

    @classmethod
    def from_json_dict(cls, d: dict) -> "Response":
        return cls(
            id=str(d.get("id", "")),
            response=d.get("response", ""),
            system_id=str(d.get("system_id", "")),
            prompt=d.get("prompt", ""),
        )


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: bad JSON line: {e}") from e


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def load_responses(path: str | Path) -> list[Response]:
    return [Response.from_json_dict(d) for d in read_jsonl(path)]
