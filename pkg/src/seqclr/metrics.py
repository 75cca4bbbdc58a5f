"""Word accuracy, ED1, CER and WER on top of a Levenshtein kernel."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Unit-cost Levenshtein distance (insert / delete / substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass
class MetricsReport:
    acc: float
    ed1: float
    cer: float
    wer: float
    n_samples: int
    n_empty_references: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def evaluate(predictions: Sequence[str], references: Sequence[str], case_sensitive: bool = True) -> MetricsReport:
    """Word-level metrics. CER normalises by total reference length."""
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise ValueError("need at least one sample")
    if not case_sensitive:
        predictions = [p.lower() for p in predictions]
        references = [r.lower() for r in references]
    dists = [edit_distance(p, r) for p, r in zip(predictions, references)]
    n = len(references)
    exact = sum(p == r for p, r in zip(predictions, references))
    ref_chars = sum(len(r) for r in references)
    acc = exact / n
    return MetricsReport(
        acc=acc,
        ed1=sum(d <= 1 for d in dists) / n,
        cer=sum(dists) / ref_chars if ref_chars else float(sum(dists) > 0),
        wer=1.0 - acc,
        n_samples=n,
        n_empty_references=sum(1 for r in references if not r),
    )


def dump_errors(path: str | Path, predictions: Sequence[str], references: Sequence[str], ids: Sequence[str] | None = None) -> None:
    ids = ids if ids is not None else [str(i) for i in range(len(references))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "reference", "prediction", "edit_distance", "correct"])
        for i, p, r in zip(ids, predictions, references):
            w.writerow([i, r, p, edit_distance(p, r), int(p == r)])
