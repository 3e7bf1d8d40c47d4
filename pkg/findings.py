"""Trend checks over evaluation reports, summarized as pass/fail rows."""

import logging
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

import mat_index
from evaluation import EnergyCurve, EvalReport, dims_for_energy

logger = logging.getLogger(__name__)

PASS, FAIL, SKIP = "pass", "fail", "skip"
INVERSION_TOLERANCE = 0.02


class Check(NamedTuple):
    check: str
    status: str
    detail: str


def at_most_one_inversion(values: Sequence[float], tolerance: float = INVERSION_TOLERANCE) -> bool:
    """Nondecreasing except for at most one drop no larger than ``tolerance``."""
    drops = [a - b for a, b in zip(values, values[1:]) if b < a]
    return not drops or (len(drops) == 1 and drops[0] <= tolerance)


def _fmt(values: Sequence[float]) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


def _status(ok: bool) -> str:
    return PASS if ok else FAIL


def _row(report: EvalReport, task: str, dims: Sequence[int], metric: str) -> Optional[List[float]]:
    if task not in report.tasks:
        return None
    return [report.get(task, d, metric) for d in dims]


def check_late_fusion_best(retrieval: EvalReport, dims: Sequence[int], floor: float = 0.90, margin: float = 0.05) -> Check:
    lf = _row(retrieval, "late-fusion/document-retrieval", dims, "ndcg@5")
    dual = _row(retrieval, "dual-retrieval/document-retrieval", dims, "ndcg@5")
    if lf is None or dual is None:
        return Check("late-fusion-best", SKIP, "late-fusion or dual-retrieval not trained")
    ok = lf[-1] >= floor and all(a - b >= margin for a, b in zip(lf, dual))
    return Check("late-fusion-best", _status(ok), f"late-fusion {_fmt(lf)} vs dual-retrieval {_fmt(dual)}")


def check_pipelined_below(retrieval: EvalReport, dims: Sequence[int]) -> Check:
    lf = _row(retrieval, "late-fusion/document-retrieval", dims, "ndcg@5")
    pipe = _row(retrieval, "pipelined-document-retrieval", dims, "ndcg@5")
    if lf is None or pipe is None:
        return Check("pipelined-below-late-fusion", SKIP, "late-fusion or pipelined baseline missing")
    ok = all(p < a for p, a in zip(pipe, lf))
    return Check("pipelined-below-late-fusion", _status(ok), f"pipelined {_fmt(pipe)} vs late-fusion {_fmt(lf)}")


def check_dual_kws(kws: EvalReport, retrieval: EvalReport, dims: Sequence[int],
                   floor: float = 0.70, margin: float = 0.05) -> Check:
    f1 = _row(kws, "dual-alignment/kws", dims, "f1")
    dual = _row(retrieval, "dual-alignment/document-retrieval", dims, "ndcg@5")
    lf = _row(retrieval, "late-fusion/document-retrieval", dims, "ndcg@5")
    if f1 is None or dual is None or lf is None:
        return Check("dual-keyword-spotting", SKIP, "dual-alignment or late-fusion not trained")
    ok = f1[-1] >= floor and lf[-1] - dual[-1] >= margin
    return Check("dual-keyword-spotting", _status(ok),
                 f"kws f1 {_fmt(f1)}; retrieval dual {dual[-1]:.4f} vs late-fusion {lf[-1]:.4f}")


def check_kws_ordering(kws: EvalReport, dims: Sequence[int]) -> Check:
    lf = _row(kws, "late-fusion/kws", dims, "f1")
    dual = _row(kws, "dual-retrieval/kws", dims, "f1")
    if lf is None or dual is None:
        return Check("kws-late-fusion-over-dual-retrieval", SKIP, "late-fusion or dual-retrieval not trained")
    ok = all(a > b for a, b in zip(lf, dual))
    return Check("kws-late-fusion-over-dual-retrieval", _status(ok), f"late-fusion {_fmt(lf)} vs dual-retrieval {_fmt(dual)}")


def check_matryoshka_monotone(retrieval: EvalReport, dims: Sequence[int], variants: Sequence[str]) -> List[Check]:
    checks = []
    for variant in variants:
        values = _row(retrieval, f"{variant}/document-retrieval", dims, "ndcg@5")
        if values is None:
            continue
        checks.append(Check(f"monotone-{variant}", _status(at_most_one_inversion(values)), _fmt(values)))
    return checks


def check_fewshot(intent: EvalReport, dims: Sequence[int], n_shots: Sequence[int], floor: float = 0.90) -> List[Check]:
    full, small = dims[-1], dims[0]
    recalls = [intent.get(f"intent-{n}shot", full, "recall") for n in n_shots]
    checks = [Check("fewshot-recall-grows", _status(at_most_one_inversion(recalls)), f"n={list(n_shots)} recall {_fmt(recalls)}")]
    if 16 in n_shots:
        r16 = intent.get("intent-16shot", full, "recall")
        checks.append(Check("fewshot-16-shot-recall", _status(r16 >= floor), f"{r16:.4f}"))
    else:
        checks.append(Check("fewshot-16-shot-recall", SKIP, "16-shot not evaluated"))
    if 1 in n_shots and 16 in n_shots:
        gaps = {n: intent.get(f"intent-{n}shot", full, "recall") - intent.get(f"intent-{n}shot", small, "recall") for n in (1, 16)}
        checks.append(Check("fewshot-small-dims-catch-up", _status(gaps[16] < gaps[1]),
                            f"gap n=1 {gaps[1]:.4f}, n=16 {gaps[16]:.4f}"))
    else:
        checks.append(Check("fewshot-small-dims-catch-up", SKIP, "needs 1- and 16-shot runs"))
    zero = [n for n in n_shots if n == 0]
    if zero:
        classes = intent.metadata.get("classes")
        z = intent.get("intent-0shot", full, "f1")
        if classes:
            checks.append(Check("zero-shot-above-chance", _status(z > 1.0 / int(classes)), f"f1 {z:.4f} vs chance {1.0 / int(classes):.4f}"))
    return checks


def check_energy(curves: Sequence[EnergyCurve]) -> List[Check]:
    shape_ok = all(np.all(np.diff(c.ratios) >= -1e-12) and abs(c.ratios[-1] - 1.0) <= 1e-9 for c in curves)
    checks = [Check("energy-curves-well-formed", _status(shape_ok), f"{len(curves)} curves")]
    docs = sorted((c for c in curves if c.source == "documents"), key=lambda c: c.dim)
    if len(docs) >= 2:
        small, large = dims_for_energy(docs[0], 1.0), dims_for_energy(docs[-1], 1.0)
        checks.append(Check("energy-large-dims-saturate-sooner", _status(large <= small),
                            f"fraction at dim {docs[-1].dim} {large:.4f} vs dim {docs[0].dim} {small:.4f}"))
    return checks


def check_index_exactness(corpora: int = 100, docs: int = 60, d_max: int = 16, seed: int = 5) -> Check:
    """Search against an independent brute-force scan on random corpora."""
    dims = (4, 8, d_max)
    rng = np.random.default_rng(seed)
    for trial in range(corpora):
        vectors = rng.standard_normal((docs, d_max))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        ids = rng.permutation(10 * docs)[:docs]
        shard = mat_index.build(zip(ids, vectors), dims, d_max=d_max, created_at=0)
        stored = vectors.astype(np.float16).astype(np.float64)
        query = rng.standard_normal(d_max)
        for dim in dims:
            expected = _brute_force(ids, stored, query, dim, 10)
            if mat_index.search(shard, query, dim, 10).ids != expected:
                return Check("index-exact", FAIL, f"corpus {trial} dim {dim} differs from brute force")
    return Check("index-exact", PASS, f"{corpora} random corpora x {len(dims)} dims")


def _brute_force(ids: np.ndarray, stored: np.ndarray, query: np.ndarray, dim: int, k: int) -> List[int]:
    q = query[:dim] / np.linalg.norm(query[:dim])
    scored = []
    for doc_id, row in zip(ids, stored):
        prefix = row[:dim]
        norm = np.linalg.norm(prefix)
        scored.append((-(float(prefix @ q) / norm if norm else 0.0), int(doc_id)))
    return [doc_id for _, doc_id in sorted(scored)[:k]]


def check_shard_roundtrip(path: Union[str, Path]) -> Check:
    blob = Path(path).read_bytes()
    ok = mat_index.shard_bytes(mat_index.parse_shard(blob)) == blob
    return Check("index-save-load-identical", _status(ok), Path(path).name)


def check_cost_bytes(report: mat_index.CostReport, count: int, n_dims: int) -> Check:
    expected = [mat_index.expected_size(count, row.dim, n_dims) for row in report.rows]
    actual = [row.bytes for row in report.rows]
    ok = actual == expected and all(b > a for a, b in zip(actual, actual[1:]))
    return Check("cost-disk-bytes", _status(ok), f"bytes {actual}")


def check_cost_latency(report: mat_index.CostReport) -> Check:
    first, last = report.rows[0], report.rows[-1]
    return Check("cost-latency-smaller-dims-faster", _status(first.median_s <= last.median_s),
                 f"median dim {first.dim} {first.median_s:.3e}s vs dim {last.dim} {last.median_s:.3e}s")


def check_loss_decreases(curve: Sequence[Dict[str, object]], variant: str) -> Check:
    if len(curve) < 2:
        return Check(f"loss-decreases-{variant}", SKIP, "fewer than 2 steps")
    window = max(1, len(curve) // 10)
    head = float(np.mean([float(r["total"]) for r in curve[:window]]))  # type: ignore[arg-type]
    tail = float(np.mean([float(r["total"]) for r in curve[-window:]]))  # type: ignore[arg-type]
    return Check(f"loss-decreases-{variant}", _status(tail < head), f"first {head:.4f} -> last {tail:.4f}")


def write_checks(path: Union[str, Path], checks: Sequence[Check]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["check\tstatus\tdetail"] + [f"{c.check}\t{c.status}\t{c.detail}" for c in checks]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def failed(checks: Sequence[Check]) -> List[Check]:
    return [c for c in checks if c.status == FAIL]
