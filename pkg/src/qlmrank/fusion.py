"""Min-max score normalization and linear interpolation of runs.

Normalization is per query: scores from different queries are never
comparable. Interpolation works over the union of both runs' documents,
with missing documents taking normalized score 0, which lets a shallow
re-ranked run fuse with a deeper first-stage run.
"""

from __future__ import annotations

from .corpus import QrelSet, Run

RERANK_ALPHA = 0.2  # default weight on the first-stage score when fusing with a re-ranker
HYBRID_ALPHA = 0.5  # default weight when fusing two first-stage runs


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")


def _minmax(pairs: list[tuple[str, float]]) -> dict[str, float]:
    scores = [s for _, s in pairs]
    lo, hi = min(scores), max(scores)
    if hi == lo:
        # any constant preserves Eq-style weighted sums; 0 keeps the run inert
        return {did: 0.0 for did, _ in pairs}
    return {did: (s - lo) / (hi - lo) for did, s in pairs}


def minmax_normalize(run: Run) -> Run:
    """Rescale every query's scores to [0, 1]; a constant list maps to all
    zeros. Ordering is unchanged."""
    entries = {
        qid: list(_minmax(pairs).items())
        for qid, pairs in run.entries.items()
        if pairs
    }
    return Run(entries, tag=run.tag)


def interpolate(run_a: Run, run_b: Run, alpha: float, tag: str | None = None) -> Run:
    """Weighted sum alpha * a + (1 - alpha) * b of min-max normalized scores.

    Per query, the document universe is the union of both runs' documents;
    documents missing from one run contribute normalized score 0 there.
    """
    _check_alpha(alpha)
    if tag is None:
        tag = f"fuse-{alpha:g}({run_a.tag},{run_b.tag})"
    entries: dict[str, list[tuple[str, float]]] = {}
    for qid in {**run_a.entries, **run_b.entries}:
        norm_a = _minmax(run_a.entries[qid]) if run_a.entries.get(qid) else {}
        norm_b = _minmax(run_b.entries[qid]) if run_b.entries.get(qid) else {}
        universe = norm_a.keys() | norm_b.keys()
        entries[qid] = [
            (did, alpha * norm_a.get(did, 0.0) + (1.0 - alpha) * norm_b.get(did, 0.0))
            for did in universe
        ]
    return Run(entries, tag=tag)


def truncate(run: Run, k: int) -> Run:
    """Keep each query's top k entries."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return Run({qid: pairs[:k] for qid, pairs in run.entries.items()}, tag=run.tag)


def sweep_alpha(run_a: Run, run_b: Run, alphas: list[float], qrels: QrelSet,
                k: int = 10) -> list[tuple[float, float]]:
    """Mean nDCG@k of interpolate(run_a, run_b, alpha) for every alpha.

    Returns (alpha, mean nDCG) rows, plot-ready; write with format_sweep.
    """
    from .evaluation import ndcg_at_k

    for alpha in alphas:
        _check_alpha(alpha)
    rows = []
    for alpha in alphas:
        fused = interpolate(run_a, run_b, alpha)
        report = ndcg_at_k(fused, qrels, k=k)
        rows.append((alpha, report.mean))
    return rows


def format_sweep(rows: list[tuple[float, float]]) -> str:
    """Two-column TSV: alpha <TAB> ndcg."""
    lines = ["alpha\tndcg"]
    lines += [f"{alpha:g}\t{ndcg:.6f}" for alpha, ndcg in rows]
    return "\n".join(lines) + "\n"
