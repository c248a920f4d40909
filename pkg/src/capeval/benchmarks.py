"""Benchmark statistics: rank correlations, pairwise accuracy, retrieval, token accuracy.

Correlation statistics delegate to scipy (whose pair-counting definitions
match the formulas used here, verified in the test suite against an
exhaustive oracle); everything else is computed directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .corpus import read_jsonl
from .encoding import EVAL_SEMANTIC_POS


class BenchmarkError(ValueError):
    pass


@dataclass(frozen=True)
class JudgedPair:
    metric_score: float
    human_score: float


@dataclass(frozen=True)
class PairwiseChoice:
    score_a: float
    score_b: float
    human_pref: str  # "A" or "B"
    subset: str      # e.g. HC / HI / HM / MM

    def __post_init__(self):
        if self.human_pref not in ("A", "B"):
            raise BenchmarkError(f"human_pref must be 'A' or 'B', got {self.human_pref!r}")
        if not self.subset:
            raise BenchmarkError("subset label missing")


@dataclass(frozen=True)
class TokenJudgment:
    """Predicted vs gold token decisions for one image-caption pair."""

    pred_word_ok: tuple[bool, ...]       # over evaluated semantic tokens
    gold_word_ok: tuple[bool, ...]
    pred_region_mentioned: tuple[bool, ...]  # over the m regions
    gold_region_mentioned: tuple[bool, ...]

    def __post_init__(self):
        if len(self.pred_word_ok) != len(self.gold_word_ok):
            raise BenchmarkError("text mask length mismatch")
        if len(self.pred_region_mentioned) != len(self.gold_region_mentioned):
            raise BenchmarkError("region mask length mismatch")


def _scores(pairs) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray([p.metric_score for p in pairs], dtype=np.float64)
    y = np.asarray([p.human_score for p in pairs], dtype=np.float64)
    if len(x) < 2:
        raise BenchmarkError("need at least two judged pairs")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise BenchmarkError("non-finite scores")
    return x, y


def kendall_tau(pairs, variant: str = "c") -> float:
    """Rank correlation between metric and human scores (variant 'b' or 'c')."""
    if variant not in ("b", "c"):
        raise BenchmarkError(f"unknown kendall variant {variant!r}")
    x, y = _scores(pairs)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise BenchmarkError("undefined correlation: all values tied")
    tau = stats.kendalltau(x, y, variant=variant).statistic
    if not np.isfinite(tau):
        raise BenchmarkError("undefined correlation")
    return float(tau)


def pearson(pairs) -> float:
    x, y = _scores(pairs)
    if np.var(x) == 0 or np.var(y) == 0:
        raise BenchmarkError("undefined correlation: zero variance")
    return float(stats.pearsonr(x, y).statistic)


def pascal_accuracy(choices) -> dict:
    """Per-subset and mean pairwise accuracy; metric ties count as incorrect."""
    if not choices:
        raise BenchmarkError("no pairwise choices")
    totals: dict[str, list[int]] = {}
    for ch in choices:
        hit = 0
        if ch.score_a != ch.score_b:
            predicted = "A" if ch.score_a > ch.score_b else "B"
            hit = int(predicted == ch.human_pref)
        bucket = totals.setdefault(ch.subset, [0, 0])
        bucket[0] += hit
        bucket[1] += 1
    accuracies = {subset: hits / n for subset, (hits, n) in sorted(totals.items())}
    accuracies["mean"] = float(np.mean(list(accuracies.values())))
    return accuracies


def retrieval_recall(score_matrix: np.ndarray, ks) -> dict:
    """R@k in both directions for an N x N matrix whose diagonal is ground truth.

    Score ties rank the lower index first.
    """
    s = np.asarray(score_matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise BenchmarkError(f"expected a square matrix, got {s.shape}")
    n = s.shape[0]
    ks = [int(k) for k in (ks if np.iterable(ks) else [ks])]
    for k in ks:
        if k < 1 or k > n:
            raise BenchmarkError(f"k={k} outside [1, {n}]")

    def ranks(rows: np.ndarray) -> np.ndarray:
        # rank of the diagonal entry inside its row, 1-based
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            row = rows[i]
            better = (row > row[i]).sum() + (row[: i] == row[i]).sum()
            out[i] = better + 1
        return out

    image_to_text = ranks(s)
    text_to_image = ranks(s.T)
    return {
        "image_to_text": {k: float((image_to_text <= k).mean()) for k in ks},
        "text_to_image": {k: float((text_to_image <= k).mean()) for k in ks},
    }


def captoken_accuracy(judgments) -> tuple[float, float]:
    """Micro-averaged (vision_acc, text_acc) over a corpus of token judgments."""
    word_hits = word_total = region_hits = region_total = 0
    for j in judgments:
        word_hits += sum(p == g for p, g in zip(j.pred_word_ok, j.gold_word_ok))
        word_total += len(j.gold_word_ok)
        region_hits += sum(p == g for p, g in
                           zip(j.pred_region_mentioned, j.gold_region_mentioned))
        region_total += len(j.gold_region_mentioned)
    if word_total == 0:
        raise BenchmarkError("no semantic tokens to evaluate")
    if region_total == 0:
        raise BenchmarkError("no regions to evaluate")
    return region_hits / region_total, word_hits / word_total


def _load_scores(path: str | Path) -> dict[tuple[str, int], float]:
    table = {}
    for i, row in enumerate(read_jsonl(path)):
        try:
            table[(str(row["image_id"]), int(row["caption_idx"]))] = float(row["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BenchmarkError(f"bad score record #{i}: {row!r} ({exc})") from exc
    return table


def _judged_pairs(judgment_rows, scores: dict) -> list[JudgedPair]:
    pairs, missing = [], []
    for i, row in enumerate(judgment_rows):
        key = (str(row["image_id"]), int(row["caption_idx"]))
        if key not in scores:
            missing.append(f"#{i} {key}")
            continue
        pairs.append(JudgedPair(metric_score=scores[key],
                                human_score=float(row["human"]["score"])))
    if missing:
        raise BenchmarkError("judgments without scores: " + ", ".join(missing))
    return pairs


def _pairwise_choices(judgment_rows, scores: dict) -> list[PairwiseChoice]:
    choices, missing = [], []
    for i, row in enumerate(judgment_rows):
        image_id = str(row["image_id"])
        key_a = (image_id, int(row["caption_a"]))
        key_b = (image_id, int(row["caption_b"]))
        if key_a not in scores or key_b not in scores:
            missing.append(f"#{i} {image_id}")
            continue
        choices.append(PairwiseChoice(score_a=scores[key_a], score_b=scores[key_b],
                                      human_pref=str(row["human"]["pref"]),
                                      subset=str(row["subset"])))
    if missing:
        raise BenchmarkError("judgments without scores: " + ", ".join(missing))
    return choices


def _model_scores(spec: dict, model, backbone, image_root) -> dict[tuple[str, int], float]:
    from .corpus import load_corpus
    from .model import score_corpus

    records = load_corpus(spec["corpus"])
    key = spec.get("score_key", "overall")
    if key not in ("overall", "recall", "precision", "plus"):
        raise BenchmarkError(f"unknown score key {key!r}")
    rows = score_corpus(records, model, backbone, plus=(key == "plus"),
                        image_root=image_root)
    def pick(report):
        return report.plus if key == "plus" else getattr(report, key)
    return {(r["image_id"], r["caption_idx"]): float(pick(r["report"])) for r in rows}


def _captoken_judgments(spec: dict, model, backbone, image_root) -> list[TokenJudgment]:
    from .corpus import load_corpus
    from .model import score_corpus

    records = load_corpus(spec["corpus"])
    eval_pos = frozenset(spec.get("semantic_pos", sorted(EVAL_SEMANTIC_POS)))
    beta = float(spec.get("beta", 0.1))
    rows = score_corpus(records, model, backbone, beta=beta, semantic_pos=eval_pos,
                        image_root=image_root)
    reports = {(r["image_id"], r["caption_idx"]): r["report"] for r in rows}
    by_id = {r.image_id: r for r in records}

    judgments, problems = [], []
    for i, gold in enumerate(read_jsonl(spec["gold"])):
        image_id = str(gold["image_id"])
        record = by_id.get(image_id)
        if record is None:
            problems.append(f"#{i}: unknown image {image_id}")
            continue
        if "caption_idx" in gold:
            ci = int(gold["caption_idx"])
        else:
            tokens = tuple(gold["tokens"])
            matches = [k for k, cap in enumerate(record.captions) if cap.tokens == tokens]
            if not matches:
                problems.append(f"#{i}: no caption of {image_id} matches the gold tokens")
                continue
            ci = matches[0]
        report = reports[(image_id, ci)]
        d = report.decisions
        bad = set(int(v) for v in gold.get("bad_word_idx", []))
        mentioned = set(int(v) for v in gold.get("mentioned_region_idx", []))
        judgments.append(TokenJudgment(
            pred_word_ok=tuple(d.correct_word_mask),
            gold_word_ok=tuple(idx not in bad for idx in d.semantic_indices),
            pred_region_mentioned=tuple(d.mentioned_region_mask),
            gold_region_mentioned=tuple(k in mentioned
                                        for k in range(len(d.mentioned_region_mask)))))
    if problems:
        raise BenchmarkError("bad gold records: " + "; ".join(problems))
    return judgments


def run_benchmark(spec: dict, scores: dict[tuple[str, int], float] | None = None,
                  scores_path: str | Path | None = None, model=None, backbone=None,
                  image_root: str | Path | None = None) -> dict:
    """Compute the statistics a benchmark spec requests.

    ``spec`` fields: ``task`` ("correlation", "pairwise", "retrieval" or
    "captoken") plus task-specific inputs. Metric scores come from
    ``scores``/``scores_path`` keyed by (image_id, caption_idx) when given,
    otherwise from scoring ``spec["corpus"]`` with the supplied model;
    retrieval and captoken always require the model.
    """
    task = spec.get("task")
    report: dict = {"name": spec.get("name", "benchmark"), "task": task, "statistics": {}}

    if task in ("correlation", "pairwise"):
        if scores is None and scores_path is not None:
            scores = _load_scores(scores_path)
        if scores is None:
            if model is None:
                raise BenchmarkError("no scores given and no model to compute them")
            scores = _model_scores(spec, model, backbone, image_root)
        rows = read_jsonl(spec["judgments"])
        report["n"] = len(rows)
        if task == "correlation":
            pairs = _judged_pairs(rows, scores)
            for stat in spec.get("statistics", ["tau_c"]):
                if stat == "tau_b":
                    report["statistics"][stat] = kendall_tau(pairs, "b")
                elif stat == "tau_c":
                    report["statistics"][stat] = kendall_tau(pairs, "c")
                elif stat == "pearson":
                    report["statistics"][stat] = pearson(pairs)
                else:
                    raise BenchmarkError(f"unknown correlation statistic {stat!r}")
        else:
            choices = _pairwise_choices(rows, scores)
            report["statistics"]["pascal_accuracy"] = pascal_accuracy(choices)
    elif task == "retrieval":
        if model is None:
            raise BenchmarkError("retrieval benchmark needs a model")
        from .corpus import load_corpus
        from .model import cross_score_matrix

        records = load_corpus(spec["corpus"])
        matrix = cross_score_matrix(records, model, backbone,
                                    caption_idx=int(spec.get("caption_idx", 0)),
                                    score_key=spec.get("score_key", "overall"),
                                    image_root=image_root)
        report["n"] = len(records)
        report["statistics"]["recall_at_k"] = {
            direction: {str(k): v for k, v in values.items()}
            for direction, values in retrieval_recall(matrix, spec.get("ks", [1, 5, 10])).items()}
    elif task == "captoken":
        if model is None:
            raise BenchmarkError("captoken benchmark needs a model")
        judgments = _captoken_judgments(spec, model, backbone, image_root)
        vision_acc, text_acc = captoken_accuracy(judgments)
        report["n"] = len(judgments)
        report["statistics"]["captoken_accuracy"] = {"vision": vision_acc, "text": text_acc}
    else:
        raise BenchmarkError(f"unknown benchmark task {task!r}")
    return report


def save_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return path
