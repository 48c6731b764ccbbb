"""
Caption evaluation: BLEU-1/4, ROUGE-1/2/L, METEOR (exact-match only) and CIDEr.

Every scorer takes a list of ``EvalPair`` and returns a corpus score.
BLEU/ROUGE/METEOR are on a 0-100 scale. ``cider`` returns the usual 0-10
consensus score; ``MetricReport`` multiplies it by 100 for reporting.
"""

import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import structlog

from .decoder import tokenize
from .errors import ConfigError, DataError

logger = structlog.get_logger(__name__)

Tokens = List[str]
MULTI_REF_MODES = ("max", "mean")


@dataclass
class EvalPair:
    hypothesis: Tokens
    references: List[Tokens]

    def __post_init__(self):
        if not self.references:
            raise DataError("an evaluation pair needs at least one reference")
        self.hypothesis = [t.lower() for t in self.hypothesis]
        self.references = [[t.lower() for t in ref] for ref in self.references]

    @classmethod
    def from_text(cls, hypothesis: str, references: Sequence[str]) -> "EvalPair":
        return cls(tokenize(hypothesis), [tokenize(r) for r in references])


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _combine(scores: List[float], mode: str) -> float:
    if mode not in MULTI_REF_MODES:
        raise ConfigError(f"multi-reference mode must be one of {', '.join(MULTI_REF_MODES)}, got {mode!r}")
    return max(scores) if mode == "max" else sum(scores) / len(scores)


def bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """Corpus BLEU: clipped precisions pooled over the corpus, geometric mean, brevity penalty."""
    if not 1 <= n <= 4:
        raise ConfigError(f"BLEU order must lie in 1..4, got {n}")
    hyp_length = sum(len(p.hypothesis) for p in pairs)
    if hyp_length == 0:
        logger.warning("bleu on an empty hypothesis corpus", pairs=len(pairs), order=n)
        return 0.0

    log_precision = 0.0
    for k in range(1, n + 1):
        clipped = total = 0
        for pair in pairs:
            hyp = ngrams(pair.hypothesis, k)
            ceiling: Counter = Counter()
            for ref in pair.references:
                ceiling |= ngrams(ref, k)
            clipped += sum(min(count, ceiling[gram]) for gram, count in hyp.items())
            total += max(len(pair.hypothesis) - k + 1, 0)
        if clipped == 0:
            return 0.0
        log_precision += math.log(clipped / total) / n

    ref_length = 0
    for pair in pairs:
        c = len(pair.hypothesis)
        ref_length += min((abs(len(r) - c), len(r)) for r in pair.references)[1]
    penalty = 1.0 if hyp_length > ref_length else math.exp(1.0 - ref_length / hyp_length)
    return 100.0 * penalty * math.exp(log_precision)


def rouge_n(pairs: Sequence[EvalPair], n: int = 1, multi_ref: str = "max") -> float:
    if n not in (1, 2):
        raise ConfigError(f"ROUGE-N order must be 1 or 2, got {n}")
    scores = []
    for index, pair in enumerate(pairs):
        hyp = ngrams(pair.hypothesis, n)
        per_ref = []
        for ref in pair.references:
            if len(ref) < n:
                continue
            target = ngrams(ref, n)
            overlap = sum(min(count, hyp[gram]) for gram, count in target.items())
            per_ref.append(overlap / sum(target.values()))
        if not per_ref:
            logger.warning("rouge pair skipped, every reference is shorter than n", pair=index, order=n)
            continue
        scores.append(_combine(per_ref, multi_ref))
    if not scores:
        return 0.0
    return 100.0 * sum(scores) / len(scores)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2, multi_ref: str = "max") -> float:
    if beta <= 0:
        raise ConfigError(f"ROUGE-L beta must be positive, got {beta}")
    if not pairs:
        return 0.0
    total = 0.0
    for pair in pairs:
        per_ref = []
        for ref in pair.references:
            common = lcs_length(pair.hypothesis, ref)
            if common == 0:
                per_ref.append(0.0)
                continue
            precision = common / len(pair.hypothesis)
            recall = common / len(ref)
            per_ref.append((1 + beta**2) * precision * recall / (recall + beta**2 * precision))
        total += _combine(per_ref, multi_ref)
    return 100.0 * total / len(pairs)


ALIGN_NODE_BUDGET = 200_000


def _link_bounds(hypothesis: Sequence[str], reference: Sequence[str]) -> List[int]:
    """``bounds[s]``: most chunk links still possible among hypothesis bigrams starting at ``s`` or later."""
    ref_bigrams = Counter(zip(reference, reference[1:]))
    bounds = [0] * (len(hypothesis) + 1)
    seen: Counter = Counter()
    for s in range(len(hypothesis) - 2, -1, -1):
        bigram = (hypothesis[s], hypothesis[s + 1])
        seen[bigram] += 1
        bounds[s] = bounds[s + 1] + (1 if seen[bigram] <= ref_bigrams[bigram] else 0)
    return bounds


def align(
    hypothesis: Sequence[str], reference: Sequence[str], node_budget: int = ALIGN_NODE_BUDGET
) -> Tuple[int, int]:
    """
    Exact-match unigram alignment with the most matches, then the fewest
    chunks. Returns ``(matches, chunks)``.

    Every maximum matching has ``sum(min(count_hyp, count_ref))`` matches, so
    the search maximises links (consecutive hypothesis words matched to
    consecutive reference words) and ``chunks = matches - links``. Branches
    that cannot beat the best alignment under the bigram bound are cut, and
    after ``node_budget`` expansions the best alignment found so far is kept.
    """
    hyp_counts, ref_counts = Counter(hypothesis), Counter(reference)
    quota = {w: min(c, ref_counts[w]) for w, c in hyp_counts.items()}
    matches = sum(quota.values())
    if matches == 0:
        return 0, 0
    positions: Dict[str, List[int]] = {}
    for j, word in enumerate(reference):
        positions.setdefault(word, []).append(j)
    bounds = _link_bounds(hypothesis, reference)
    remaining_in_hyp = Counter(hypothesis)
    used = [False] * len(reference)
    best = [-1]
    nodes = [0]

    def search(i: int, previous: Optional[int], links: int) -> None:
        nodes[0] += 1
        if i == len(hypothesis):
            best[0] = max(best[0], links)
            return
        if links + bounds[i - 1 if previous is not None else i] <= best[0]:
            return
        if nodes[0] > node_budget and best[0] >= 0:
            return
        word = hypothesis[i]
        remaining_in_hyp[word] -= 1
        if quota.get(word, 0) > 0:
            candidates = positions[word]
            if previous is not None and previous + 1 < len(reference) and reference[previous + 1] == word:
                candidates = [previous + 1] + [j for j in candidates if j != previous + 1]
            for j in candidates:
                if used[j]:
                    continue
                used[j] = True
                quota[word] -= 1
                extends = previous is not None and j == previous + 1
                search(i + 1, j, links + (1 if extends else 0))
                quota[word] += 1
                used[j] = False
        if remaining_in_hyp[word] >= quota.get(word, 0):
            search(i + 1, None, links)
        remaining_in_hyp[word] += 1

    search(0, None, 0)
    if nodes[0] > node_budget:
        logger.debug("meteor alignment hit its search budget", hyp_len=len(hypothesis), ref_len=len(reference))
    return matches, matches - best[0]


def meteor_simplified(
    pairs: Sequence[EvalPair], alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5
) -> float:
    if not pairs:
        return 0.0
    total = 0.0
    for pair in pairs:
        per_ref = []
        for ref in pair.references:
            matches, chunks = align(pair.hypothesis, ref)
            if matches == 0:
                per_ref.append(0.0)
                continue
            precision = matches / len(pair.hypothesis)
            recall = matches / len(ref)
            f_mean = precision * recall / (alpha * precision + (1 - alpha) * recall)
            penalty = gamma * (chunks / matches) ** beta
            per_ref.append(f_mean * (1 - penalty))
        total += max(per_ref)
    return 100.0 * total / len(pairs)


def cider(pairs: Sequence[EvalPair], n_max: int = 4, sigma: float = 6.0) -> float:
    """Consensus score on the 0-10 scale; document frequency counts each image once."""
    if not pairs:
        raise DataError("CIDEr needs a non-empty corpus")
    corpus = len(pairs)
    score = 0.0
    for n in range(1, n_max + 1):
        doc_freq: Counter = Counter()
        for pair in pairs:
            doc_freq.update(set().union(*(ngrams(ref, n).keys() for ref in pair.references)))

        def vector(tokens: Sequence[str]) -> Dict[tuple, float]:
            counts = ngrams(tokens, n)
            size = sum(counts.values())
            return {
                gram: (count / size) * math.log(corpus / max(1, doc_freq[gram])) for gram, count in counts.items()
            }

        for pair in pairs:
            hyp = vector(pair.hypothesis)
            hyp_norm = math.sqrt(sum(v * v for v in hyp.values()))
            similarity = 0.0
            for ref in pair.references:
                target = vector(ref)
                ref_norm = math.sqrt(sum(v * v for v in target.values()))
                if hyp_norm == 0 or ref_norm == 0:
                    continue
                dot = sum(value * target.get(gram, 0.0) for gram, value in hyp.items())
                length_gap = len(pair.hypothesis) - len(ref)
                similarity += dot / (hyp_norm * ref_norm) * math.exp(-(length_gap**2) / (2 * sigma**2))
            score += similarity / len(pair.references)
    return 10.0 * score / (n_max * corpus)


@dataclass
class MetricOptions:
    rouge_multi_ref: str = "max"
    rouge_l_beta: float = 1.2
    meteor_alpha: float = 0.9
    meteor_beta: float = 3.0
    meteor_gamma: float = 0.5
    cider_sigma: float = 6.0


@dataclass
class MetricReport:
    b1: float
    b4: float
    r1: float
    r2: float
    rl: float
    meteor: float
    cider: float

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> List[str]:
        return [f"{value:.4f}" for value in asdict(self).values()]

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def score_corpus(pairs: Sequence[EvalPair], options: Optional[MetricOptions] = None) -> MetricReport:
    options = options or MetricOptions()
    report = MetricReport(
        b1=bleu(pairs, 1),
        b4=bleu(pairs, 4),
        r1=rouge_n(pairs, 1, options.rouge_multi_ref),
        r2=rouge_n(pairs, 2, options.rouge_multi_ref),
        rl=rouge_l(pairs, options.rouge_l_beta, options.rouge_multi_ref),
        meteor=meteor_simplified(pairs, options.meteor_alpha, options.meteor_beta, options.meteor_gamma),
        cider=100.0 * cider(pairs, sigma=options.cider_sigma),
    )
    logger.info("corpus scored", pairs=len(pairs), **report.as_dict())
    return report


def load_pairs(hyp_path: Union[str, os.PathLike], refs_path: Union[str, os.PathLike]) -> List[EvalPair]:
    """One hypothesis per line; references one line per sample, tab-separated."""
    try:
        hyps = Path(hyp_path).read_text(encoding="utf-8").splitlines()
        refs = Path(refs_path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read caption files: {exc}") from exc
    if len(hyps) != len(refs):
        raise DataError(f"{hyp_path} holds {len(hyps)} hypotheses but {refs_path} holds {len(refs)} reference lines")
    pairs = []
    for line_no, (hyp, ref_line) in enumerate(zip(hyps, refs), start=1):
        references = [r for r in ref_line.split("\t") if r.strip()]
        if not references:
            raise DataError(f"{refs_path}:{line_no}: no reference caption")
        pairs.append(EvalPair.from_text(hyp, references))
    return pairs
