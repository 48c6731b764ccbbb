"""
Brute-force reference scorers used to check the caption metrics.

Written for clarity over speed: explicit n-gram enumeration, a full LCS
table and exhaustive alignment search. Only meant for short captions.
"""

import math


def grams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def count(items, item):
    return sum(1 for x in items if x == item)


def bleu(pairs, n):
    clipped = [0] * (n + 1)
    totals = [0] * (n + 1)
    hyp_len = ref_len = 0
    for hyp, refs in pairs:
        hyp_len += len(hyp)
        best = None
        for ref in refs:
            key = (abs(len(ref) - len(hyp)), len(ref))
            if best is None or key < best:
                best = key
        ref_len += best[1]
        for k in range(1, n + 1):
            hyp_grams = grams(hyp, k)
            totals[k] += len(hyp_grams)
            for gram in set(hyp_grams):
                ceiling = max(count(grams(ref, k), gram) for ref in refs)
                clipped[k] += min(count(hyp_grams, gram), ceiling)
    if hyp_len == 0:
        return 0.0
    if any(clipped[k] == 0 for k in range(1, n + 1)):
        return 0.0
    geo = math.exp(sum(math.log(clipped[k] / totals[k]) for k in range(1, n + 1)) / n)
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100 * bp * geo


def rouge_n(pairs, n):
    scores = []
    for hyp, refs in pairs:
        per_ref = []
        for ref in refs:
            ref_grams = grams(ref, n)
            if not ref_grams:
                continue
            hyp_grams = grams(hyp, n)
            hit = sum(min(count(hyp_grams, g), count(ref_grams, g)) for g in set(ref_grams))
            per_ref.append(hit / len(ref_grams))
        if per_ref:
            scores.append(max(per_ref))
    return 100 * sum(scores) / len(scores) if scores else 0.0


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l(pairs, beta=1.2):
    total = 0.0
    for hyp, refs in pairs:
        best = 0.0
        for ref in refs:
            common = lcs(hyp, ref)
            if common:
                p, r = common / len(hyp), common / len(ref)
                best = max(best, (1 + beta**2) * p * r / (r + beta**2 * p))
        total += best
    return 100 * total / len(pairs)


def alignments(hyp, ref):
    """Every partial one-to-one mapping of hypothesis positions onto equal reference words."""

    def extend(i, used):
        if i == len(hyp):
            yield []
            return
        for rest in extend(i + 1, used):
            yield [None] + rest
        for j, word in enumerate(ref):
            if word == hyp[i] and j not in used:
                for rest in extend(i + 1, used | {j}):
                    yield [j] + rest

    return extend(0, frozenset())


def chunks_of(mapping):
    chunks = 0
    for i, j in enumerate(mapping):
        if j is None:
            continue
        if i > 0 and mapping[i - 1] is not None and mapping[i - 1] + 1 == j:
            continue
        chunks += 1
    return chunks


def meteor(pairs, alpha=0.9, beta=3.0, gamma=0.5):
    total = 0.0
    for hyp, refs in pairs:
        best = 0.0
        for ref in refs:
            matches, negative_chunks = max(
                (sum(1 for j in mapping if j is not None), -chunks_of(mapping)) for mapping in alignments(hyp, ref)
            )
            chunks = -negative_chunks
            if matches == 0:
                continue
            p, r = matches / len(hyp), matches / len(ref)
            f_mean = p * r / (alpha * p + (1 - alpha) * r)
            best = max(best, f_mean * (1 - gamma * (chunks / matches) ** beta))
        total += best
    return 100 * total / len(pairs)


def cider(pairs, n_max=4, sigma=6.0):
    corpus = len(pairs)
    seen = {}

    def doc_freq(n, gram):
        if (n, gram) not in seen:
            seen[(n, gram)] = sum(1 for _, rs in pairs if any(gram in grams(r, n) for r in rs))
        return seen[(n, gram)]

    total = 0.0
    for hyp, refs in pairs:
        pair_score = 0.0
        for n in range(1, n_max + 1):
            def weight(tokens, gram):
                df = doc_freq(n, gram)
                tf = count(grams(tokens, n), gram) / len(grams(tokens, n))
                return tf * math.log(corpus / max(1, df))

            hyp_vec = {g: weight(hyp, g) for g in set(grams(hyp, n))}
            sims = 0.0
            for ref in refs:
                ref_vec = {g: weight(ref, g) for g in set(grams(ref, n))}
                hn = math.sqrt(sum(v * v for v in hyp_vec.values()))
                rn = math.sqrt(sum(v * v for v in ref_vec.values()))
                if hn == 0 or rn == 0:
                    continue
                dot = sum(v * ref_vec.get(g, 0.0) for g, v in hyp_vec.items())
                sims += dot / (hn * rn) * math.exp(-((len(hyp) - len(ref)) ** 2) / (2 * sigma**2))
            pair_score += sims / len(refs)
        total += pair_score / n_max
    return 10 * total / corpus
