"""Brute-force reference implementations used to check the fast code paths."""

from itertools import combinations, permutations


def brute_pairwise(predicted, gold):
    ids = sorted(gold)
    tp = fp = fn = 0
    for a, b in combinations(ids, 2):
        same_p = predicted[a] == predicted[b]
        same_g = gold[a] == gold[b]
        tp += same_p and same_g
        fp += same_p and not same_g
        fn += same_g and not same_p
    return tp, fp, fn


def brute_one_to_one(predicted, gold):
    """Exhaustive search over all injective matchings between cluster sets."""
    if not gold:
        return 1.0
    p = sorted(set(predicted.values()))
    g = sorted(set(gold.values()))
    overlap = {(x, y): sum(1 for m in gold if predicted[m] == x and gold[m] == y) for x in p for y in g}
    best = 0
    if len(p) <= len(g):
        for perm in permutations(g, len(p)):
            best = max(best, sum(overlap[x, y] for x, y in zip(p, perm)))
    else:
        for perm in permutations(p, len(g)):
            best = max(best, sum(overlap[x, y] for x, y in zip(perm, g)))
    return best / len(gold)
