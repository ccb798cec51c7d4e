"""Brute-force reference values for metrics_golden.json.

Run: python3 golden_oracle.py > metrics_golden.json
"""
import itertools
import json
import math
from collections import Counter

ALPHA, BETA, GAMMA = 0.9, 3.0, 0.5


def ngrams(t, n):
    return [tuple(t[i:i + n]) for i in range(len(t) - n + 1)]


def bleu(c, refs, max_n):
    orders = min(max_n, len(c))
    logs = 0.0
    for n in range(1, orders + 1):
        cc = Counter(ngrams(c, n))
        matched = 0
        for g, k in cc.items():
            matched += min(k, max(Counter(ngrams(r, n))[g] for r in refs))
        total = len(c) - n + 1
        if matched == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = matched / total
        logs += math.log(p)
    r = sorted((abs(len(x) - len(c)), len(x)) for x in refs)[0][1]
    bp = 1.0 if len(c) > r else math.exp(1 - r / len(c))
    return bp * math.exp(logs / orders)


def lcs_brute(a, b):
    best = 0
    for k in range(len(a), 0, -1):
        subs = set(itertools.combinations(a, k))
        for s in itertools.combinations(b, k):
            if s in subs:
                return k
    return best


def rouge(c, r):
    l = lcs_brute(c, r)
    if l == 0:
        return 0.0, 0.0, 0.0
    p, rc = l / len(c), l / len(r)
    return p, rc, 2 * p * rc / (p + rc)


def stem(w):
    for s in ("ing", "es", "ed", "s"):
        if w.endswith(s) and len(w) - len(s) >= 3:
            w = w[: -len(s)]
            break
    if w.endswith("e") and len(w) >= 4:
        w = w[:-1]
    return w


def alignments(c, r):
    cs, rs = [stem(w) for w in c], [stem(w) for w in r]

    def rec(i, used):
        if i == len(cs):
            yield []
            return
        yield from rec(i + 1, used)
        for j in range(len(rs)):
            if j not in used and cs[i] == rs[j]:
                for rest in rec(i + 1, used | {j}):
                    yield [(i, j)] + rest

    yield from rec(0, frozenset())


def chunks(pairs):
    pairs = sorted(pairs)
    n = 0
    for k, (i, j) in enumerate(pairs):
        if k == 0 or pairs[k - 1] != (i - 1, j - 1):
            n += 1
    return n


def meteor(c, r):
    best = None
    for a in alignments(c, r):
        key = (-len(a), chunks(a))
        if best is None or key < best:
            best = key
    m, ch = -best[0], best[1]
    if m == 0:
        return 0.0
    p, rc = m / len(c), m / len(r)
    f = p * rc / (ALPHA * p + (1 - ALPHA) * rc)
    return f * (1 - GAMMA * (ch / m) ** BETA)


def ce(pred, ref, taxonomy):
    out = {}
    for group in ("disease", "form", "rhythm"):
        ps, rs, fs = [], [], []
        for lab in taxonomy:
            if lab["group"] != group:
                continue
            tp = sum(1 for p, r in zip(pred, ref) if lab["code"] in p and lab["code"] in r)
            fp = sum(1 for p, r in zip(pred, ref) if lab["code"] in p and lab["code"] not in r)
            fn = sum(1 for p, r in zip(pred, ref) if lab["code"] not in p and lab["code"] in r)
            if tp + fp + fn == 0:
                continue
            p = tp / (tp + fp) if tp + fp else 0.0
            rc = tp / (tp + fn) if tp + fn else 0.0
            f = 2 * p * rc / (p + rc) if p + rc else 0.0
            ps.append(p)
            rs.append(rc)
            fs.append(f)
        d = max(len(ps), 1)
        out[group] = {"precision": sum(ps) / d, "recall": sum(rs) / d, "f1": sum(fs) / d, "n_labels": len(ps)}
    return out


TEXT = [
    ("identity", "sinus rhythm with normal axis", ["sinus rhythm with normal axis"]),
    ("disjoint", "a b c", ["d e f"]),
    ("brevity", "the cat sat", ["the cat sat down"]),
    ("lcs_gap", "a b c d", ["a c d e"]),
    ("stems", "t waves inverted", ["t wave inversion"]),
    ("multi_ref", "sinus rhythm left axis deviation", ["sinus rhythm with left axis deviation", "left axis deviation sinus rhythm"]),
    ("clipping", "the the the the", ["the cat on the mat"]),
    ("swap", "rhythm sinus", ["sinus rhythm"]),
    ("long_candidate", "sinus rhythm normal ecg today", ["sinus rhythm"]),
    ("single_token", "normal", ["normal"]),
    ("prefix_word", "left bundle branch block", ["complete left bundle branch block"]),
    ("plural", "no acute changes noted", ["no acute change noted"]),
    ("punctuation", "sinus bradycardia otherwise normal ecg", ["sinus bradycardia . normal ecg ."]),
    ("afib", "atrial fibrillation with rapid ventricular response", ["atrial fibrillation with a rapid ventricular rate"]),
    ("reorder", "qt interval prolonged", ["prolonged qt interval"]),
    ("alternating", "a b a b", ["b a b a"]),
]

TAX = [
    {"code": "SR", "group": "rhythm"}, {"code": "AFIB", "group": "rhythm"},
    {"code": "LBBB", "group": "disease"}, {"code": "IMI", "group": "disease"},
    {"code": "LVOLT", "group": "form"}, {"code": "INVT", "group": "form"},
]

CE = [
    ("ce_three_by_four", [["SR", "LBBB"], ["SR"], ["AFIB", "IMI"]], [["SR", "IMI"], ["SR", "LBBB"], ["AFIB", "IMI"]]),
    ("ce_identity", [["SR", "LVOLT"], ["AFIB", "LBBB", "INVT"]], [["SR", "LVOLT"], ["AFIB", "LBBB", "INVT"]]),
    ("ce_empty_predictions", [[], [], []], [["SR"], ["AFIB", "INVT"], ["LBBB"]]),
    ("ce_mixed", [["SR", "INVT"], ["SR", "LVOLT", "IMI"], ["AFIB"], ["SR"]], [["SR", "LVOLT"], ["AFIB", "LVOLT", "IMI"], ["AFIB", "LBBB"], ["SR", "INVT"]]),
]

cases = []
for name, c, refs in TEXT:
    ct, rts = c.split(), [r.split() for r in refs]
    p, r, f = rouge(ct, rts[0])
    cases.append({
        "name": name, "kind": "text", "candidate": c, "references": refs,
        "expected": {"bleu1": bleu(ct, rts, 1), "bleu4": bleu(ct, rts, 4),
                     "rouge_l": {"precision": p, "recall": r, "f": f},
                     "meteor": meteor(ct, rts[0])},
    })
for name, pred, ref in CE:
    cases.append({"name": name, "kind": "ce", "taxonomy": TAX, "pred": pred, "reference": ref,
                  "expected": ce([set(p) for p in pred], [set(r) for r in ref], TAX)})
print(json.dumps({"cases": cases}, indent=1))
