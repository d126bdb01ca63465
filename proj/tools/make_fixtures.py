#!/usr/bin/env python3
"""Writes fixtures/v1/*.jsonl.

Metric expectations come from brute-force enumeration in exact rational
arithmetic, independent of the C++ implementation. Prompt expectations are
spelled out from the prompt pattern directly.
"""

import json
import math
import pathlib
import sys
from fractions import Fraction

ROOT = pathlib.Path(__file__).resolve().parent.parent
OUT = ROOT / "fixtures" / "v1"

GOALS = {
    "domain classification": "the domain of the dialogue is",
    "intent detection": "the intent of the customer is",
    "dialogue generation": "the response of the agent is",
    "summarization": "the summary of the dialogue is",
    "sentence similarity": "the relationship of the input sentences is",
}


def is_cjk(ch):
    cp = ord(ch)
    return (0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF or 0x20000 <= cp <= 0x2A6DF
            or 0xF900 <= cp <= 0xFAFF or 0x3000 <= cp <= 0x303F or 0xFF00 <= cp <= 0xFFEF)


def tokens(text):
    out, cur = [], ""
    for ch in text:
        if ch.isspace():
            if cur:
                out.append(cur)
            cur = ""
        elif is_cjk(ch):
            if cur:
                out.append(cur)
            cur = ""
            out.append(ch)
        else:
            cur += ch
    if cur:
        out.append(cur)
    return out


def grams(toks, n):
    return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]


def clipped(pred, ref):
    # Multiset intersection by pairing equal n-grams one at a time.
    remaining = list(ref)
    hits = 0
    for g in pred:
        if g in remaining:
            remaining.remove(g)
            hits += 1
    return hits


def lcs(a, b):
    best = 0
    for mask in range(1 << len(a)):
        sub = [a[i] for i in range(len(a)) if mask >> i & 1]
        if len(sub) <= best:
            continue
        it = iter(b)
        if all(any(x == y for y in it) for x in sub):
            best = len(sub)
    return best


def f1(overlap, p_size, r_size):
    p = Fraction(overlap, p_size) if p_size else Fraction(0)
    r = Fraction(overlap, r_size) if r_size else Fraction(0)
    return 2 * p * r / (p + r) if p + r else Fraction(0)


def rouge(pred, ref, variant):
    p, r = tokens(pred), tokens(ref)
    if variant == "L":
        return f1(lcs(p, r), len(p), len(r))
    n = int(variant)
    return f1(clipped(grams(p, n), grams(r, n)), max(len(p) - n + 1, 0), max(len(r) - n + 1, 0))


def bleu2(pairs):
    matched = [0, 0]
    total = [0, 0]
    c = r = 0
    for pred, ref in pairs:
        p, q = tokens(pred), tokens(ref)
        c += len(p)
        r += len(q)
        for n in (1, 2):
            matched[n - 1] += clipped(grams(p, n), grams(q, n))
            total[n - 1] += len(grams(p, n))
    if matched[0] == 0 or matched[1] == 0:
        return 0.0
    geo = math.sqrt(float(Fraction(matched[0], total[0]) * Fraction(matched[1], total[1])))
    bp = math.exp(1 - r / c) if c < r else 1.0
    return bp * geo


METRIC_PAIRS = [
    ("the-cat-dog", "the cat", "the dog", "DERIVED"),
    ("clipping", "the the the", "the cat", "DERIVED"),
    ("rouge1-abc", "a b c", "a b d", "DERIVED"),
    ("identical", "the refund is on the way", "the refund is on the way", "TRIVIAL"),
    ("disjoint", "hello there", "goodbye friend", "TRIVIAL"),
    ("brevity", "the order", "the order has shipped today", "DERIVED"),
    ("longer-pred", "your order has shipped and will arrive today", "your order will arrive today", "DERIVED"),
    ("reordered", "b a c d", "a b c d", "DERIVED"),
    ("repeated-bigrams", "a b a b a b", "a b a b", "DERIVED"),
    ("lcs-gap", "a x b y c", "a b c", "DERIVED"),
    ("single-token", "yes", "yes", "TRIVIAL"),
    ("single-vs-pair", "yes", "yes please", "DERIVED"),
    ("cjk", "退款已经到账", "退款还没有到账", "DERIVED"),
    ("cjk-mixed", "订单 order 已发货", "order 已发货", "DERIVED"),
    ("punctuation-tokens", "thanks !", "thanks", "DERIVED"),
    ("case-sensitive", "The cat", "the cat", "DERIVED"),
    ("summary-like", "the customer asked for a refund and the agent issued it",
     "the customer asked for a refund for the pizza and the agent issued the refund", "DERIVED"),
    ("response-like", "i have issued a refund for your pizza", "the refund for the pizza has been processed", "DERIVED"),
    ("empty-pred", "", "a b", "TRIVIAL"),
    ("whitespace", "  a   b  c ", "a b c", "TRIVIAL"),
]


def metric_fixtures():
    out = []
    for name, pred, ref, tag in METRIC_PAIRS:
        expected = {"bleu2": bleu2([(pred, ref)])}
        for v, key in (("1", "rouge1"), ("2", "rouge2"), ("L", "rougeL")):
            expected[key] = float(rouge(pred, ref, v))
        out.append({"name": "metric/" + name, "kind": "metric", "provenance": tag,
                    "input": {"predictions": [pred], "references": [ref]}, "expected": expected})
    # Corpus-level BLEU pools counts over pairs; ROUGE averages per-pair F1.
    corpus = [(p, r) for _, p, r, _ in METRIC_PAIRS[:8]]
    expected = {"bleu2": bleu2(corpus)}
    for v, key in (("1", "rouge1"), ("2", "rouge2"), ("L", "rougeL")):
        expected[key] = float(sum(rouge(p, r, v) for p, r in corpus) / len(corpus))
    out.append({"name": "metric/corpus-of-8", "kind": "metric", "provenance": "DERIVED",
                "input": {"predictions": [p for p, _ in corpus], "references": [r for _, r in corpus]},
                "expected": expected})
    return out


def history(utterances):
    return " ".join("[%s] %s" % (u["role"].upper(), u["text"]) for u in utterances)


def prompt_fixtures():
    dialogue = [{"role": "customer", "text": "where is my refund for the pizza"},
                {"role": "agent", "text": "your refund will arrive in three days"}]
    pair = [{"role": "customer", "text": "i want a refund for my pizza"},
            {"role": "customer", "text": "can i get my money back for the noodles"}]
    out = []
    for task, goal in GOALS.items():
        utts = pair if task == "sentence similarity" else dialogue
        d = history(utts)
        for variant, text in (("full", "[TASK] %s [DIALOGUE] %s [GOAL] %s" % (task, d, goal)),
                              ("no_goal", "[TASK] %s [DIALOGUE] %s" % (task, d)),
                              ("no_task", "[DIALOGUE] %s [GOAL] %s" % (d, goal))):
            out.append({"name": "prompt/%s/%s" % (task.replace(" ", "_"), variant), "kind": "prompt",
                        "provenance": "PAPER", "input": {"task": task, "variant": variant, "utterances": utts},
                        "expected": text})
    return out


def label_fixtures():
    cases = [("refund!", "refund", True, "PAPER"), ("refund order", "refund", False, "TRIVIAL"),
             ("Refund Request.", "refund request", True, "PAPER"), ("  order   status ", "order status", True, "TRIVIAL")]
    return [{"name": "exact_match/%d" % i, "kind": "exact_match", "provenance": tag,
             "input": {"prediction": p, "gold": g}, "expected": m} for i, (p, g, m, tag) in enumerate(cases)]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for fname, rows in (("metrics.jsonl", metric_fixtures()), ("prompts.jsonl", prompt_fixtures()),
                        ("exact_match.jsonl", label_fixtures())):
        with open(OUT / fname, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, ensure_ascii=False, sort_keys=False) + "\n")
        print("wrote", OUT / fname, len(rows), "fixtures", file=sys.stderr)


if __name__ == "__main__":
    main()
