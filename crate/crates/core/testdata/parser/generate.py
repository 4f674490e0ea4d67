"""Builds the noisy completion corpus in cases.jsonl.

Each case starts from a list of clean opinion records, renders it in a
model-like surface form and applies one kind of noise. The expected parse is
derived from the clean records and the noise applied, not from the parser.

    python3 generate.py > cases.jsonl
"""

import json
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent
BANK = [
    op
    for line in (HERE / "../../data/shots.jsonl").read_text().splitlines()
    if line.strip()
    for op in json.loads(line)["opinions"]
]

STORY_BANK = [
    ("She returned the wallet to the front desk.", ["honesty"], "Returning lost property is the right thing to do."),
    ("He kept the money and left quietly.", ["self-interest", "need"], "He was struggling to pay rent that month."),
    ("They called the owner using the ID inside.", ["responsibility"], "The owner would be worried about the missing cards."),
    ("She asked her friend what to do first.", ["uncertainty", "advice"], "She was unsure whether it was her business."),
]


def q(s):
    return json.dumps(s, ensure_ascii=False)


def record_fields(op, criteria=True, task="stance"):
    fields = []
    if task != "generation":
        fields.append(("Stance", op["stance"]))
    else:
        fields.append(("Story", op["story"]))
    if criteria:
        fields.append(("Criteria", op["criteria"]))
    fields.append(("Reason", op["reason"]))
    return fields


def render(ops, criteria=True, task="stance", key=lambda i: str(i), sep=", ", trailing=False):
    recs = []
    for i, op in enumerate(ops, 1):
        parts = []
        for name, value in record_fields(op, criteria, task):
            if isinstance(value, list):
                items = sep.join(q(v) for v in value)
                if trailing and value:
                    items += ","
                parts.append(f"{q(name)}: [{items}]")
            else:
                parts.append(f"{q(name)}: {q(value)}")
        body = sep.join(parts) + ("," if trailing else "")
        recs.append(f"{key(i)}: {{{body}}}")
    return "{" + sep.join(recs) + ("," if trailing else "") + "}"


def expected(ops, criteria=True, task="stance", stance_of=None):
    out = []
    for i, op in enumerate(ops, 1):
        rec = {
            "index": i,
            "stance": stance_of(op) if stance_of else ("None" if task == "generation" else op["stance"]),
            "criteria": list(op["criteria"]) if criteria else [],
            "reason": op["reason"],
        }
        if task == "generation":
            rec["continuation"] = op["story"]
        out.append(rec)
    return out


def py_repr(ops, criteria=True):
    d = {
        i: {k: v for k, v in record_fields(op, criteria)}
        for i, op in enumerate(ops, 1)
    }
    return repr(d)


def curly(text):
    out, open_ = [], True
    for ch in text:
        if ch == '"':
            out.append("“" if open_ else "”")
            open_ = not open_
        else:
            out.append(ch)
    return "".join(out)


def pick(rng, n):
    return [dict(op) for op in rng.sample(BANK, n)]


def cases():
    rng = random.Random(20240607)
    kinds = [
        "clean",
        "python_repr",
        "string_keys",
        "pretty",
        "trailing_commas",
        "fenced",
        "prose",
        "lower_stance",
        "truncate_mid_record",
        "truncate_closing",
        "curly_quotes",
        "freeform",
        "labeling",
        "inner_quotes",
        "missing_comma",
        "missing_reason",
        "escaped_newline",
        "generation",
        "mixed_quotes",
        "criteria_string",
        "bare_keys",
        "apostrophes",
    ]
    out = []
    for n in range(50):
        kind = kinds[n % len(kinds)]
        ops = pick(rng, rng.randint(3, 10))
        task = "stance"
        text, exp = None, None
        if kind == "clean":
            text, exp = render(ops, key=str), expected(ops)
        elif kind == "python_repr":
            text, exp = py_repr(ops), expected(ops)
        elif kind == "string_keys":
            d = {str(i): dict(record_fields(op)) for i, op in enumerate(ops, 1)}
            text, exp = json.dumps(d, ensure_ascii=False), expected(ops)
        elif kind == "pretty":
            d = {str(i): dict(record_fields(op)) for i, op in enumerate(ops, 1)}
            text, exp = json.dumps(d, indent=2, ensure_ascii=False), expected(ops)
        elif kind == "trailing_commas":
            text, exp = render(ops, trailing=True), expected(ops)
        elif kind == "fenced":
            text = "```python\n" + py_repr(ops) + "\n```"
            exp = expected(ops)
        elif kind == "prose":
            text = "Sure! Here are the opinions:\n\n" + render(ops) + "\n\nLet me know if you need more."
            exp = expected(ops)
        elif kind == "lower_stance":
            variants = {"Agree": ["agree", "AGREE", "Agree."], "Disagree": ["disagree", "DISAGREE", "Disagree."]}
            noisy = [dict(op, stance=rng.choice(variants[op["stance"]])) for op in ops]
            text, exp = render(noisy), expected(ops)
        elif kind == "truncate_mid_record":
            full = render(ops)
            last_reason = q(ops[-1]["reason"])
            cut = full.rindex(last_reason) + len(last_reason) // 2
            text, exp = full[:cut], expected(ops[:-1])
        elif kind == "truncate_closing":
            text, exp = render(ops)[:-1], expected(ops)
        elif kind == "curly_quotes":
            text, exp = curly(render(ops)), expected(ops)
        elif kind == "freeform":
            text, exp = render(ops, criteria=False), expected(ops, criteria=False)
        elif kind == "labeling":
            task = "labeling"
            labels = {"Agree": "Hate Speech", "Disagree": "Not Hate Speech"}
            names = {"Agree": "Hate", "Disagree": "NotHate"}
            noisy = [dict(op, stance=labels[op["stance"]]) for op in ops]
            text = render(noisy)
            exp = expected(ops, stance_of=lambda op: names[op["stance"]])
        elif kind == "inner_quotes":
            ops[0]["reason"] = 'My mother always said "watch your words" and I still do.'
            text = render(ops).replace(q(ops[0]["reason"]), '"' + ops[0]["reason"] + '"')
            exp = expected(ops)
        elif kind == "missing_comma":
            full = render(ops)
            text = full.replace("}, 2: {", "}\n2: {", 1)
            exp = expected(ops)
        elif kind == "missing_reason":
            full = render(ops)
            drop = rng.randrange(len(ops))
            victim = ', "Reason": ' + q(ops[drop]["reason"])
            text = full.replace(victim, "", 1)
            exp = [e for e in expected(ops) if e["index"] != drop + 1]
        elif kind == "escaped_newline":
            ops[-1]["reason"] = ops[-1]["reason"] + "\nThat is my view."
            text, exp = render(ops), expected(ops)
        elif kind == "generation":
            task = "generation"
            stories = [
                {"story": s, "criteria": c, "reason": r}
                for s, c, r in rng.sample(STORY_BANK, rng.randint(2, 4))
            ]
            text = render(stories, task="generation")
            exp = expected(stories, task="generation")
        elif kind == "mixed_quotes":
            text = render(ops)
            for name in ("Stance", "Criteria", "Reason"):
                text = text.replace(f'"{name}"', f"'{name}'")
            exp = expected(ops)
        elif kind == "criteria_string":
            text = render(ops)
            for op in ops:
                listed = "[" + ", ".join(q(c) for c in op["criteria"]) + "]"
                text = text.replace(listed, q(", ".join(op["criteria"])), 1)
            exp = expected(ops)
        elif kind == "bare_keys":
            text = render(ops)
            for name in ("Stance", "Criteria", "Reason"):
                text = text.replace(f'"{name}"', name)
            exp = expected(ops)
        elif kind == "apostrophes":
            ops[0]["reason"] = "It's my parents' rule, and I'd say it \"works\"."
            text, exp = py_repr(ops), expected(ops)
        out.append({"name": f"{n:02d}_{kind}", "task": task, "input": text, "expected": exp})
    return out


if __name__ == "__main__":
    for case in cases():
        print(json.dumps(case, ensure_ascii=False))
