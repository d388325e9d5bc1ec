"""Regenerate tests/data/fixture_reviews.jsonl: 1,000 lines of review JSON.

Most lines come from a small seeded synthetic world; a handful are edited to
carry HTML entities, Unicode punctuation or an absent text field, and ten are
deliberately malformed so that ingestion has to skip them.

    python3 scripts/make_fixture.py
    python3 scripts/count_fixture.py    # refresh the frozen stats
"""

import json
from pathlib import Path

from convmf.synthetic import WorldSpec, generate_world

N_LINES = 1000
MALFORMED = [
    '{"reviewerID": "U99990", "asin": "I99990", "overall": 4.0, "reviewText": "truncated',
    '["not", "an", "object"]',
    '{"reviewerID": "U99991", "overall": 3.0, "reviewText": "no item id"}',
    '{"asin": "I99992", "overall": 3.0, "reviewText": "no user id"}',
    '{"reviewerID": "U99993", "asin": "I99993", "reviewText": "no rating"}',
    '{"reviewerID": "U99994", "asin": "I99994", "overall": "five", "reviewText": "bad rating"}',
    '{"reviewerID": "", "asin": "I99995", "overall": 2.0, "reviewText": "empty user id"}',
    '{"reviewerID": "U99996", "asin": "I99996", "overall": NaN, "reviewText": "nan rating"}',
    'reviewerID=U99997 asin=I99997',
    '{"reviewerID": "U99998", "asin": "I99998", "overall": null, "reviewText": "null rating"}',
]


def main():
    world = generate_world(WorldSpec(n_users=120, n_items=60, ratings_per_user=9.0, seed=11))
    rows = []
    for i, r in enumerate(world.records[: N_LINES - len(MALFORMED)]):
        obj = {"reviewerID": r.user_id, "asin": r.item_id, "overall": r.rating, "reviewText": r.text}
        if i % 97 == 0:
            obj["reviewText"] = r.text.replace(" ", " &amp; ", 1) + " &quot;great&quot;"
        elif i % 89 == 0:
            obj["reviewText"] = "“" + r.text + "” — ok…"
        elif i % 211 == 5:
            del obj["reviewText"]
        rows.append(json.dumps(obj, ensure_ascii=False))
    step = len(rows) // len(MALFORMED)
    for k, bad in enumerate(MALFORMED):
        rows.insert(k * step + 3, bad)
    assert len(rows) == N_LINES
    out = Path(__file__).resolve().parents[1] / "tests" / "data" / "fixture_reviews.jsonl"
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
