"""Independent count of the review fixture; writes tests/data/fixture_stats.json.

Deliberately shares no code with the package: a record counts when its line
is a JSON object with non-empty ``reviewerID`` and ``asin`` and a finite
numeric ``overall``.  Words are whitespace-separated runs of ``reviewText``.
"""

import json
import math
import sys
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"


def count(path):
    users, items = set(), set()
    reviews = words = malformed = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                uid, iid = str(obj["reviewerID"]), str(obj["asin"])
                rating = float(obj["overall"])
                ok = bool(uid) and bool(iid) and math.isfinite(rating)
            except (ValueError, KeyError, TypeError):
                ok = False
            if not ok:
                malformed += 1
                continue
            users.add(uid)
            items.add(iid)
            reviews += 1
            words += len((obj.get("reviewText") or "").split())
    return {"n_users": len(users), "n_items": len(items), "n_reviews": reviews,
            "total_words": words, "malformed_lines": malformed}


if __name__ == "__main__":
    src = Path(sys.argv[1]) if len(sys.argv) > 1 else DATA / "fixture_reviews.jsonl"
    stats = count(src)
    (DATA / "fixture_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(stats, sort_keys=True))
