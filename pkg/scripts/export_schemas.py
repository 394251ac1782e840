#!/usr/bin/env python3
"""Write the JSON Schemas of every conduct-service response model to schemas/.

The committed files are the published API contract; the test suite validates
live responses against them.
"""

from __future__ import annotations

import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from dosecombo.service import RESPONSE_MODELS  # noqa: E402

OUT = pathlib.Path(__file__).resolve().parents[1] / "schemas"


def main() -> int:
    OUT.mkdir(exist_ok=True)
    for name, model in RESPONSE_MODELS.items():
        schema = model.model_json_schema()
        path = OUT / f"{name}.schema.json"
        path.write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
