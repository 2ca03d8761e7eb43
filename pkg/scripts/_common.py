"""Shared helpers for the experiment scripts."""

import json
from pathlib import Path

from zclassifier.config import parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def blobs_config(seed: int, head: str, epochs: int = 200, **overrides):
    """The quickstart blobs config with a different seed and head kind."""
    doc = json.loads((CONFIGS / "blobs_quickstart.json").read_text())
    doc["seed"] = seed
    doc["model"]["name"] = head
    doc["model"]["head"] = {"kind": head} if head == "softmax" else {**doc["model"]["head"], "kind": head}
    doc["train"]["epochs"] = epochs
    doc.update(overrides)
    return parse_config(doc)
