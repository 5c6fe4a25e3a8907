import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np


def serialize_instance(obj: Any) -> Any:
    if hasattr(obj, "model_dump"):
        return obj.model_dump(mode="json")
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"Type {type(obj)} not serializable")


def dump_json(obj: Any, filepath: Path) -> None:
    """Write `obj` as sorted, indented JSON so reruns are byte-identical."""
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(
            obj,
            f,
            ensure_ascii=False,
            indent=4,
            sort_keys=True,
            default=serialize_instance,
        )
        f.write("\n")


def config_digest(obj: Any) -> str:
    """SHA-256 of the canonical JSON form of `obj`."""
    text = json.dumps(
        obj, sort_keys=True, separators=(",", ":"), default=serialize_instance
    )
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
