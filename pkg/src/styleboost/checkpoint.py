"""Self-describing npz checkpoints: named parameter arrays + JSON metadata.

Arrays round-trip bit-exactly. Several models can share one file under
distinct prefixes.
"""

import json

import numpy as np


def save_checkpoint(path, states, meta):
    """states: {prefix: {param_name: array}}; meta: JSON-serializable dict."""
    payload = {"__meta__": np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for prefix, state in states.items():
        for name, arr in state.items():
            payload[f"{prefix}/{name}"] = arr
    np.savez(path, **payload)


def load_checkpoint(path):
    """Returns ({prefix: {param_name: array}}, meta)."""
    states = {}
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        for key in data.files:
            if key == "__meta__":
                continue
            prefix, name = key.split("/", 1)
            states.setdefault(prefix, {})[name] = data[key]
    return states, meta
