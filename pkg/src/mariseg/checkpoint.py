"""Weight checkpoints: a zip archive of named little-endian float32 arrays.

The format is a plain NumPy ``.npz``: each entry is one parameter or buffer
under its hierarchical state-dict name, stored as ``<f4`` with the usual
``.npy`` shape header.  An optional ``_meta_json`` entry holds a UTF-8 JSON
metadata blob (epoch, configs).  Integer bookkeeping buffers
(``num_batches_tracked``) are not serialized.
"""

import json

import numpy as np
import torch

META_KEY = "_meta_json"


def save(model, path, meta=None):
    arrays = {}
    for name, tensor in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        arrays[name] = tensor.detach().cpu().numpy().astype("<f4")
    if meta is not None:
        arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                         dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load(path):
    """Return (name -> float32 array, metadata dict)."""
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files if k != META_KEY}
        meta = {}
        if META_KEY in archive.files:
            meta = json.loads(archive[META_KEY].tobytes().decode())
    return arrays, meta


def load_into(model, path, strict=True):
    """Load a checkpoint into a module; returns the metadata dict."""
    arrays, meta = load(path)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.endswith("num_batches_tracked")]
    if strict and (missing or unexpected):
        raise RuntimeError(f"checkpoint mismatch: missing {missing}, "
                           f"unexpected {unexpected}")
    return meta
