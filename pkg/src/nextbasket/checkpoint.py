"""Checkpoint serialization: plain-text manifest plus one float64 blob.

A checkpoint is a directory holding exactly two files:

``manifest.txt``
    Line 1: the magic string ``nextbasket-checkpoint-v1``.
    Then header entries, one ``key=value`` per line, sorted by key. The
    mandatory ``blob_sha256`` key carries the hex digest of the blob.
    Then a single ``[tensors]`` line followed by one line per tensor:
    ``name<TAB>dim,dim,...<TAB>byte_offset``, sorted by name, offsets
    ascending.

``tensors.bin``
    The tensors' values as little-endian float64, row-major, concatenated
    in manifest order.

Loading verifies the digest and the declared sizes before touching any
values, so a truncated or flipped-bit file fails loudly instead of
producing a partially restored model.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = "nextbasket-checkpoint-v1"
MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "tensors.bin"


def save_checkpoint(directory, tensors, header=None):
    """Write `tensors` (name -> ndarray) and `header` (str -> str) to `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {str(k): str(v) for k, v in (header or {}).items()}
    for key in header:
        if "=" in key or "\n" in key or "\n" in header[key]:
            raise CheckpointError(f"header key/value may not contain '=' or newlines: {key!r}")
        if key == "blob_sha256":
            raise CheckpointError("blob_sha256 is reserved")

    names = sorted(tensors)
    blob_parts = []
    entries = []
    offset = 0
    for name in names:
        array = np.ascontiguousarray(tensors[name], dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        raw = array.astype("<f8").tobytes()
        dims = ",".join(str(d) for d in array.shape)
        entries.append(f"{name}\t{dims}\t{offset}")
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)
    digest = hashlib.sha256(blob).hexdigest()

    lines = [MAGIC]
    lines.extend(f"{k}={header[k]}" for k in sorted(header))
    lines.append(f"blob_sha256={digest}")
    lines.append("[tensors]")
    lines.extend(entries)
    (directory / BLOB_NAME).write_bytes(blob)
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory):
    """Read a checkpoint directory; returns (tensors, header) or raises CheckpointError."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    blob_path = directory / BLOB_NAME
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"no checkpoint at {directory}")

    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"bad magic in {manifest_path}")

    header = {}
    entries = []
    section = "header"
    for line in lines[1:]:
        if not line:
            continue
        if line == "[tensors]":
            section = "tensors"
            continue
        if section == "header":
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"malformed header line {line!r}")
            header[key] = value
        else:
            parts = line.split("\t")
            if len(parts) != 3:
                raise CheckpointError(f"malformed tensor line {line!r}")
            name, dims, offset = parts
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            entries.append((name, shape, int(offset)))

    digest = header.pop("blob_sha256", None)
    if digest is None:
        raise CheckpointError("manifest is missing blob_sha256")
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != digest:
        raise CheckpointError(f"checkpoint blob hash mismatch in {directory}")

    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise CheckpointError(f"tensor {name!r} extends past blob end")
        array = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = np.array(array)  # writable copy
    expected = sum(int(np.prod(s, dtype=np.int64)) * 8 for _, s, _ in entries)
    if expected != len(blob):
        raise CheckpointError(f"blob size {len(blob)} does not match manifest total {expected}")
    return tensors, header


def roundtrip_report(tensors, directory, header=None):
    """Save, reload, and compare: {name: bit_identical} plus '#hash' verification.

    The reload path re-verifies the blob digest, so a True report means
    the on-disk bytes reproduce every tensor exactly.
    """
    save_checkpoint(directory, tensors, header)
    loaded, _ = load_checkpoint(directory)
    report = {"#hash": True}  # load_checkpoint raises on digest mismatch
    for name, original in tensors.items():
        stored = np.asarray(original, dtype=np.float64)
        if stored.ndim == 0:
            stored = stored.reshape(1)
        report[name] = stored.tobytes() == loaded[name].tobytes()
    return report


# -- training-state packing --------------------------------------------------

ADAM_M_PREFIX = "adam.m."
ADAM_V_PREFIX = "adam.v."


def pack_training_state(store, adam=None, train_rng=None, header=None):
    """Bundle store parameters (+ optional Adam moments and rng state) for saving."""
    tensors = {name: p.data for name, p in store.items()}
    header = dict(header or {})
    header["store.seed"] = str(store.seed)
    if adam is not None:
        header["adam.step_count"] = str(adam.step_count)
        header["adam.learning_rate"] = repr(adam.learning_rate)
        header["adam.beta1"] = repr(adam.beta1)
        header["adam.beta2"] = repr(adam.beta2)
        header["adam.epsilon"] = repr(adam.epsilon)
        for name, m in adam.first_moment.items():
            tensors[ADAM_M_PREFIX + name] = m
        for name, v in adam.second_moment.items():
            tensors[ADAM_V_PREFIX + name] = v
    if train_rng is not None:
        state = train_rng.bit_generator.state
        header["rng.pcg64.state"] = str(state["state"]["state"])
        header["rng.pcg64.inc"] = str(state["state"]["inc"])
        header["rng.pcg64.has_uint32"] = str(state["has_uint32"])
        header["rng.pcg64.uinteger"] = str(state["uinteger"])
    return tensors, header


def split_training_state(tensors, header):
    """Inverse of pack_training_state; returns (params, adam_kwargs_or_None, rng_or_None)."""
    from .optim import AdamState

    params = {}
    moments_m = {}
    moments_v = {}
    for name, array in tensors.items():
        if name.startswith(ADAM_M_PREFIX):
            moments_m[name[len(ADAM_M_PREFIX):]] = array
        elif name.startswith(ADAM_V_PREFIX):
            moments_v[name[len(ADAM_V_PREFIX):]] = array
        else:
            params[name] = array

    adam = None
    if "adam.step_count" in header:
        adam = AdamState(
            learning_rate=float(header["adam.learning_rate"]),
            beta1=float(header["adam.beta1"]),
            beta2=float(header["adam.beta2"]),
            epsilon=float(header["adam.epsilon"]),
            step_count=int(header["adam.step_count"]),
            first_moment=moments_m,
            second_moment=moments_v,
        )

    rng = None
    if "rng.pcg64.state" in header:
        rng = np.random.Generator(np.random.PCG64(0))
        rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(header["rng.pcg64.state"]),
                      "inc": int(header["rng.pcg64.inc"])},
            "has_uint32": int(header["rng.pcg64.has_uint32"]),
            "uinteger": int(header["rng.pcg64.uinteger"]),
        }
    return params, adam, rng
