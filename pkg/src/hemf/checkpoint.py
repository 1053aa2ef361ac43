"""Versioned, checksummed checkpoint container.

Layout: an 8-byte magic, a little-endian uint32 schema version, a uint32
section count, then length-prefixed named sections, and a trailing SHA-256
digest of everything before it.  Numeric state goes into an ``npz`` section
so posterior fields round-trip bit-exactly; scalars ride in a JSON section.
Writes go through a temporary file and an atomic rename, so a crash never
leaves a partial checkpoint behind.
"""

import hashlib
import io
import json
import os
import struct

import numpy as np

from .errors import CheckpointError
from .model import Hyperparameters, ModelState, SideState

MAGIC = b"HEMFCKP\x00"
SCHEMA_VERSION = 1

_SIDE_FIELDS = ("means", "second_moments", "memberships", "eta1", "eta2",
                "comm_means", "comm_mean_outer", "comm_W", "comm_iota",
                "exp_prec", "exp_logdet", "stat_weight", "stat_mean",
                "stat_outer")
_HYPER_SCALARS = ("lambda0", "iota0", "alpha", "beta", "sigma2", "eps_spawn",
                  "merge_tau", "lr_alpha", "lr_iota")


def _pack_sections(sections):
    blob = io.BytesIO()
    blob.write(MAGIC)
    blob.write(struct.pack("<II", SCHEMA_VERSION, len(sections)))
    for name, payload in sections.items():
        encoded = name.encode("utf-8")
        blob.write(struct.pack("<I", len(encoded)))
        blob.write(encoded)
        blob.write(struct.pack("<Q", len(payload)))
        blob.write(payload)
    data = blob.getvalue()
    return data + hashlib.sha256(data).digest()


def _unpack_sections(data):
    if len(data) < len(MAGIC) + 8 + 32:
        raise CheckpointError("file too short to be a checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    if body[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, count = struct.unpack_from("<II", body, len(MAGIC))
    if version > SCHEMA_VERSION:
        raise CheckpointError(f"unsupported future schema version {version}")
    offset = len(MAGIC) + 8
    sections = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (payload_len,) = struct.unpack_from("<Q", body, offset)
        offset += 8
        sections[name] = body[offset:offset + payload_len]
        offset += payload_len
    return version, sections


def _arrays_payload(state):
    arrays = {"hyper_mu0": state.hyper.mu0, "hyper_nu0": state.hyper.nu0,
              "hyper_w0": state.hyper.w0}
    for prefix, side in (("u", state.users), ("i", state.items)):
        for name in _SIDE_FIELDS:
            arrays[f"{prefix}_{name}"] = getattr(side, name)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_checkpoint(state, path, rng=None):
    """Write the full variational configuration atomically.

    ``rng`` may be a :class:`numpy.random.Generator` whose bit-generator
    state should resume with the run.
    """
    meta = {
        "schema_version": SCHEMA_VERSION,
        "community_update": state.community_update,
        "converged": bool(state.converged),
        "elbo_trace": [float(v) for v in state.elbo_trace],
        "hyper": {k: float(getattr(state.hyper, k)) for k in _HYPER_SCALARS},
        "rng": None,
    }
    if rng is not None:
        meta["rng"] = json.loads(json.dumps(rng.bit_generator.state, default=int))
    sections = {
        "meta": json.dumps(meta, sort_keys=True).encode("utf-8"),
        "arrays": _arrays_payload(state),
    }
    data = _pack_sections(sections)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _side_from_arrays(arrays, prefix):
    return SideState(**{name: np.array(arrays[f"{prefix}_{name}"])
                        for name in _SIDE_FIELDS})


def load_checkpoint_full(path):
    """Load a checkpoint; returns ``(state, rng_state_or_None)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    _, sections = _unpack_sections(data)
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
        arrays = np.load(io.BytesIO(sections["arrays"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint contents: {exc}") from exc
    hyper = Hyperparameters(mu0=arrays["hyper_mu0"], nu0=arrays["hyper_nu0"],
                            w0=arrays["hyper_w0"], **meta["hyper"])
    state = ModelState(
        users=_side_from_arrays(arrays, "u"),
        items=_side_from_arrays(arrays, "i"),
        hyper=hyper,
        elbo_trace=list(meta["elbo_trace"]),
        community_update=meta["community_update"],
        converged=meta["converged"],
    )
    return state, meta.get("rng")


def load_checkpoint(path):
    """Load a checkpoint's model state."""
    return load_checkpoint_full(path)[0]
