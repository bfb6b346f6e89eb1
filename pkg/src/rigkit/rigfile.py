"""Container format for complete rigs.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header, then one contiguous binary payload. The header is the human-readable
part (skeleton, parameter transform, limits, basis names, LOD table); all
large tensors live in the payload as little-endian float32, row-major,
addressed by (name, offset, shape) entries in the header. Integer tensors
(triangle and skin indices) ride along as float32, which is exact below 2^24.

Angles are degrees in the header, radians everywhere in memory.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .body_model import BlendshapeBasis, MeshTopology, RigModel, SkinWeights
from .core_math import EulerXYZ
from .correctives import CorrectiveModel
from .errors import DataError
from .skeleton import Joint, ParameterTransform, Skeleton

MAGIC = b"RIGKIT\x00\x31"
VERSION = 1

_KNOWN_KEYS = {
    "format",
    "version",
    "skeleton",
    "parameter_transform",
    "mesh",
    "identity_basis",
    "expression_basis",
    "skin",
    "correctives",
    "skeleton_basis",
    "identity_scales",
    "lods",
    "metadata",
    "payload",
}


def _limit_to_json(v: float) -> float | None:
    return None if np.isinf(v) else float(v)


def _limit_from_json(v, sign: float) -> float:
    return sign * np.inf if v is None else float(v)


def _skeleton_header(skel: Skeleton) -> dict:
    joints = []
    for j in skel.joints:
        joints.append(
            {
                "name": j.name,
                "parent": None if j.parent is None else skel.joints[j.parent].name,
                "offset": [float(v) for v in j.offset],
                "prerotation_degrees": [
                    float(v) for v in np.degrees(j.prerotation.as_array())
                ],
            }
        )
    return {"joints": joints}


def _skeleton_from_header(doc: dict) -> Skeleton:
    index = {}
    joints = []
    for i, jd in enumerate(doc["joints"]):
        parent = jd["parent"]
        if parent is not None and parent not in index:
            raise DataError(
                f"rig file: joint {jd['name']!r} references unknown parent {parent!r}"
            )
        rx, ry, rz = np.radians(np.asarray(jd["prerotation_degrees"], dtype=np.float64))
        joints.append(
            Joint(
                name=jd["name"],
                parent=None if parent is None else index[parent],
                offset=np.asarray(jd["offset"], dtype=np.float64),
                prerotation=EulerXYZ(rx, ry, rz),
            )
        )
        index[jd["name"]] = i
    return Skeleton(joints)


def _transform_header(pt: ParameterTransform) -> dict:
    return {
        "n_joint_params": int(pt.n_joint_params),
        "names": list(pt.names) if pt.names else None,
        "triplets": [
            [int(r), int(c), float(w)]
            for r, c, w in zip(pt.rows, pt.cols, pt.weights)
        ],
        "pose_params": [int(c) for c in pt.pose_cols],
        "skel_params": [int(c) for c in pt.skel_cols],
        "lower": [_limit_to_json(v) for v in pt.lower],
        "upper": [_limit_to_json(v) for v in pt.upper],
    }


def _transform_from_header(doc: dict) -> ParameterTransform:
    triplets = doc["triplets"]
    return ParameterTransform(
        n_joint_params=doc["n_joint_params"],
        rows=np.array([t[0] for t in triplets], dtype=np.int64),
        cols=np.array([t[1] for t in triplets], dtype=np.int64),
        weights=np.array([t[2] for t in triplets], dtype=np.float64),
        pose_cols=np.asarray(doc["pose_params"], dtype=np.int64),
        skel_cols=np.asarray(doc["skel_params"], dtype=np.int64),
        lower=np.array([_limit_from_json(v, -1.0) for v in doc["lower"]]),
        upper=np.array([_limit_from_json(v, 1.0) for v in doc["upper"]]),
        names=doc["names"],
    )


def _collect_sections(model: RigModel) -> dict[str, np.ndarray]:
    sections = {
        "template": model.template,
        "triangles": model.topology.triangles,
        "identity_basis": model.identity_basis.deltas,
        "expression_basis": model.expression_basis.deltas,
        "skin_indices": model.skin_weights.indices,
        "skin_weights": model.skin_weights.weights,
    }
    cm = model.correctives
    if cm is not None:
        for k, w in enumerate(cm.layers):
            sections[f"correctives.layer{k}"] = w
        sections["correctives.decoders"] = cm.decoders
        sections["correctives.masks"] = cm.masks
        sections["correctives.support"] = cm.support
    if model.skeleton_basis is not None:
        sections["skeleton_basis"] = model.skeleton_basis
    if model.identity_scales is not None:
        sections["identity_scales"] = model.identity_scales
    return sections


def save_rig(path: str | Path, model: RigModel) -> None:
    sections = _collect_sections(model)
    payload_index = []
    blobs = []
    offset = 0
    for name, arr in sections.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        payload_index.append(
            {"name": name, "offset": offset, "shape": list(arr.shape)}
        )
        blobs.append(blob)
        offset += len(blob)

    cm = model.correctives
    meta = dict(model.metadata)
    extra = meta.pop("header_extra", {})
    header = {
        "format": "rigkit-rig",
        "version": VERSION,
        "skeleton": _skeleton_header(model.skeleton),
        "parameter_transform": _transform_header(model.param_transform),
        "mesh": {
            "num_vertices": int(model.topology.num_vertices),
            "num_triangles": int(model.topology.num_triangles),
        },
        "identity_basis": {"names": list(model.identity_basis.names)},
        "expression_basis": {"names": list(model.expression_basis.names)},
        "skin": {"max_influences": int(model.skin_weights.indices.shape[1])},
        "correctives": None
        if cm is None
        else {
            "joints": [int(j) for j in cm.joints],
            "neighborhoods": [[int(v) for v in row] for row in cm.neighborhoods],
            "leak": float(cm.leak),
        },
        "lods": meta.pop(
            "lods",
            [{"name": "lod0", "vertices": int(model.topology.num_vertices)}],
        ),
        "metadata": meta,
        "payload": payload_index,
    }
    for key, value in extra.items():
        if key not in _KNOWN_KEYS:
            header[key] = value

    header_bytes = json.dumps(header, indent=1, allow_nan=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def _read_section(payload: bytes, entry: dict, dtype=np.float64) -> np.ndarray:
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = entry["offset"]
    end = start + 4 * count
    if end > len(payload):
        raise DataError(
            f"rig file: payload section {entry['name']!r} is truncated "
            f"(needs bytes [{start}, {end}), payload has {len(payload)})"
        )
    flat = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
    return flat.reshape(shape).astype(dtype)


def load_rig(path: str | Path) -> RigModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"rig file: {path} is not a rig file (bad magic)")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    header_start = len(MAGIC) + 8
    if header_start + header_len > len(raw):
        raise DataError(f"rig file: {path} header is truncated")
    header = json.loads(raw[header_start : header_start + header_len])
    payload = raw[header_start + header_len :]

    if header.get("format") != "rigkit-rig" or header.get("version") != VERSION:
        raise DataError(
            f"rig file: version mismatch, got format={header.get('format')!r} "
            f"version={header.get('version')!r}, expected rigkit-rig v{VERSION}"
        )
    index = {e["name"]: e for e in header["payload"]}

    def read(name, dtype=np.float64):
        if name not in index:
            raise DataError(f"rig file: missing payload section {name!r}")
        return _read_section(payload, index[name], dtype)

    topo = MeshTopology(
        num_vertices=header["mesh"]["num_vertices"],
        triangles=read("triangles", np.int64),
    )
    skeleton = _skeleton_from_header(header["skeleton"])
    pt = _transform_from_header(header["parameter_transform"])

    cm = None
    cm_doc = header["correctives"]
    if cm_doc is not None:
        layers = []
        k = 0
        while f"correctives.layer{k}" in index:
            layers.append(read(f"correctives.layer{k}"))
            k += 1
        cm = CorrectiveModel(
            joints=np.asarray(cm_doc["joints"], dtype=np.int64),
            neighborhoods=np.asarray(cm_doc["neighborhoods"], dtype=np.int64),
            layers=layers,
            decoders=read("correctives.decoders"),
            masks=read("correctives.masks"),
            support=read("correctives.support").astype(bool),
            leak=cm_doc["leak"],
        )

    metadata = dict(header.get("metadata", {}))
    lods = header.get("lods")
    if lods:
        metadata["lods"] = lods
    extra = {k: v for k, v in header.items() if k not in _KNOWN_KEYS}
    if extra:
        metadata["header_extra"] = extra

    model = RigModel(
        topology=topo,
        template=read("template"),
        identity_basis=BlendshapeBasis(
            read("identity_basis"), header["identity_basis"]["names"]
        ),
        expression_basis=BlendshapeBasis(
            read("expression_basis"), header["expression_basis"]["names"]
        ),
        skin_weights=SkinWeights(
            indices=read("skin_indices", np.int64), weights=read("skin_weights")
        ),
        skeleton=skeleton,
        param_transform=pt,
        correctives=cm,
        skeleton_basis=None if "skeleton_basis" not in index else read("skeleton_basis"),
        identity_scales=None
        if "identity_scales" not in index
        else read("identity_scales"),
        metadata=metadata,
    )
    if cm is not None:
        cm.validate(model.num_vertices, skeleton, pt)
    return model
