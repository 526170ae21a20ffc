"""Binary ensemble container and CSV/JSON emitters.

Layout (all integers little-endian)::

    8 bytes   magic b"DCSQZEN1"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header (sorted keys)
    payload   float32 LE arrays: for each record, one array per channel in
              header["channels"] order, each header["record_length"] long;
              then one dark trace per entry of header["dark_channels"], each
              header["dark_length"] long.

A sidecar ``<name>.index.json`` repeats the header and gives byte offsets.
See docs/format.md.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError
from .synth import AcqConfig, Calibration, CombConfig, Ensemble, IgmRecord, ensemble_truth

MAGIC = b"DCSQZEN1"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not JSON serialisable: {type(x)!r}")


def config_hash(*parts) -> str:
    blob = canonical_json([p if isinstance(p, dict) else asdict(p) for p in parts])
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _header(ens: Ensemble) -> dict:
    records = []
    for rec in ens.records:
        records.append(
            {"index": rec.record_index, "ceo_phase": rec.ceo_phase, "true_shift": rec.true_shift}
        )
    return {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "comb": asdict(ens.comb),
        "acq": asdict(ens.acq),
        "seed": ens.acq.seed,
        "calibration": ens.calibration.to_dict(),
        "config_hash": config_hash(ens.comb, ens.acq),
        "channels": list(ens.acq.channels),
        "record_length": ens.acq.record_length,
        "n_records": len(ens.records),
        "records": records,
        "dark_channels": sorted(ens.dark),
        "dark_length": ens.acq.dark_length,
    }


def _channel_arrays(ens: Ensemble, i: int):
    rec = ens.records[i]
    if ens.partners is None:
        return [rec.igm_samples, rec.ngm_samples]
    other = ens.partners[i]
    return [rec.igm_samples, rec.ngm_samples, other.igm_samples, other.ngm_samples]


def write_container(ens: Ensemble, path) -> Path:
    path = Path(path)
    header = _header(ens)
    hbytes = canonical_json(header).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    payload_start = buf.tell()
    for i in range(len(ens.records)):
        for arr in _channel_arrays(ens, i):
            buf.write(np.asarray(arr, dtype="<f4").tobytes())
    for name in header["dark_channels"]:
        buf.write(np.asarray(ens.dark[name], dtype="<f4").tobytes())
    path.write_bytes(buf.getvalue())

    stride = 4 * header["record_length"]
    n_ch = len(header["channels"])
    index = dict(header)
    index["payload_offset"] = payload_start
    index["record_offsets"] = [payload_start + i * n_ch * stride for i in range(len(ens.records))]
    index["dark_offset"] = payload_start + len(ens.records) * n_ch * stride
    index_path = path.with_name(path.name + ".index.json")
    index_path.write_text(canonical_json(index) + "\n")
    return path


def read_container(path) -> Ensemble:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not an ensemble container")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode())
    except ValueError as exc:
        raise DataError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    comb = CombConfig(**header["comb"])
    acq = AcqConfig(**header["acq"])
    cal = Calibration(**header["calibration"])
    L = header["record_length"]
    channels = header["channels"]
    n = header["n_records"]
    expected = 12 + hlen + 4 * (n * len(channels) * L + len(header["dark_channels"]) * header["dark_length"])
    if len(raw) != expected:
        raise DataError(f"{path}: payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=12 + hlen)
    block = data[: n * len(channels) * L].reshape(n, len(channels), L)
    records, partners = [], []
    for i, meta in enumerate(header["records"]):
        args = (meta["ceo_phase"], meta["index"], meta["true_shift"])
        records.append(IgmRecord(block[i, 0].copy(), block[i, 1].copy(), *args))
        if len(channels) == 4:
            partners.append(IgmRecord(block[i, 2].copy(), block[i, 3].copy(), *args))
    dark_data = data[n * len(channels) * L :].reshape(-1, header["dark_length"])
    dark = {name: dark_data[j].copy() for j, name in enumerate(header["dark_channels"])}
    return Ensemble(
        comb=comb,
        acq=acq,
        calibration=cal,
        records=records,
        truth=ensemble_truth(comb, acq, cal),
        dark=dark,
        partners=partners or None,
    )


def metadata_block(meta: dict) -> str:
    """JSON metadata as '#'-prefixed lines for the top of a CSV file."""
    return "".join(f"# {line}\n" for line in json.dumps(meta, sort_keys=True, indent=1,
                                                        default=_jsonable).splitlines())


def write_csv(path, columns: dict, meta: dict) -> Path:
    path = Path(path)
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    out = io.StringIO()
    out.write(metadata_block(meta))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(names)
    for row in zip(*cols):
        w.writerow([repr(float(v)) for v in row])
    path.write_text(out.getvalue())
    return path


def write_matrix_csv(path, matrix: np.ndarray, meta: dict) -> Path:
    path = Path(path)
    out = io.StringIO()
    out.write(metadata_block(meta))
    w = csv.writer(out, lineterminator="\n")
    for row in np.asarray(matrix):
        w.writerow([repr(v.item()) for v in row])
    path.write_text(out.getvalue())
    return path


def read_csv(path) -> tuple[dict, dict]:
    """Inverse of :func:`write_csv`: returns (columns, metadata)."""
    text = Path(path).read_text()
    meta_lines, body = [], []
    for line in text.splitlines():
        (meta_lines if line.startswith("#") else body).append(line)
    try:
        meta = json.loads("\n".join(m[2:] for m in meta_lines)) if meta_lines else {}
    except ValueError as exc:
        raise DataError(f"{path}: bad metadata block") from exc
    rows = list(csv.reader(body))
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    names = rows[0]
    try:
        values = np.array([[float(x) for x in r] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value") from exc
    if values.ndim != 2 or values.shape[1] != len(names):
        raise DataError(f"{path}: ragged rows")
    return {k: values[:, j] for j, k in enumerate(names)}, meta


def write_truth_csv(path, ens: Ensemble, meta: dict) -> Path:
    t = ens.truth
    return write_csv(
        path,
        {
            "t": t.t,
            "re_gamma": t.gamma_of_t.real,
            "im_gamma": t.gamma_of_t.imag,
            "snl_var": t.snl_of_t,
            "model_var": t.model_variance_of_t,
        },
        meta,
    )
