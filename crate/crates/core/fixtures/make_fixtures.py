"""Regenerates the checkpoint fixtures in this directory.

known.ckpt is a valid file written by this independent encoder; its
SHA-256 is frozen in the acceptance tests. Each file in malformed/ is named
`<ErrorClass>__<case>.ckpt` after the error the reader must report.
"""
import json
import math
import pathlib
import struct

HERE = pathlib.Path(__file__).parent


def header_bytes(obj, pad=True):
    text = json.dumps(obj, separators=(",", ":"), ensure_ascii=False)
    if pad:
        text += " " * (-len(text) % 8)
    raw = text.encode()
    return struct.pack("<Q", len(raw)) + raw


def f32s(values):
    return b"".join(struct.pack("<f", v) for v in values)


def entry(shape, begin, end, dtype="F32"):
    return {"dtype": dtype, "shape": shape, "data_offsets": [begin, end]}


def valid(tensors, ident="fixture"):
    header = {"__metadata__": {"id": ident}}
    payload = b""
    for name in sorted(tensors):
        shape, values = tensors[name]
        header[name] = entry(shape, len(payload), len(payload) + 4 * len(values))
        payload += f32s(values)
    return header_bytes(header) + payload


KNOWN = {
    "a": ([2, 2], [1.0, -2.0, 0.5, 3.0]),
    "b": ([3], [0.0, -0.0, 1e-3]),
    "scalar": ([], [42.0]),
}


def main():
    (HERE / "known.ckpt").write_bytes(valid(KNOWN))

    two = f32s([1.0, 2.0])
    cases = {
        "Truncated__short_prefix": b"\x10\x00\x00",
        "Truncated__header_past_end": struct.pack("<Q", 4096) + b"{}",
        "Truncated__payload_short": header_bytes(
            {"__metadata__": {"id": "x"}, "w": entry([4], 0, 16)}
        ) + two,
        "MalformedHeader__not_json": struct.pack("<Q", 8) + b"{not js}",
        "MalformedHeader__missing_metadata": header_bytes({"w": entry([2], 0, 8)}) + two,
        "MalformedHeader__missing_id": header_bytes(
            {"__metadata__": {}, "w": entry([2], 0, 8)}
        ) + two,
        "MalformedHeader__bad_offsets": header_bytes(
            {"__metadata__": {"id": "x"}, "w": {"dtype": "F32", "shape": [2], "data_offsets": [0]}}
        ) + two,
        "MalformedHeader__unknown_field": header_bytes(
            {"__metadata__": {"id": "x"}, "w": dict(entry([2], 0, 8), extra=1)}
        ) + two,
        "MalformedHeader__not_object": header_bytes([1, 2]),
        "UnsupportedDtype__f16": header_bytes(
            {"__metadata__": {"id": "x"}, "w": entry([4], 0, 8, dtype="F16")}
        ) + two,
        "UnsupportedDtype__bf16": header_bytes(
            {"__metadata__": {"id": "x"}, "w": entry([4], 0, 8, dtype="BF16")}
        ) + two,
        "OffsetOverlap__shared_range": header_bytes(
            {"__metadata__": {"id": "x"}, "a": entry([2], 0, 8), "b": entry([2], 4, 12)}
        ) + f32s([1.0, 2.0, 3.0]),
        "OffsetGap__hole_between": header_bytes(
            {"__metadata__": {"id": "x"}, "a": entry([1], 0, 4), "b": entry([1], 8, 12)}
        ) + f32s([1.0, 2.0, 3.0]),
        "OffsetGap__trailing_bytes": header_bytes(
            {"__metadata__": {"id": "x"}, "a": entry([1], 0, 4)}
        ) + f32s([1.0, 2.0]),
        "ByteSizeMismatch__shape_vs_range": header_bytes(
            {"__metadata__": {"id": "x"}, "w": entry([3], 0, 8)}
        ) + two,
        "NonFinite__nan": header_bytes(
            {"__metadata__": {"id": "x"}, "w": entry([2], 0, 8)}
        ) + f32s([1.0, math.nan]),
        "NonFinite__inf": header_bytes(
            {"__metadata__": {"id": "x"}, "w": entry([2], 0, 8)}
        ) + f32s([math.inf, 1.0]),
    }
    out = HERE / "malformed"
    out.mkdir(exist_ok=True)
    for name, data in cases.items():
        (out / f"{name}.ckpt").write_bytes(data)


if __name__ == "__main__":
    main()
