#!/usr/bin/env python3
"""Recomputes bits per weight from .bqz headers and checks the CLI report.

Usage: check_bpw.py <bqkit-cli> <scratch-dir>
"""

import json
import math
import pathlib
import shutil
import struct
import subprocess
import sys
import zlib


def bits_for(b):
    return 0 if b <= 1 else math.ceil(math.log2(b))


def read_header(path):
    data = path.read_bytes()
    if data[:4] != b"BQZ1":
        raise ValueError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<H", data, 4)
    (length,) = struct.unpack_from("<I", data, 6)
    text = data[10 : 10 + length]
    (crc,) = struct.unpack_from("<I", data, 10 + length)
    if zlib.crc32(text) != crc:
        raise ValueError(f"{path}: header checksum mismatch")
    header = json.loads(text)
    if header["version"] != version:
        raise ValueError(f"{path}: version mismatch")
    payload = data[14 + length :]
    return header, payload


def check_sections(header, payload):
    for t in header["tensors"]:
        for key in ("data", "codebook", "labels"):
            if key not in t:
                continue
            s = t[key]
            chunk = payload[s["offset"] : s["offset"] + s["length"]]
            if len(chunk) != s["length"] or zlib.crc32(chunk) != s["crc32"]:
                raise ValueError(f"{t['name']}: bad {key} section")
        if t["mode"] == "raw":
            continue
        if t.get("label_coding") == "packed":
            expect = math.ceil(t["n_blocks"] * t["bits"] / 8)
            if t["labels"]["length"] != expect:
                raise ValueError(f"{t['name']}: packed labels are {t['labels']['length']} bytes, expected {expect}")
        width = 1 if t["dtype"] == "u8" else 4
        if t["codebook"]["length"] != t["d"] * t["b"] * width:
            raise ValueError(f"{t['name']}: codebook size mismatch")
        if t["n_blocks"] * t["d"] - t["weight_count"] != t["pad"]:
            raise ValueError(f"{t['name']}: padding mismatch")


def bpw(header):
    tensors = {t["name"]: t for t in header["tensors"]}
    total_bits = total_weights = label_bits = coded_weights = 0
    for layer in header["model"]["layers"]:
        if "weight" not in layer:
            continue
        t = tensors[layer["weight"]]
        n = t["weight_count"]
        width = 8 if t["dtype"] == "u8" else 32
        if t["mode"] == "raw":
            total_bits += n * width
        else:
            lb = t["n_blocks"] * bits_for(t["b"])
            total_bits += lb + t["d"] * t["b"] * width
            label_bits += lb
            coded_weights += n
        total_weights += n
    if coded_weights == 0:
        return None
    return total_bits / total_weights, label_bits / coded_weights


def run(cli, cwd, *args):
    proc = subprocess.run([cli, *args], cwd=cwd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"{' '.join(args)} failed:\n{proc.stdout}{proc.stderr}")


def main():
    cli, work = str(pathlib.Path(sys.argv[1]).resolve()), pathlib.Path(sys.argv[2])
    shutil.rmtree(work, ignore_errors=True)
    work.mkdir(parents=True)
    small = ["--n-train", "300", "--n-test", "300"]
    run(cli, work, "train", "--arch", "two-conv", "--data", "textures", "--epochs", "2", *small, "--out", "t.nnmod")
    run(cli, work, "gwk", "--model", "t.nnmod", "--epochs", "1", "--cv", "4", "--pw", "2", "--bits", "4", *small,
        "--out", "g.bqz")
    run(cli, work, "gwk", "--model", "t.nnmod", "--epochs", "1", "--cv", "9", "--pw", "4", "--bits", "8",
        "--huffman", *small, "--out", "h.bqz")
    run(cli, work, "train", "--arch", "mlp", "--data", "blobs", "--epochs", "10", *small, "--out", "m.nnmod")
    run(cli, work, "compress", "--model", "m.nnmod", "--layers", "3", "--layer-drop", "0.05", *small, "--out", "b.bqz")
    run(cli, work, "compress", "--model", "m.nnmod", "--variant", "u8", "--layers", "3", "--layer-drop", "0.05",
        "--huffman", *small, "--out", "u.bqz")
    inputs = ["g.bqz", "h.bqz", "b.bqz", "u.bqz"]
    run(cli, work, "report", *inputs, "--out", "r.json")
    report = json.loads((work / "r.json").read_text())
    failures = 0
    for entry, name in zip(report["entries"], inputs):
        header, payload = read_header(work / name)
        check_sections(header, payload)
        got = bpw(header)
        if got is None:
            ok = entry["coded_layers"] == 0
            print(f"{name}: no coded layers, report coded_layers={entry['coded_layers']}")
        else:
            ok = math.isclose(entry["bpw"], got[0], rel_tol=1e-12) and math.isclose(
                entry["label_bpw"], got[1], rel_tol=1e-12)
            print(f"{name}: bpw {got[0]:.6f} (report {entry['bpw']:.6f}), "
                  f"label bpw {got[1]:.6f} (report {entry['label_bpw']:.6f})")
        if entry["file_bytes"] != (work / name).stat().st_size:
            ok = False
        failures += not ok
    shutil.rmtree(work, ignore_errors=True)
    print("OK" if failures == 0 else f"{failures} mismatches")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
