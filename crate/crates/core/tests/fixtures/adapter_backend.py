#!/usr/bin/env python3
"""Minimal external backend speaking the adapter protocol.

encode: per-patch channel means tiled across the embedding width.
decode: the same soft rectangle as the mock decoder.
"""
import math
import struct
import sys

STRIDE = 16
DIM = 32
SHARPNESS = 50.0


def read_tensor(path):
    with open(path, "rb") as f:
        data = f.read()
    assert data[:4] == b"PSTN", "bad magic"
    _version, dtype, rank = struct.unpack_from("<III", data, 4)
    shape = struct.unpack_from("<%dQ" % rank, data, 16)
    at = 16 + 8 * rank
    count = 1
    for s in shape:
        count *= s
    fmt = "<%d%s" % (count, "f" if dtype == 0 else "d")
    return list(shape), list(struct.unpack_from(fmt, data, at))


def write_tensor(path, shape, values):
    with open(path, "wb") as f:
        f.write(b"PSTN")
        f.write(struct.pack("<III", 1, 1, len(shape)))
        f.write(struct.pack("<%dQ" % len(shape), *shape))
        f.write(struct.pack("<%dd" % len(values), *values))


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def encode(src, dst):
    (h, w, c), px = read_tensor(src)
    side = h // STRIDE
    out = []
    for py in range(side):
        for pxi in range(side):
            means = []
            for ch in range(c):
                total = 0.0
                for y in range(py * STRIDE, (py + 1) * STRIDE):
                    for x in range(pxi * STRIDE, (pxi + 1) * STRIDE):
                        total += px[(y * w + x) * c + ch]
                means.append(total / (STRIDE * STRIDE))
            out.extend(means[k % c] for k in range(DIM))
    write_tensor(dst, [side, side, DIM], out)


def decode(feat_path, tok_path, dst):
    (side, _, _), _ = read_tensor(feat_path)
    (n, width), tok = read_tensor(tok_path)
    size = side * STRIDE
    min_side = 2.0 / size
    out = []
    for i in range(n):
        cx, cy, bw, bh = (sigmoid(tok[i * width + k]) for k in range(4))
        bw, bh = max(bw, min_side), max(bh, min_side)
        for row in range(size):
            y = (row + 0.5) / size
            dy = min(cy + 0.5 * bh - y, y - (cy - 0.5 * bh))
            for col in range(size):
                x = (col + 0.5) / size
                dx = min(cx + 0.5 * bw - x, x - (cx - 0.5 * bw))
                out.append(SHARPNESS * min(dx, dy))
    write_tensor(dst, [n, size, size], out)


def main(argv):
    if argv[1] == "info":
        print("name=fixture")
        print("encoder_stride=%d" % STRIDE)
        print("embed_dim=%d" % DIM)
    elif argv[1] == "encode":
        encode(argv[2], argv[3])
    elif argv[1] == "decode":
        decode(argv[2], argv[3], argv[4])
    else:
        sys.stderr.write("unknown verb %s\n" % argv[1])
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
