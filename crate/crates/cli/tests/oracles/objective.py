"""Recomputes the SSL objective of a LeNet checkpoint from its raw bytes.

E = 0.25 + 5e-4 * 0.5 * sum(W^2)
      + 0.003 * sum_filters ||W[n]|| + 0.007 * sum_channels ||W[:, c]||
      + 0.002 * sum_fibers ||W[:, c, m, k]||   (conv1 and conv2)
"""
import sys

import numpy as np
import toml

raw = open(sys.argv[1], "rb").read()
nl = raw.index(b"\n")
magic, version, size = raw[:nl].decode().split()
header = toml.loads(raw[nl + 1 : nl + 1 + int(size)].decode())
payload = np.frombuffer(raw[nl + 1 + int(size) :], dtype="<f8")

blobs = {(b["layer"], b["part"]): payload[b["offset"] : b["offset"] + b["len"]] for b in header["blobs"]}
total = 0.25
sq = 0.0
for layer in header["layers"]:
    if layer["kind"] not in ("conv", "fc"):
        continue
    w = blobs[(layer["name"], "weights")]
    sq += float(np.sum(w * w))
    if layer["kind"] == "conv":
        w = w.reshape(layer["dims"])
        n = w.shape[0]
        total += 0.003 * np.linalg.norm(w.reshape(n, -1), axis=1).sum()
        total += 0.007 * np.linalg.norm(w.transpose(1, 0, 2, 3).reshape(w.shape[1], -1), axis=1).sum()
        total += 0.002 * np.linalg.norm(w.reshape(n, -1), axis=0).sum()
total += 5e-4 * 0.5 * sq
print(repr(float(total)))
