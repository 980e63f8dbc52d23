"""Random but well-formed snapshots for round-trip tests."""

import numpy as np

from iotrace.collector import FD_DTYPE, N_COUNTERS, SEG_DTYPE, TIME_FIELDS, Snapshot

_NAMES = ["data", "ckpt", "train", "shard", "réseau", "数据", "sp ace", "q\"uote", "back\\slash"]


def random_snapshot(seed: int) -> Snapshot:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 12))
    ids = rng.choice(np.iinfo(np.int64).max, size=n, replace=False).astype(np.uint64)
    ids[: n // 2] += np.uint64(1 << 63)        # exercise the top bit
    paths = []
    for i in range(n):
        parts = [str(rng.choice(_NAMES)) for _ in range(int(rng.integers(1, 4)))]
        tail = f"f{i}"
        if rng.random() < 0.2:
            tail += "\udcff"                   # undecodable byte, surrogate-escaped
        paths.append("/" + "/".join(parts + [tail]))
    counters = rng.integers(0, 1 << 62, size=(n, N_COUNTERS), dtype=np.int64)
    times = rng.random((n, len(TIME_FIELDS))) * 1e6
    truncated = rng.random(n) < 0.3
    segs = []
    for row in range(n):
        for seq in range(int(rng.integers(0, 6))):
            t0 = float(rng.random() * 1e4)
            segs.append((row, seq, int(rng.integers(0, 2)), int(rng.integers(0, 1 << 40)),
                         int(rng.integers(0, 1 << 30)), t0, t0 + float(rng.random())))
    fds = []
    used = set()
    for row in range(n):
        if rng.random() < 0.4:
            fd, fam = int(rng.integers(3, 1000)), int(rng.integers(0, 2))
            if (fd, fam) not in used:
                used.add((fd, fam))
                fds.append((fd, fam, row, int(rng.integers(0, 1 << 40))))
    return Snapshot.build(float(rng.random() * 2e9), float(rng.random() * 1e5), ids, paths,
                          counters, times, truncated, np.array(segs, dtype=SEG_DTYPE),
                          np.array(fds, dtype=FD_DTYPE), dxt_enabled=bool(rng.random() < 0.8),
                          dxt_capacity=int(rng.integers(1, 5000)))
