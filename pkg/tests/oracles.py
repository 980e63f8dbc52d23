"""Reference computations written independently of the package internals.

Each oracle restates a definition in the plainest form available so tests
compare the implementation against something that shares none of its code.
"""

import math

# size classes as inclusive upper bounds in bytes; the last class is open
BUCKET_EDGES = [100, 1 << 10, 10 << 10, 100 << 10, 1 << 20, 4 << 20, 10 << 20, 100 << 20, 1 << 30]


def bucket(size):
    for i, edge in enumerate(BUCKET_EDGES):
        if size <= edge:
            return i
    return len(BUCKET_EDGES)


def classify(stream):
    """Count (sequential, consecutive) accesses in one descriptor's (offset, length) stream.

    Sequential: starts at or after where the previous access ended.
    Consecutive: starts exactly there.  The first access has no predecessor
    and counts as sequential only; a zero-length access after the first is
    both, since it cannot move backwards.
    """
    seq = consec = 0
    end = None
    for off, length in stream:
        if end is None:
            seq += 1
        elif length == 0:
            seq += 1
            consec += 1
        elif off == end:
            seq += 1
            consec += 1
        elif off > end:
            seq += 1
        end = off + length
    return seq, consec


def fnv1a64(data: bytes) -> int:
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % (1 << 64)
    return h


def stream_expectation(disk_sizes, chunk, files_read, zero_read=True):
    """Opens, reads, zero reads and bytes for reading files round-robin in order."""
    n = len(disk_sizes)
    opens = reads = zeros = nbytes = 0
    for i in range(files_read):
        size = disk_sizes[i % n]
        full = math.ceil(size / chunk) if size else 0
        opens += 1
        nbytes += size
        if zero_read:
            reads += full + 1
            zeros += 1
        else:
            reads += full
    return {"opens": opens, "reads": reads, "zero_reads": zeros, "bytes_read": nbytes}


def staging_expectation(sizes, threshold):
    small = [s for s in sizes if s <= threshold]
    total = sum(sizes)
    return len(small), sum(small), sum(small) / total, len(small) / len(sizes)
