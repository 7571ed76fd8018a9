"""The per-sensor memory pool as a stream of frames passes through it.

Run with ``python3 demos/memory_pool.py``.

New tokens land in a working memory that holds the most recent frames.
Tokens nearly identical to something already stored are dropped at the door.
When a frame falls out of working memory its tokens move to long-term
storage, which is capped: the least-attended entries are evicted first.
"""

from __future__ import annotations

import numpy as np

from stream4d.memory import PoolConfig, SensorPool, attend, select_related


def main() -> None:
    rng = np.random.default_rng(0)
    dim = 16
    pool = SensorPool(0, PoolConfig(dim=dim, capacity=24, sim_threshold=0.95))
    anchor = rng.normal(size=(4, dim))  # recurring structure the camera keeps seeing
    for t in range(12):
        keys = np.concatenate([anchor + rng.normal(scale=0.05, size=anchor.shape), rng.normal(size=(6, dim))])
        kept = pool.insert(keys, rng.normal(size=keys.shape), float(t))
        out = attend(rng.normal(size=(8, dim)), select_related([pool], float(t), 0))
        print(f"t={t:2d}: kept {kept:2d}/10 tokens | working frames "
              f"{len(pool.working_timestamps())}, working {len(pool.working):2d}, "
              f"long-term {len(pool.longterm):2d}/24 | discarded so far {pool.discarded:3d} | "
              f"output norm {np.linalg.norm(out):.2f}")

    lt = pool.longterm
    order = np.argsort(lt.attention)
    print("long-term survivors (least attended first):")
    for i in order[:5]:
        print(f"  uid {lt.uids[i]:3d}  t={lt.timestamps[i]:4.1f}  attention mass {lt.attention[i]:.3f}")

    blob = pool.to_bytes()
    again = SensorPool.from_bytes(blob)
    print(f"snapshot: {len(blob)} bytes, round trip keeps {len(again)} entries")


if __name__ == "__main__":
    main()
