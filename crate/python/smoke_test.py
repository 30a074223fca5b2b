"""Smoke test for the Python bindings.

Build first:
    cargo build --release -p reptiles-py
    cp target/release/libreptiles.so python/reptiles.so
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import reptiles


def main():
    cfg = reptiles.Config(block_size_bytes=32, noc_width_bits=256)
    assert cfg.get("block_size_bytes") == 32
    cfg.validate()

    r = reptiles.run("vecadd_vector", cfg, n=2048)
    assert r["oracle_verified"], r
    print("vecadd_vector n=2048:", r["total_cycles"], "cycles")

    one = reptiles.run("ep_parallel", n=4096, ncores=1)
    four = reptiles.run("ep_parallel", n=4096, ncores=4)
    rows = reptiles.speedup(one, [four])
    print("ep_parallel speedup:", rows)
    assert rows[-1][0] == 4 and rows[-1][2] > 2.0

    sim = reptiles.Simulator("shared_reduce", n=256, ncores=4)
    assert not sim.run_until(500)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ck.json")
        sim.save_checkpoint(path)
        resumed = reptiles.Simulator.restore(path)
        assert resumed.cycle == 500
        assert resumed.run_until(10_000_000)
        assert sim.run_until(10_000_000)
        assert resumed.stats() == sim.stats()
        assert resumed.verify()

    res = reptiles.model_check(tiles=2, blocks=1, ops=2)
    assert res["violation"] is None, res
    bad = reptiles.model_check(tiles=2, blocks=1, ops=2, mutation="skip-inv-ack")
    assert bad["violation"] is not None
    print("model check:", res["states"], "states; mutation caught:", bad["violation"]["kind"])

    assert reptiles.flit_count("DataS", 64, 64) == 9
    assert reptiles.flit_count("GetS", 64, 64) == 1

    try:
        reptiles.Config(block_size_bytes=24).validate()
    except ValueError as e:
        print("rejected bad config:", e)
    else:
        raise AssertionError("block size 24 accepted")

    print("ok")


if __name__ == "__main__":
    main()
