"""Smoke test for the mpt_py extension.

Build first:
    cargo build --release -p mpt-py --features extension-module
    cargo build --release -p mpt-cli
then run `python3 python/smoke_test.py`.
"""

import importlib.util
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]
RELEASE = ROOT / "target" / "release"


def load_module(tmp):
    for name in ("libmpt_py.so", "libmpt_py.dylib", "mpt_py.dll"):
        lib = RELEASE / name
        if lib.exists():
            dst = tmp / ("mpt_py.pyd" if name.endswith(".dll") else "mpt_py.so")
            shutil.copy(lib, dst)
            spec = importlib.util.spec_from_file_location("mpt_py", dst)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("mpt_py not built; see the module docstring")


def close(a, b, tol=1e-4):
    return abs(a - b) <= tol


def main():
    tmp = pathlib.Path(tempfile.mkdtemp())
    m = load_module(tmp)

    assert m.param_count(8, 32, 10, "group_total") == 656
    assert m.param_count(100, 4096, 1, "adaptation") == 4196
    try:
        m.param_count(0, 32, 10, "group_total")
        raise AssertionError("expected ValueError")
    except ValueError:
        pass

    p = [[1.0, 2.0], [3.0, 4.0]]
    assert m.compose_prompt(p, [[1.0], [1.0]], [[1.0, 1.0]]) == p
    assert m.compose_target_prompt(p, [1.0, 2.0], [3.0, 4.0]) == [[3.0, 8.0], [18.0, 32.0]]

    assert close(m.micro_f1([["a", "b", "x"]], [["a", "b", "y"]]), 0.6667)
    assert close(m.rouge_l("the cat", "the cat sat"), 0.8)
    assert m.macro_accuracy(["x", "x", "x", "x"], ["x", "x", "y", "y"]) == 0.5
    metric, value, malformed = m.score("RE", ["rel1", "rel2 rel3"], ["rel1", "rel2"])
    assert metric == "micro_f1" and malformed == 1, (metric, value, malformed)

    assert m.gradcheck() < 1e-4

    mpt = RELEASE / "mpt"
    if mpt.exists():
        cfg = tmp / "tiny.cfg"
        cfg.write_text("world.pretrain_lines=200\npretrain.epochs=1\ndata.source_records=20\ndata.target_records=20\n")
        subprocess.run([mpt, "gen-data", "--config", cfg, "--out", tmp / "data"], check=True, capture_output=True)
        subprocess.run(
            [mpt, "pretrain", "--config", cfg, "--data", tmp / "data", "--out", tmp / "ck.mptc"],
            check=True,
            capture_output=True,
        )
        ck = m.Checkpoint.load(str(tmp / "ck.mptc"))
        assert ck.d_model == 32 and "<bos>" in ck.vocab
        out = ck.generate("w1 w2", max_new=5)
        assert out == ck.generate("w1 w2", max_new=5)
        assert len(out.split()) <= 5
        print(f"checkpoint {ck.content_hash:016x}: {ck.param_count} parameters")
    else:
        print("mpt binary not built; skipping checkpoint checks")

    shutil.rmtree(tmp)
    print("mpt_py smoke test passed")


if __name__ == "__main__":
    main()
