"""Regenerate the tiny checkpoint, embedding file and golden SID table under tests/data.

Run from the repository root:  python scripts/make_golden_fixtures.py
Only rerun this when a deliberate change alters training or inference output.
"""

from pathlib import Path

from dasid.cli import run

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    work = DATA / "tiny_world"
    steps = [
        ["gen-data", "--config", str(DATA / "tiny_synth.json"), "--out", str(work)],
        ["train", "--config", str(DATA / "tiny_train.json"), "--data", str(work), "--out", str(DATA / "tiny.ckpt")],
    ]
    for argv in steps:
        if run(argv) != 0:
            raise SystemExit(f"failed: {' '.join(argv)}")
    for name in ("users.dase", "users.dase.ids"):
        (DATA / f"tiny_{name}").write_bytes((work / name).read_bytes())
    if run(["infer-sid", "--ckpt", str(DATA / "tiny.ckpt"), "--side", "user", "--in", str(DATA / "tiny_users.dase"),
            "--out", str(DATA / "tiny_users.sid.tsv")]) != 0:
        raise SystemExit("infer-sid failed")
    # keep only the files the tests read
    for path in sorted(work.iterdir()):
        path.unlink()
    work.rmdir()
    for extra in ("tiny.ckpt.trace.jsonl", "tiny.ckpt.manifest.json"):
        (DATA / extra).unlink(missing_ok=True)


if __name__ == "__main__":
    main()
