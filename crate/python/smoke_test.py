#!/usr/bin/env python3
"""Smoke test for the obidos_py extension module.

Build the extension first:

    cargo build -p obidos-py --release

The script stages the cdylib under python/_build/ with the import name
Python expects, then drives a small end-to-end scenario: generate a corpus,
load selectively, check repeat-query behaviour, share within the instance,
and garbage-collect.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def stage_extension() -> Path:
    build_dir = ROOT / "python" / "_build"
    build_dir.mkdir(exist_ok=True)
    for profile in ("release", "debug"):
        src = ROOT / "target" / profile / "libobidos_py.so"
        if src.exists():
            dst = build_dir / "obidos_py.so"
            if not dst.exists() or src.stat().st_mtime > dst.stat().st_mtime:
                shutil.copy2(src, dst)
            return build_dir
    sys.exit("libobidos_py.so not found; run: cargo build -p obidos-py --release")


sys.path.insert(0, str(stage_extension()))

import obidos_py  # noqa: E402


def main() -> None:
    checks = 0

    def check(cond: bool, message: str) -> None:
        nonlocal checks
        if not cond:
            sys.exit(f"FAIL: {message}")
        checks += 1

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        src = tmp / "corpus"
        obidos_py.generate_source(
            str(src), "src1", seed=42, counts=[2, 2, 2, 2, 2], image_size_bytes=2048
        )
        check((src / "source.toml").exists(), "generator wrote the descriptor")

        inst = obidos_py.Instance(str(tmp / "instance"), [str(src)], instance_id="py-org")
        check(inst.source_ids() == ["src1"], "source registered")

        rs_id = inst.create_replicaset("alice", [("src1", "C1")])
        check(len(rs_id) == 32, "replicaset id is 32 hex chars")

        # First query walks the source; 8 series live under C1.
        first = inst.query(rs_id, "series")
        check(len(first["outcome"]["rows"]) == 8, "match-all series returns 8 rows")
        check(first["outcome"]["complete"], "first outcome complete")
        check(not first["report"]["served_from_repository"], "first run hits the source")

        # The repeat is answered locally with zero source traffic.
        second = inst.query(rs_id, "series")
        check(second["report"]["served_from_repository"], "repeat served from repository")
        check(second["report"]["per_source"] == {}, "repeat moved no source traffic")

        # Predicate + binary load: half the series are CT, two images each.
        ct = inst.query(
            rs_id, "series", predicates=[("modality", "=", "CT")], include_binary=True
        )
        check(len(ct["outcome"]["rows"]) == 4, "CT matches half of the series")
        check(ct["report"]["blobs_loaded"] == 8, "two blobs per matching series")
        check(ct["outcome"]["blob_refs_resolved"], "blobs resolved for matches")

        entries, full, proxies = inst.entry_counts()
        check(entries == full + proxies, "entry accounting is consistent")
        check(full > 0 and proxies > 0, "both proxies and full records present")

        # Same-instance share: a second user gets the set with no traffic.
        envelope = inst.export_envelope(rs_id, "bob", sender_uri="http://self")
        parsed = json.loads(envelope)
        check(parsed["receiver_user"] == "bob", "envelope names the receiver")
        result = inst.import_envelope(envelope)
        check(result["path_taken"] == "LocalRegistration", "same-instance share is local")

        # Refresh sees no upstream changes.
        refresh = inst.refresh(rs_id)
        check(refresh["records_promoted"] == 0, "unchanged source promotes nothing")

        # Dropping both references empties the repository.
        inst.delete_replicaset("alice", rs_id)
        inst.delete_replicaset("bob", rs_id)
        removed = inst.gc()
        check(removed > 0, "gc removed orphaned entries")
        check(inst.entry_counts() == (0, 0, 0), "repository empty after gc")

    print(f"smoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
