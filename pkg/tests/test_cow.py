"""Copy-on-write workspace: layer algebra against a direct-apply oracle."""

import errno
import hashlib
import os
import random
import shutil
import stat as stat_m

import pytest

from splitbox.cow import (CommitConflict, CowError, EscapeError, LayerSet,
                          SeccompCowBackend, BranchFsBackend)
from splitbox.policy import EffectAction


@pytest.fixture()
def ws(tmp_path):
    lower = tmp_path / "lower"
    lower.mkdir()
    (lower / "sub").mkdir()
    (lower / "a.txt").write_bytes(b"alpha")
    (lower / "sub" / "b.txt").write_bytes(b"beta")
    return LayerSet(str(lower), str(tmp_path / "store"))


def tree_state(root):
    out = {}
    for r, dirs, files in os.walk(root):
        rel_r = os.path.relpath(r, root)
        rel_r = "" if rel_r == "." else rel_r
        for d in dirs:
            rel = f"{rel_r}/{d}" if rel_r else d
            p = os.path.join(r, d)
            out[rel] = ("link", os.readlink(p)) if os.path.islink(p) else ("dir",)
        for f in files:
            rel = f"{rel_r}/{f}" if rel_r else f
            p = os.path.join(r, f)
            if os.path.islink(p):
                out[rel] = ("link", os.readlink(p))
            else:
                with open(p, "rb") as fh:
                    out[rel] = ("file", fh.read())
    return out


def merged_state(layers):
    out = {}

    def walk(rel):
        for name in layers.merge_dirents(rel):
            child = f"{rel}/{name}" if rel else name
            entry = layers.resolve_read(child, follow_final=False)
            st = os.lstat(entry.real_path)
            if stat_m.S_ISLNK(st.st_mode):
                out[child] = ("link", os.readlink(entry.real_path))
            elif stat_m.S_ISDIR(st.st_mode):
                out[child] = ("dir",)
                walk(child)
            else:
                with open(entry.real_path, "rb") as fh:
                    out[child] = ("file", fh.read())

    walk("")
    return out


def tree_hash(root):
    digest = hashlib.sha256()
    for rel, desc in sorted(tree_state(root).items()):
        digest.update(repr((rel, desc)).encode())
    return digest.hexdigest()


class TestResolve:
    def test_lower_only_file(self, ws):
        entry = ws.resolve_read("a.txt")
        assert entry.layer == "lower"
        assert ws.read_file("a.txt") == b"alpha"

    def test_copied_up_wins(self, ws):
        ws.write_file("a.txt", b"ALPHA")
        entry = ws.resolve_read("a.txt")
        assert entry.layer == "upper"
        assert ws.read_file("a.txt") == b"ALPHA"

    def test_whiteout_hides_lower(self, ws):
        ws.unlink("a.txt")
        assert ws.resolve_read("a.txt") is None

    def test_symlink_escape_denied(self, ws, tmp_path):
        outside = tmp_path / "outside"
        outside.write_text("nope")
        os.symlink(str(outside), os.path.join(ws.lower_root, "esc"))
        with pytest.raises(EscapeError):
            ws.resolve_read("esc")

    def test_relative_symlink_inside_ok(self, ws):
        os.symlink("a.txt", os.path.join(ws.lower_root, "alias"))
        entry = ws.resolve_read("alias")
        assert entry is not None
        assert ws.read_file("alias") == b"alpha"

    def test_dotdot_escape_denied(self, ws):
        with pytest.raises(EscapeError):
            ws.canonical_rel("../../etc/passwd")


class TestCapture:
    def test_append_copies_up_and_lower_untouched(self, ws):
        ws.write_file("a.txt", b"+more", append=True)
        assert ws.read_file("a.txt") == b"alpha+more"
        with open(os.path.join(ws.lower_root, "a.txt"), "rb") as f:
            assert f.read() == b"alpha"

    def test_unlink_then_open_not_found(self, ws):
        ws.unlink("sub/b.txt")
        assert ws.resolve_read("sub/b.txt") is None
        with pytest.raises(CowError) as exc:
            ws.read_file("sub/b.txt")
        assert exc.value.errno == errno.ENOENT

    def test_quota_exhausted_enospc(self, ws):
        ws.quota_bytes = 4
        with pytest.raises(CowError) as exc:
            ws.write_file("big.bin", b"too big for quota")
        assert exc.value.errno == errno.ENOSPC

    def test_copy_up_charges_quota(self, ws):
        ws.quota_bytes = 3  # a.txt is 5 bytes; copy-up must exceed
        with pytest.raises(CowError) as exc:
            ws.write_file("a.txt", b"x", append=True)
        assert exc.value.errno == errno.ENOSPC

    def test_exclusive_create_on_existing(self, ws):
        with pytest.raises(CowError) as exc:
            ws.prepare_open_write("a.txt", create=True, excl=True,
                                  truncate=False)
        assert exc.value.errno == errno.EEXIST

    def test_mkdir_over_whiteout_goes_opaque(self, ws):
        ws.unlink("sub/b.txt")
        ws.rmdir("sub")
        ws.mkdir("sub")
        assert ws.merge_dirents("sub") == []
        assert "sub" in ws.opaque_dirs

    def test_rename_decomposition(self, ws):
        ws.rename("a.txt", "sub/a2.txt")
        assert ws.resolve_read("a.txt") is None
        assert ws.read_file("sub/a2.txt") == b"alpha"
        assert "a.txt" in ws.whiteouts


class TestMergeDirents:
    def test_union_upper_wins_whiteouts_excluded(self, ws):
        # lower {a,b}, upper {b', c}, whiteout {a}
        lower = ws.lower_root
        os.mkdir(os.path.join(lower, "d"))
        with open(os.path.join(lower, "d/a"), "w") as f:
            f.write("a")
        with open(os.path.join(lower, "d/b"), "w") as f:
            f.write("b")
        ws.write_file("d/b", b"b-upper")
        ws.write_file("d/c", b"c")
        ws.unlink("d/a")
        assert ws.merge_dirents("d") == ["b", "c"]
        assert ws.read_file("d/b") == b"b-upper"

    def test_identity_merge(self, ws):
        assert ws.merge_dirents("") == sorted(os.listdir(ws.lower_root))

    def test_opaque_replacement(self, ws):
        # opaque upper dir {x} over lower {b.txt}
        ws.unlink("sub/b.txt")
        ws.rmdir("sub")
        ws.mkdir("sub")
        ws.write_file("sub/x", b"x")
        assert ws.merge_dirents("sub") == ["x"]

    def test_enoent(self, ws):
        with pytest.raises(CowError) as exc:
            ws.merge_dirents("missing")
        assert exc.value.errno == errno.ENOENT


class TestFinalize:
    def test_commit_noop_when_no_writes(self, ws):
        before = tree_hash(ws.lower_root)
        summary = ws.commit()
        assert summary.created == summary.modified == summary.deleted == []
        assert tree_hash(ws.lower_root) == before

    def test_write_and_delete_summary_then_commit(self, ws, tmp_path):
        oracle = tmp_path / "oracle"
        shutil.copytree(ws.lower_root, oracle)
        ws.write_file("f", b"new")
        ws.unlink("sub/b.txt")
        summary = ws.diff()
        assert summary.created == ["f"]
        assert summary.deleted == ["sub/b.txt"]
        ws.commit()
        (oracle / "f").write_bytes(b"new")
        (oracle / "sub" / "b.txt").unlink()
        assert tree_state(ws.lower_root) == tree_state(oracle)

    def test_abort_restores_everything(self, ws):
        before = tree_hash(ws.lower_root)
        ws.write_file("a.txt", b"clobber")
        ws.unlink("sub/b.txt")
        ws.abort()
        assert tree_hash(ws.lower_root) == before
        assert ws.resolve_read("a.txt").layer == "lower"

    def test_abort_idempotent(self, ws):
        ws.write_file("f", b"x")
        ws.abort()
        state_once = tree_state(ws.lower_root)
        ws.abort()
        assert tree_state(ws.lower_root) == state_once

    def test_dry_run_does_not_mutate(self, ws, tmp_path):
        backend = SeccompCowBackend(ws.lower_root, str(tmp_path / "store2"))
        backend.layers().write_file("f", b"x")
        before = tree_hash(ws.lower_root)
        summary = backend.finalize(EffectAction.COMMIT, dry_run=True)
        assert summary.created == ["f"]
        assert tree_hash(ws.lower_root) == before

    def test_commit_conflict_refused(self, ws):
        ws.write_file("a.txt", b"mine")
        # lower changes behind the workspace's back
        with open(os.path.join(ws.lower_root, "a.txt"), "w") as f:
            f.write("theirs-was-here-first")
        with pytest.raises(CommitConflict) as exc:
            ws.commit()
        assert "a.txt" in exc.value.conflicts

    def test_keep_leaves_upper(self, ws, tmp_path):
        backend = SeccompCowBackend(ws.lower_root, str(tmp_path / "store3"))
        backend.layers().write_file("kept", b"data")
        backend.finalize(EffectAction.KEEP)
        assert (tmp_path / "store3" / "upper" / "kept").read_bytes() == b"data"

    def test_diff_soundness(self, ws):
        ws.write_file("n1", b"1")
        ws.write_file("sub/n2", b"2")
        ws.unlink("a.txt")
        summary = ws.diff()
        listed = set(summary.created) | set(summary.modified) | set(summary.deleted)
        assert set(summary.created).isdisjoint(summary.modified)
        assert set(summary.created).isdisjoint(summary.deleted)
        assert set(summary.modified).isdisjoint(summary.deleted)
        for rel, _ in ws._upper_paths():
            st = os.lstat(ws._upper(rel))
            if not stat_m.S_ISDIR(st.st_mode) or not os.path.lexists(
                    ws._lower(rel)):
                assert rel in listed
        for rel in ws.whiteouts:
            assert rel in summary.deleted


class TestManifestPersistence:
    def test_reload_round_trip(self, tmp_path):
        lower = tmp_path / "lower"
        lower.mkdir()
        (lower / "f").write_bytes(b"f")
        store = str(tmp_path / "store")
        first = LayerSet(str(lower), store)
        first.write_file("g", b"g")
        first.unlink("f")
        second = LayerSet(str(lower), store)
        assert second.whiteouts == {"f"}
        assert second.resolve_read("f") is None
        assert second.read_file("g") == b"g"


def test_branchfs_backend_is_a_stub():
    with pytest.raises(NotImplementedError):
        BranchFsBackend("/x", "/y")


class Oracle:
    def __init__(self, root):
        self.root = root

    def p(self, rel):
        return os.path.join(self.root, rel)

    def write(self, rel, data, append):
        with open(self.p(rel), "ab" if append else "wb") as f:
            f.write(data)

    def unlink(self, rel):
        os.unlink(self.p(rel))

    def mkdir(self, rel):
        os.mkdir(self.p(rel))

    def rmdir(self, rel):
        os.rmdir(self.p(rel))

    def rename(self, src, dst):
        os.replace(self.p(src), self.p(dst))

    def listdir(self, rel):
        return sorted(os.listdir(self.p(rel)))


def run_oracle_sequence(seed, base_dir, nops=10, check_every_step=True):
    """One randomized op sequence, merged view compared to the oracle after
    each step, then a COMMIT compared byte-for-byte."""
    rng = random.Random(seed)
    base = os.path.join(base_dir, f"seq{seed}")
    lower = os.path.join(base, "lower")
    os.makedirs(lower)
    dirs = [""]
    for i in range(rng.randint(1, 3)):
        d = f"d{i}"
        os.makedirs(os.path.join(lower, d))
        dirs.append(d)
        if rng.random() < 0.5:
            dd = f"{d}/dd{i}"
            os.makedirs(os.path.join(lower, dd))
            dirs.append(dd)
    for i in range(rng.randint(2, 6)):
        d = rng.choice(dirs)
        rel = f"{d}/f{i}" if d else f"f{i}"
        with open(os.path.join(lower, rel), "wb") as f:
            f.write(bytes([65 + i]) * rng.randint(1, 64))

    oracle_root = os.path.join(base, "oracle")
    shutil.copytree(lower, oracle_root, symlinks=True)
    lower_before = tree_state(lower)

    layers = LayerSet(lower, os.path.join(base, "store"))
    oracle = Oracle(oracle_root)

    for step in range(nops):
        state = tree_state(oracle_root)
        all_dirs = [""] + [p for p, v in state.items() if v[0] == "dir"]
        files = [p for p, v in state.items() if v[0] == "file"]
        op = rng.choice(["create", "write", "unlink", "mkdir", "rmdir",
                         "rename", "readdir"])
        if op == "create":
            d = rng.choice(all_dirs)
            rel = f"{d}/n{step}" if d else f"n{step}"
            data = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 32)))
            layers.write_file(rel, data)
            oracle.write(rel, data, False)
        elif op == "write":
            if not files:
                continue
            rel = rng.choice(files)
            data = bytes(rng.getrandbits(8) for _ in range(rng.randint(1, 32)))
            append = rng.random() < 0.5
            layers.write_file(rel, data, append=append)
            oracle.write(rel, data, append)
        elif op == "unlink":
            if not files:
                continue
            rel = rng.choice(files)
            layers.unlink(rel)
            oracle.unlink(rel)
        elif op == "mkdir":
            d = rng.choice(all_dirs)
            rel = f"{d}/m{step}" if d else f"m{step}"
            layers.mkdir(rel)
            oracle.mkdir(rel)
        elif op == "rmdir":
            empty = [p for p, v in state.items() if v[0] == "dir"
                     and not any(q.startswith(p + "/") for q in state)]
            if not empty:
                continue
            rel = rng.choice(empty)
            layers.rmdir(rel)
            oracle.rmdir(rel)
        elif op == "rename":
            cands = sorted(state)
            if not cands:
                continue
            src = rng.choice(cands)
            dst_dirs = [x for x in all_dirs
                        if x != src and not x.startswith(src + "/")]
            d = rng.choice(dst_dirs)
            dst = f"{d}/r{step}" if d else f"r{step}"
            if dst == src or dst.startswith(src + "/"):
                continue
            layers.rename(src, dst)
            oracle.rename(src, dst)
        elif op == "readdir":
            d = rng.choice(all_dirs)
            assert layers.merge_dirents(d) == oracle.listdir(d)
        if check_every_step:
            assert merged_state(layers) == tree_state(oracle_root), \
                f"seed {seed} step {step} op {op}"

    assert tree_state(lower) == lower_before, f"seed {seed}: lower mutated"
    layers.commit()
    assert tree_state(lower) == tree_state(oracle_root), \
        f"seed {seed}: commit mismatch"
    shutil.rmtree(base)


def test_randomized_oracle_equivalence(tmp_path):
    for seed in range(60):
        run_oracle_sequence(seed, str(tmp_path))


def test_abort_preserves_lower_hash(tmp_path):
    for seed in (1001, 1002, 1003):
        rng = random.Random(seed)
        lower = tmp_path / f"ab{seed}" / "lower"
        lower.mkdir(parents=True)
        for i in range(4):
            (lower / f"f{i}").write_bytes(os.urandom(rng.randint(1, 128)))
        before = tree_hash(str(lower))
        layers = LayerSet(str(lower), str(tmp_path / f"ab{seed}" / "store"))
        layers.write_file("f0", b"x")
        layers.unlink("f1")
        layers.mkdir("d")
        layers.rename("f2", "d/f2")
        layers.abort()
        assert tree_hash(str(lower)) == before
        layers.abort()
        assert tree_hash(str(lower)) == before
