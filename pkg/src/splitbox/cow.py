"""Copy-on-write workspace: upper/lower layers, whiteouts, merge, effects.

Writes land in an upper directory that mirrors lower-relative paths; deletes
become manifest whiteouts (no device nodes, so no privilege); recreated
directories go opaque so shadowed lower content stays hidden. The merged
view is: upper wins, whiteout means absent, opaque cuts the lower layer.
Finalization commits per file with write-temp-then-rename, aborts by
discarding the upper layer, or keeps it for inspection.

Invariants maintained throughout: whiteouts and upper entries are disjoint
per path; every upper entry's parent chain exists in the merged view; the
lower tree is never touched before COMMIT.
"""

from __future__ import annotations

import errno
import json
import os
import posixpath
import shutil
import stat as stat_m
import tempfile
from dataclasses import dataclass, field
from typing import Iterator

MANIFEST_NAME = "manifest"
UPPER_NAME = "upper"

_SYMLINK_LOOP_LIMIT = 40


class CowError(OSError):
    """Filesystem-shaped failure; errno is surfaced to the child."""

    def __init__(self, err: int, msg: str = ""):
        super().__init__(err, msg or os.strerror(err))


class EscapeError(CowError):
    """Symlink resolution left the merged tree."""

    def __init__(self, path: str):
        super().__init__(errno.EACCES, f"path escapes the workspace: {path}")


@dataclass(frozen=True)
class Resolved:
    layer: str  # "upper" | "lower"
    real_path: str
    rel: str


@dataclass
class EffectSummary:
    created: list[str] = field(default_factory=list)
    modified: list[str] = field(default_factory=list)
    deleted: list[str] = field(default_factory=list)
    bytes_written: int = 0

    def to_dict(self) -> dict:
        return {"created": self.created, "modified": self.modified,
                "deleted": self.deleted, "bytes_written": self.bytes_written}


@dataclass
class CommitConflict(Exception):
    conflicts: list[str]

    def __str__(self) -> str:
        return f"lower tree changed since capture: {', '.join(self.conflicts)}"


def _is_subpath(rel: str, ancestor: str) -> bool:
    return ancestor == "" or rel == ancestor or rel.startswith(ancestor + "/")


class LayerSet:
    """Upper/lower state plus the whiteout and opaque bookkeeping."""

    def __init__(self, lower_root: str, storage_dir: str,
                 quota_bytes: int | None = None):
        self.lower_root = os.path.abspath(lower_root)
        self.storage_dir = os.path.abspath(storage_dir)
        self.upper_root = os.path.join(self.storage_dir, UPPER_NAME)
        self.manifest_path = os.path.join(self.storage_dir, MANIFEST_NAME)
        if _is_subpath(self.upper_root, self.lower_root):
            raise ValueError("workspace storage must be outside the lower tree")
        self.quota_bytes = quota_bytes
        self.whiteouts: set[str] = set()
        self.opaque_dirs: set[str] = set()
        # First-touch lower state per path: ("absent",) | ("file", size,
        # mtime_ns) | ("dir",) | ("symlink", target). Used for commit
        # conflict detection and created/modified classification.
        self.baseline: dict[str, tuple] = {}
        self.bytes_written = 0
        os.makedirs(self.upper_root, exist_ok=True)
        if os.path.exists(self.manifest_path):
            self._load_manifest()

    # -- path plumbing ---------------------------------------------------

    def _lower(self, rel: str) -> str:
        return os.path.join(self.lower_root, rel) if rel else self.lower_root

    def _upper(self, rel: str) -> str:
        return os.path.join(self.upper_root, rel) if rel else self.upper_root

    def rel_of(self, abspath: str) -> str | None:
        """Map a host-absolute path inside lower (or upper) to its logical
        lower-relative form; None when outside both."""
        path = posixpath.normpath(abspath)
        for root in (self.lower_root, self.upper_root):
            if path == root:
                return ""
            if path.startswith(root + "/"):
                return path[len(root) + 1:]
        return None

    # -- manifest ----------------------------------------------------------

    def _save_manifest(self) -> None:
        lines = []
        for rel in sorted(self.whiteouts):
            lines.append(json.dumps({"whiteout": rel}))
        for rel in sorted(self.opaque_dirs):
            lines.append(json.dumps({"opaque": rel}))
        for rel in sorted(self.baseline):
            lines.append(json.dumps({"baseline": rel,
                                     "state": list(self.baseline[rel])}))
        tmp = self.manifest_path + ".tmp"
        with open(tmp, "w") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, self.manifest_path)

    def _load_manifest(self) -> None:
        with open(self.manifest_path) as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "whiteout" in rec:
                    self.whiteouts.add(rec["whiteout"])
                elif "opaque" in rec:
                    self.opaque_dirs.add(rec["opaque"])
                elif "baseline" in rec:
                    self.baseline[rec["baseline"]] = tuple(rec["state"])

    # -- quota ------------------------------------------------------------

    def _charge(self, nbytes: int) -> None:
        if nbytes <= 0:
            return
        if (self.quota_bytes is not None
                and self.bytes_written + nbytes > self.quota_bytes):
            raise CowError(errno.ENOSPC, "workspace quota exhausted")
        self.bytes_written += nbytes

    # -- baseline ---------------------------------------------------------

    def _lower_state(self, rel: str) -> tuple:
        try:
            st = os.lstat(self._lower(rel))
        except OSError:
            return ("absent",)
        if stat_m.S_ISLNK(st.st_mode):
            return ("symlink", os.readlink(self._lower(rel)))
        if stat_m.S_ISDIR(st.st_mode):
            return ("dir",)
        return ("file", st.st_size, st.st_mtime_ns)

    def _record_baseline(self, rel: str) -> None:
        if rel and rel not in self.baseline:
            self.baseline[rel] = self._lower_state(rel)

    # -- visibility --------------------------------------------------------

    def _lower_visible(self, rel: str) -> bool:
        """Whether the lower layer can contribute this path to the merged
        view (no whiteout/opaque ancestor, no whiteout on it)."""
        if rel in self.whiteouts:
            return False
        parts = rel.split("/") if rel else []
        prefix = ""
        for comp in parts[:-1] if parts else []:
            prefix = f"{prefix}/{comp}" if prefix else comp
            if prefix in self.whiteouts or prefix in self.opaque_dirs:
                return False
        return True

    def _entry(self, rel: str) -> Resolved | None:
        """Merged lookup of one path (no symlink following)."""
        upper = self._upper(rel)
        try:
            os.lstat(upper)
            return Resolved("upper", upper, rel)
        except OSError:
            pass
        if not self._lower_visible(rel):
            return None
        lower = self._lower(rel)
        try:
            os.lstat(lower)
            return Resolved("lower", lower, rel)
        except OSError:
            return None

    def canonical_rel(self, rel: str, follow_final: bool = True) -> str:
        """Normalize a lower-relative path against the merged view, following
        symlinks within the tree and refusing escapes."""
        parts = [p for p in rel.split("/") if p not in ("", ".")]
        out: list[str] = []
        budget = _SYMLINK_LOOP_LIMIT
        i = 0
        while i < len(parts):
            comp = parts[i]
            i += 1
            if comp == "..":
                if not out:
                    raise EscapeError(rel)
                out.pop()
                continue
            cur = "/".join(out + [comp])
            entry = self._entry(cur)
            if entry is not None and stat_m.S_ISLNK(os.lstat(entry.real_path).st_mode):
                if not follow_final and i == len(parts):
                    out.append(comp)
                    continue
                budget -= 1
                if budget <= 0:
                    raise CowError(errno.ELOOP)
                target = os.readlink(entry.real_path)
                if target.startswith("/"):
                    tail = parts[i:]
                    inner = self.rel_of(posixpath.normpath(target))
                    if inner is None:
                        raise EscapeError(target)
                    out = []
                    parts = [p for p in inner.split("/") if p] + tail
                    i = 0
                else:
                    parts = target.split("/") + parts[i:]
                    i = 0
                continue
            out.append(comp)
            if i < len(parts) and entry is not None \
                    and not stat_m.S_ISDIR(os.lstat(entry.real_path).st_mode):
                raise CowError(errno.ENOTDIR)
        return "/".join(out)

    # -- reads ---------------------------------------------------------

    def resolve_read(self, rel: str, follow_final: bool = True) -> Resolved | None:
        """Merged lookup: upper wins, whiteout hides lower, escapes denied."""
        canon = self.canonical_rel(rel, follow_final=follow_final)
        return self._entry(canon)

    def merge_dirents(self, rel: str) -> list[str]:
        """Union of the two layers' listings, whiteouts excluded, sorted."""
        canon = self.canonical_rel(rel)
        entry = self._entry(canon)
        if entry is None:
            raise CowError(errno.ENOENT)
        if not stat_m.S_ISDIR(os.stat(entry.real_path).st_mode):
            raise CowError(errno.ENOTDIR)
        names: set[str] = set()
        upper = self._upper(canon)
        if os.path.isdir(upper):
            names.update(os.listdir(upper))
        use_lower = (canon not in self.opaque_dirs
                     and self._lower_visible(canon))
        if use_lower and os.path.isdir(self._lower(canon)):
            names.update(os.listdir(self._lower(canon)))
        out = []
        for name in names:
            child = f"{canon}/{name}" if canon else name
            if self._entry(child) is not None:
                out.append(name)
        return sorted(out)

    def merged_entries_with_meta(self, rel: str) -> list[tuple[str, int, int]]:
        """(name, inode, mode) triples for dirent emulation; upper wins."""
        out = []
        canon = self.canonical_rel(rel)
        for name in self.merge_dirents(canon):
            child = f"{canon}/{name}" if canon else name
            entry = self._entry(child)
            if entry is None:
                continue
            st = os.lstat(entry.real_path)
            out.append((name, st.st_ino, st.st_mode))
        return out

    # -- writes ----------------------------------------------------------

    def _materialize_parents(self, rel: str) -> None:
        parts = rel.split("/")[:-1]
        prefix = ""
        for comp in parts:
            prefix = f"{prefix}/{comp}" if prefix else comp
            upper = self._upper(prefix)
            if os.path.isdir(upper):
                continue
            entry = self._entry(prefix)
            if entry is None:
                raise CowError(errno.ENOENT)
            if not stat_m.S_ISDIR(os.lstat(entry.real_path).st_mode):
                raise CowError(errno.ENOTDIR)
            os.makedirs(upper, exist_ok=True)
            try:
                os.chmod(upper, stat_m.S_IMODE(os.stat(entry.real_path).st_mode))
            except OSError:
                pass

    def _copy_up(self, rel: str, truncate: bool = False) -> str:
        """Whole-file copy into upper on first write; returns the upper path."""
        entry = self._entry(rel)
        upper = self._upper(rel)
        if entry is not None and entry.layer == "upper":
            return upper
        if entry is None:
            raise CowError(errno.ENOENT)
        self._record_baseline(rel)
        self._materialize_parents(rel)
        st = os.lstat(entry.real_path)
        if stat_m.S_ISLNK(st.st_mode):
            os.symlink(os.readlink(entry.real_path), upper)
        elif stat_m.S_ISDIR(st.st_mode):
            os.makedirs(upper, exist_ok=True)
            try:
                os.chmod(upper, stat_m.S_IMODE(st.st_mode))
            except OSError:
                pass
        else:
            if truncate:
                with open(upper, "wb"):
                    pass
            else:
                self._charge(st.st_size)
                try:
                    shutil.copy2(entry.real_path, upper)
                except OSError as exc:
                    raise CowError(errno.EIO, f"copy-up failed: {exc}") from exc
        self.whiteouts.discard(rel)
        self._save_manifest()
        return upper

    def prepare_open_write(self, rel: str, create: bool, excl: bool,
                           truncate: bool) -> str:
        """Route an open-for-write; returns the real upper path to open."""
        canon = self.canonical_rel(rel)
        if not canon:
            raise CowError(errno.EISDIR)
        entry = self._entry(canon)
        if entry is not None and stat_m.S_ISDIR(os.lstat(entry.real_path).st_mode):
            raise CowError(errno.EISDIR)
        if entry is None:
            if not create:
                raise CowError(errno.ENOENT)
            self._record_baseline(canon)
            self._materialize_parents(canon)
            self._charge(0)
            self.whiteouts.discard(canon)
            self._save_manifest()
            return self._upper(canon)
        if excl:
            raise CowError(errno.EEXIST)
        return self._copy_up(canon, truncate=truncate)

    def write_file(self, rel: str, data: bytes, append: bool = False) -> None:
        """Algebra-level write used by tests and the oracle harness."""
        upper = self.prepare_open_write(rel, create=True, excl=False,
                                        truncate=not append)
        self._charge(len(data))
        with open(upper, "ab" if append else "wb") as f:
            f.write(data)

    def read_file(self, rel: str) -> bytes:
        entry = self.resolve_read(rel)
        if entry is None:
            raise CowError(errno.ENOENT)
        with open(entry.real_path, "rb") as f:
            return f.read()

    def unlink(self, rel: str) -> None:
        canon = self.canonical_rel(rel, follow_final=False)
        entry = self._entry(canon)
        if entry is None:
            raise CowError(errno.ENOENT)
        if stat_m.S_ISDIR(os.lstat(entry.real_path).st_mode):
            raise CowError(errno.EISDIR)
        self._record_baseline(canon)
        upper = self._upper(canon)
        if os.path.lexists(upper):
            os.unlink(upper)
        if self._lower_visible(canon) and os.path.lexists(self._lower(canon)):
            self.whiteouts.add(canon)
        self._save_manifest()

    def mkdir(self, rel: str, mode: int = 0o777) -> None:
        canon = self.canonical_rel(rel, follow_final=False)
        if not canon:
            raise CowError(errno.EEXIST)
        if self._entry(canon) is not None:
            raise CowError(errno.EEXIST)
        self._record_baseline(canon)
        self._materialize_parents(canon)
        os.mkdir(self._upper(canon), mode)
        if canon in self.whiteouts:
            # Recreating a deleted directory: shadowed lower content must not
            # reappear through the new directory.
            self.whiteouts.discard(canon)
            self.opaque_dirs.add(canon)
        self._save_manifest()

    def rmdir(self, rel: str) -> None:
        canon = self.canonical_rel(rel, follow_final=False)
        if not canon:
            raise CowError(errno.EBUSY)
        entry = self._entry(canon)
        if entry is None:
            raise CowError(errno.ENOENT)
        if not stat_m.S_ISDIR(os.lstat(entry.real_path).st_mode):
            raise CowError(errno.ENOTDIR)
        if self.merge_dirents(canon):
            raise CowError(errno.ENOTEMPTY)
        self._record_baseline(canon)
        upper = self._upper(canon)
        if os.path.isdir(upper):
            os.rmdir(upper)
        self.opaque_dirs.discard(canon)
        if self._lower_visible(canon) and os.path.isdir(self._lower(canon)):
            self.whiteouts.add(canon)
        self._drop_records_below(canon)
        self._save_manifest()

    def _drop_records_below(self, rel: str) -> None:
        self.whiteouts = {w for w in self.whiteouts
                          if not _is_subpath(w, rel) or w == rel}
        self.opaque_dirs = {o for o in self.opaque_dirs
                            if not _is_subpath(o, rel) or o == rel}

    def _capture_subtree(self, rel: str) -> None:
        """Materialize the full merged subtree into upper (recursive copy-up),
        so it can be moved wholesale by a rename."""
        entry = self._entry(rel)
        if entry is None:
            raise CowError(errno.ENOENT)
        st = os.lstat(entry.real_path)
        if not stat_m.S_ISDIR(st.st_mode):
            self._copy_up(rel)
            return
        self._copy_up(rel)  # the directory node itself
        for name in self.merge_dirents(rel):
            self._capture_subtree(f"{rel}/{name}" if rel else name)

    def rename(self, src: str, dst: str) -> None:
        """capture-source + whiteout-source + create-dest, in upper only."""
        src_c = self.canonical_rel(src, follow_final=False)
        dst_c = self.canonical_rel(dst, follow_final=False)
        if not src_c or not dst_c:
            raise CowError(errno.EBUSY)
        if src_c == dst_c:
            return
        if _is_subpath(dst_c, src_c):
            raise CowError(errno.EINVAL)
        src_entry = self._entry(src_c)
        if src_entry is None:
            raise CowError(errno.ENOENT)
        src_is_dir = stat_m.S_ISDIR(os.lstat(src_entry.real_path).st_mode)
        dst_entry = self._entry(dst_c)
        if dst_entry is not None:
            dst_is_dir = stat_m.S_ISDIR(os.lstat(dst_entry.real_path).st_mode)
            if dst_is_dir and not src_is_dir:
                raise CowError(errno.EISDIR)
            if src_is_dir and not dst_is_dir:
                raise CowError(errno.ENOTDIR)
            if dst_is_dir and self.merge_dirents(dst_c):
                raise CowError(errno.ENOTEMPTY)

        self._capture_subtree(src_c)
        self._record_baseline(dst_c)
        self._materialize_parents(dst_c)

        upper_src, upper_dst = self._upper(src_c), self._upper(dst_c)
        if dst_entry is not None and os.path.lexists(upper_dst):
            if os.path.isdir(upper_dst) and not os.path.islink(upper_dst):
                os.rmdir(upper_dst)
            else:
                os.unlink(upper_dst)
        os.replace(upper_src, upper_dst)

        # Source side: everything captured has moved; the lower source (if
        # any) is now deleted in the merged view.
        self._drop_records_below(src_c)
        self.whiteouts.discard(src_c)
        self.opaque_dirs.discard(src_c)
        if self._lower_visible(src_c) and os.path.lexists(self._lower(src_c)):
            self._record_baseline(src_c)
            self.whiteouts.add(src_c)

        self._drop_records_below(dst_c)
        self.whiteouts.discard(dst_c)
        if src_is_dir:
            self.opaque_dirs.add(dst_c)
        self._save_manifest()

    def symlink(self, target: str, rel: str) -> None:
        canon = self.canonical_rel(rel, follow_final=False)
        if self._entry(canon) is not None:
            raise CowError(errno.EEXIST)
        self._record_baseline(canon)
        self._materialize_parents(canon)
        self._charge(len(target))
        os.symlink(target, self._upper(canon))
        self.whiteouts.discard(canon)
        self._save_manifest()

    def apply_metadata(self, rel: str, *, mode: int | None = None,
                       times_ns: tuple[int, int] | None = None) -> None:
        """chmod/utimens against the merged view; copy-up first so the lower
        layer stays pristine."""
        canon = self.canonical_rel(rel)
        upper = self._copy_up(canon)
        if mode is not None:
            os.chmod(upper, mode)
        if times_ns is not None:
            os.utime(upper, ns=times_ns)

    # -- effects --------------------------------------------------------

    def _upper_paths(self) -> Iterator[tuple[str, os.stat_result]]:
        for root, dirs, files in os.walk(self.upper_root):
            rel_root = os.path.relpath(root, self.upper_root)
            rel_root = "" if rel_root == "." else rel_root
            for name in dirs + files:
                rel = f"{rel_root}/{name}" if rel_root else name
                yield rel, os.lstat(os.path.join(root, name))

    def _deleted_lower_paths(self) -> set[str]:
        """Lower paths no longer visible in the merged view."""
        gone: set[str] = set()

        def cover(rel: str) -> None:
            lower = self._lower(rel)
            try:
                st = os.lstat(lower)
            except OSError:
                return
            if self._entry(rel) is None:
                gone.add(rel)
            if stat_m.S_ISDIR(st.st_mode):
                for name in os.listdir(lower):
                    cover(f"{rel}/{name}" if rel else name)

        for rel in self.whiteouts:
            cover(rel)
        for rel in self.opaque_dirs:
            lower = self._lower(rel)
            if os.path.isdir(lower):
                for name in os.listdir(lower):
                    cover(f"{rel}/{name}" if rel else name)
        return gone

    def diff(self) -> EffectSummary:
        created, modified, deleted = [], [], []
        bytes_total = 0
        for rel, st in self._upper_paths():
            lower_exists = os.path.lexists(self._lower(rel))
            if stat_m.S_ISDIR(st.st_mode):
                if not lower_exists:
                    created.append(rel)
                continue
            if stat_m.S_ISREG(st.st_mode):
                bytes_total += st.st_size
            if lower_exists:
                modified.append(rel)
            else:
                created.append(rel)
        deleted.extend(sorted(self._deleted_lower_paths()))
        return EffectSummary(sorted(created), sorted(modified), deleted,
                             bytes_total)

    def check_conflicts(self) -> list[str]:
        out = []
        for rel, recorded in sorted(self.baseline.items()):
            if self._lower_state(rel) != recorded:
                out.append(rel)
        return out

    def commit(self) -> EffectSummary:
        """Apply the captured effects to lower, per-file atomically."""
        conflicts = self.check_conflicts()
        if conflicts:
            raise CommitConflict(conflicts)
        summary = self.diff()
        for rel in sorted(summary.deleted, key=lambda r: -r.count("/")):
            target = self._lower(rel)
            try:
                if os.path.isdir(target) and not os.path.islink(target):
                    os.rmdir(target)
                else:
                    os.unlink(target)
            except FileNotFoundError:
                pass
        dirs_first = sorted(
            (rel for rel, st in self._upper_paths()),
            key=lambda r: (r.count("/"), r))
        for rel in dirs_first:
            upper = self._upper(rel)
            lower = self._lower(rel)
            st = os.lstat(upper)
            if stat_m.S_ISDIR(st.st_mode):
                os.makedirs(lower, exist_ok=True)
                try:
                    os.chmod(lower, stat_m.S_IMODE(st.st_mode))
                except OSError:
                    pass
            elif stat_m.S_ISLNK(st.st_mode):
                tmp = lower + ".cow-tmp"
                if os.path.lexists(tmp):
                    os.unlink(tmp)
                os.symlink(os.readlink(upper), tmp)
                os.replace(tmp, lower)
            else:
                fd, tmp = tempfile.mkstemp(dir=os.path.dirname(lower) or ".",
                                           prefix=".cow-commit-")
                try:
                    with os.fdopen(fd, "wb") as out, open(upper, "rb") as src:
                        shutil.copyfileobj(src, out)
                    shutil.copystat(upper, tmp)
                    os.replace(tmp, lower)
                except OSError:
                    if os.path.exists(tmp):
                        os.unlink(tmp)
                    raise
        self._reset()
        return summary

    def abort(self) -> None:
        """Discard the upper layer and all records. Idempotent."""
        self._reset()

    def _reset(self) -> None:
        shutil.rmtree(self.upper_root, ignore_errors=True)
        os.makedirs(self.upper_root, exist_ok=True)
        self.whiteouts.clear()
        self.opaque_dirs.clear()
        self.baseline.clear()
        self.bytes_written = 0
        if os.path.exists(self.manifest_path):
            os.unlink(self.manifest_path)


class WorkspaceBackend:
    """Effect-capture backend interface: create/commit/abort/quota.

    The seccomp backend below is the shipped implementation; a
    filesystem-level branching backend can slot in behind the same surface.
    """

    def layers(self) -> LayerSet:
        raise NotImplementedError

    def finalize(self, action, dry_run: bool = False) -> EffectSummary:
        raise NotImplementedError

    def set_quota(self, quota_bytes: int | None) -> None:
        raise NotImplementedError


class SeccompCowBackend(WorkspaceBackend):
    """Write capture via syscall interception; see vfs.py for the handlers."""

    def __init__(self, lower_root: str, storage_dir: str | None = None,
                 quota_bytes: int | None = None):
        self._own_storage = storage_dir is None
        storage = storage_dir or tempfile.mkdtemp(prefix="cow-ws-")
        os.makedirs(storage, exist_ok=True)
        self._layers = LayerSet(lower_root, storage, quota_bytes)

    def layers(self) -> LayerSet:
        return self._layers

    def set_quota(self, quota_bytes: int | None) -> None:
        self._layers.quota_bytes = quota_bytes

    def finalize(self, action, dry_run: bool = False) -> EffectSummary:
        """COMMIT merges, ABORT discards, KEEP reports the upper location.
        dry_run always reports without mutating lower."""
        from .policy import EffectAction
        summary = self._layers.diff()
        if dry_run:
            return summary
        if action is EffectAction.COMMIT:
            return self._layers.commit()
        if action is EffectAction.ABORT:
            self._layers.abort()
            return summary
        return summary  # KEEP: upper stays for inspection


class BranchFsBackend(WorkspaceBackend):
    """Interface stub for a filesystem-level branch backend (not shipped)."""

    def __init__(self, *args, **kwargs):
        raise NotImplementedError(
            "filesystem-level branch backend is not included; "
            "use SeccompCowBackend")
