"""Repository discovery, fetching, and file enumeration.

Discovery runs against a hosting-service index behind a small protocol; the
production implementation talks to the GitHub search API, while tests and
offline runs use a JSON fixture index. Fetching accepts plain directories
(``file://`` or bare paths) as a backend so fixture repositories work without
network access.
"""

from __future__ import annotations

import hashlib
import logging
import random
import shutil
import subprocess
import time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Protocol

from .errors import ApiAuthError, ApiRateLimited, FetchError, RepoTooLarge

logger = logging.getLogger(__name__)

VCS_DIRS = {".git", ".hg", ".svn"}
TEXT_SNIFF_BYTES = 8192

DEFAULT_LICENSE_ALLOWLIST = frozenset(
    {"MIT", "Apache-2.0", "BSD-2-Clause", "BSD-3-Clause"}
)
DEFAULT_ACTIVE_WINDOW_DAYS = 5 * 365


@dataclass(frozen=True)
class RepoDescriptor:
    host_url: str
    name: str
    license_id: str = "unknown"
    default_branch: str = "main"
    matched_libraries: frozenset[str] = frozenset()
    last_activity: datetime | None = None


@dataclass
class WorkingCopy:
    root_path: Path
    descriptor: RepoDescriptor
    snapshot_id: str


@dataclass(frozen=True)
class FileRecord:
    relative_path: str
    byte_size: int
    content_digest: str
    is_text: bool


class RepoIndex(Protocol):
    """Source of candidate repositories for discovery."""

    def search(self, library_names: list[str]) -> Iterable[RepoDescriptor]: ...


class FixtureRepoIndex:
    """Offline index backed by a JSON file of candidate repositories."""

    def __init__(self, entries: list[dict]):
        self._entries = entries

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureRepoIndex":
        import json

        return cls(json.loads(Path(path).read_text()))

    def search(self, library_names: list[str]) -> Iterable[RepoDescriptor]:
        wanted = set(library_names)
        for entry in self._entries:
            mentioned = set(entry.get("libraries", []))
            last_activity = entry.get("last_activity")
            yield RepoDescriptor(
                host_url=entry["host_url"],
                name=entry["name"],
                license_id=entry.get("license", "unknown"),
                default_branch=entry.get("default_branch", "main"),
                matched_libraries=frozenset(mentioned & wanted),
                last_activity=(
                    datetime.fromisoformat(last_activity) if last_activity else None
                ),
            )


class GithubRepoIndex:
    """GitHub code-search backed index.

    For each library name, searches code for files importing it, then
    resolves repository metadata (license, default branch, last push).
    A token is read from the environment; 401 maps to ApiAuthError and
    rate-limit responses map to ApiRateLimited with the advertised delay.
    """

    def __init__(
        self,
        *,
        token_env: str = "GITHUB_TOKEN",
        api_root: str = "https://api.github.com",
        session=None,
    ):
        import os

        self.api_root = api_root.rstrip("/")
        self._token = os.environ.get(token_env, "")
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def _get(self, url: str, params: dict | None = None) -> dict:
        headers = {"Accept": "application/vnd.github+json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        response = self._session.get(url, params=params, headers=headers, timeout=30)
        if response.status_code == 401:
            raise ApiAuthError("hosting API rejected credentials")
        if response.status_code in (403, 429):
            retry_after = response.headers.get("Retry-After")
            raise ApiRateLimited(
                "hosting API rate limited",
                retry_after=float(retry_after) if retry_after else None,
            )
        response.raise_for_status()
        return response.json()

    def search(self, library_names: list[str]) -> Iterable[RepoDescriptor]:
        seen: dict[str, set[str]] = {}
        for library in library_names:
            payload = self._get(
                f"{self.api_root}/search/code",
                params={"q": f'"import {library}" in:file', "per_page": 100},
            )
            for item in payload.get("items", []):
                full_name = item["repository"]["full_name"]
                seen.setdefault(full_name, set()).add(library)
        for full_name, matched in seen.items():
            meta = self._get(f"{self.api_root}/repos/{full_name}")
            license_info = meta.get("license") or {}
            pushed_at = meta.get("pushed_at")
            yield RepoDescriptor(
                host_url=meta.get("html_url", f"https://github.com/{full_name}"),
                name=full_name,
                license_id=license_info.get("spdx_id") or "unknown",
                default_branch=meta.get("default_branch", "main"),
                matched_libraries=frozenset(matched),
                last_activity=(
                    datetime.fromisoformat(pushed_at.replace("Z", "+00:00"))
                    if pushed_at
                    else None
                ),
            )


def discover_repos(
    index: RepoIndex,
    library_names: list[str],
    license_allowlist: Iterable[str] = DEFAULT_LICENSE_ALLOWLIST,
    *,
    active_window_days: int = DEFAULT_ACTIVE_WINDOW_DAYS,
    now: datetime | None = None,
) -> list[RepoDescriptor]:
    """Filter the index down to licensed, active, library-matching repos.

    Output is deduplicated by host_url and sorted, so it does not depend on
    the order the index yields candidates.
    """
    if not library_names:
        raise ValueError("library_names must be non-empty")
    allowed = set(license_allowlist)
    now = now or datetime.now(timezone.utc)
    cutoff = now - timedelta(days=active_window_days)
    by_url: dict[str, RepoDescriptor] = {}
    for candidate in index.search(list(library_names)):
        if not candidate.matched_libraries:
            continue
        if candidate.license_id not in allowed:
            continue
        last = candidate.last_activity
        if last is not None:
            if last.tzinfo is None:
                last = last.replace(tzinfo=timezone.utc)
            if last < cutoff:
                continue
        by_url.setdefault(candidate.host_url, candidate)
    return [by_url[url] for url in sorted(by_url)]


def sample_repos(
    repos: list[RepoDescriptor], n: int, seed: int
) -> list[RepoDescriptor]:
    """Uniform sample without replacement; deterministic for a fixed seed."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = random.Random(seed)
    return rng.sample(list(repos), min(n, len(repos)))


def snapshot_digest(records: list[FileRecord]) -> str:
    hasher = hashlib.sha256()
    for record in records:
        hasher.update(record.relative_path.encode("utf-8"))
        hasher.update(b"\0")
        hasher.update(record.content_digest.encode("ascii"))
        hasher.update(b"\n")
    return hasher.hexdigest()


def _copy_tree_capped(source: Path, dest: Path, max_bytes: int | None) -> None:
    copied = 0
    for dirpath, dirnames, filenames in _walk_pruned(source):
        rel = dirpath.relative_to(source)
        (dest / rel).mkdir(parents=True, exist_ok=True)
        for filename in filenames:
            src_file = dirpath / filename
            if src_file.is_symlink():
                logger.info("skipping symlink during fetch: %s", src_file)
                continue
            size = src_file.stat().st_size
            copied += size
            if max_bytes is not None and copied > max_bytes:
                raise RepoTooLarge(
                    f"repository exceeds byte cap ({copied} > {max_bytes})"
                )
            shutil.copy2(src_file, dest / rel / filename)


def _walk_pruned(root: Path):
    """os.walk with VCS internals and symlinked directories pruned."""
    import os

    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(
            d
            for d in dirnames
            if d not in VCS_DIRS and not (Path(dirpath) / d).is_symlink()
        )
        yield Path(dirpath), dirnames, sorted(filenames)


def fetch_repo(
    descriptor: RepoDescriptor,
    dest: str | Path,
    *,
    max_bytes: int | None = None,
) -> WorkingCopy:
    """Materialize a pinned working copy of the repository at ``dest``.

    ``file://`` URLs (and bare local paths) are copied from disk; anything
    else is treated as a git remote and shallow-cloned. The snapshot id is
    the clone revision, or a digest over the file listing for local copies.
    """
    dest = Path(dest)
    source = _local_source(descriptor.host_url)
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FetchError(f"destination not writable: {dest}: {exc}") from exc
    if any(dest.iterdir()):
        raise FetchError(f"destination not empty: {dest}")

    if source is not None:
        if not source.is_dir():
            raise FetchError(f"local repository not found: {source}")
        try:
            _copy_tree_capped(source, dest, max_bytes)
        except RepoTooLarge:
            shutil.rmtree(dest, ignore_errors=True)
            raise
        except OSError as exc:
            shutil.rmtree(dest, ignore_errors=True)
            raise FetchError(f"failed to copy {source}: {exc}") from exc
        copy = WorkingCopy(root_path=dest, descriptor=descriptor, snapshot_id="")
        copy.snapshot_id = snapshot_digest(enumerate_files(copy))
        return copy

    try:
        subprocess.run(
            ["git", "clone", "--depth", "1", descriptor.host_url, str(dest)],
            check=True,
            capture_output=True,
            text=True,
        )
        revision = subprocess.run(
            ["git", "-C", str(dest), "rev-parse", "HEAD"],
            check=True,
            capture_output=True,
            text=True,
        ).stdout.strip()
    except (subprocess.CalledProcessError, OSError) as exc:
        shutil.rmtree(dest, ignore_errors=True)
        raise FetchError(f"git clone failed for {descriptor.host_url}: {exc}") from exc
    if max_bytes is not None:
        total = sum(
            (dirpath / name).stat().st_size
            for dirpath, _, names in _walk_pruned(dest)
            for name in names
        )
        if total > max_bytes:
            shutil.rmtree(dest, ignore_errors=True)
            raise RepoTooLarge(f"repository exceeds byte cap ({total} > {max_bytes})")
    return WorkingCopy(root_path=dest, descriptor=descriptor, snapshot_id=revision)


def _local_source(host_url: str) -> Path | None:
    if host_url.startswith("file://"):
        return Path(host_url[len("file://"):])
    if "://" not in host_url:
        return Path(host_url)
    return None


def enumerate_files(copy: WorkingCopy) -> list[FileRecord]:
    """List the working copy's files in deterministic path order.

    VCS internals and symlinks are excluded; unreadable files are logged and
    skipped rather than failing the pipeline. Identical snapshots always
    produce identical record lists.
    """
    records: list[FileRecord] = []
    root = copy.root_path
    for dirpath, _dirnames, filenames in _walk_pruned(root):
        for filename in filenames:
            file_path = dirpath / filename
            if file_path.is_symlink():
                continue
            relative = file_path.relative_to(root).as_posix()
            try:
                data = file_path.read_bytes()
            except OSError as exc:
                logger.warning("unreadable file skipped: %s (%s)", relative, exc)
                continue
            records.append(
                FileRecord(
                    relative_path=relative,
                    byte_size=len(data),
                    content_digest=hashlib.sha256(data).hexdigest(),
                    is_text=b"\x00" not in data[:TEXT_SNIFF_BYTES],
                )
            )
    records.sort(key=lambda record: record.relative_path)
    return records


def wait_for_rate_limit(exc: ApiRateLimited, *, sleep=time.sleep) -> None:
    """Honor a rate-limit response before retrying discovery."""
    delay = exc.retry_after if exc.retry_after is not None else 60.0
    logger.info("hosting API rate limited; sleeping %.0fs", delay)
    sleep(delay)
