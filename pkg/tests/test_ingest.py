from __future__ import annotations

import json
from collections import Counter
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repodistill.errors import ApiAuthError, ApiRateLimited, FetchError, RepoTooLarge
from repodistill.ingest import (
    FixtureRepoIndex,
    GithubRepoIndex,
    RepoDescriptor,
    WorkingCopy,
    discover_repos,
    enumerate_files,
    fetch_repo,
    sample_repos,
)

NOW = datetime(2026, 8, 1, tzinfo=timezone.utc)


def fixture_index_entries() -> list[dict]:
    recent = (NOW - timedelta(days=30)).isoformat()
    return [
        {
            "host_url": "https://example.com/a",
            "name": "a",
            "license": "MIT",
            "libraries": ["matlib"],
            "last_activity": recent,
        },
        {
            "host_url": "https://example.com/b",
            "name": "b",
            "license": "Apache-2.0",
            "libraries": ["simkit"],
            "last_activity": recent,
        },
        {
            "host_url": "https://example.com/c",
            "name": "c",
            "license": "GPL-3.0",  # disallowed license
            "libraries": ["matlib"],
            "last_activity": recent,
        },
        {
            "host_url": "https://example.com/d",
            "name": "d",
            "license": "MIT",
            "libraries": ["unrelated"],  # no library match
            "last_activity": recent,
        },
        {
            "host_url": "https://example.com/e",
            "name": "e",
            "license": "MIT",
            "libraries": [],
            "last_activity": recent,
        },
    ]


def test_discover_filters_by_library_and_license() -> None:
    index = FixtureRepoIndex(fixture_index_entries())
    # hand-filtered oracle: of the 3 library-matching repos (a, c), only
    # a and b carry allowed licenses and match a requested library
    repos = discover_repos(index, ["matlib", "simkit"], {"MIT", "Apache-2.0"}, now=NOW)
    assert sorted(r.name for r in repos) == ["a", "b"]


def test_discover_empty_allowlist_is_vacuous() -> None:
    index = FixtureRepoIndex(fixture_index_entries())
    assert discover_repos(index, ["matlib"], set(), now=NOW) == []


def test_discover_deduplicates_by_host_url() -> None:
    entries = fixture_index_entries()
    entries.append(dict(entries[0]))  # duplicate host_url
    repos = discover_repos(
        FixtureRepoIndex(entries), ["matlib"], {"MIT"}, now=NOW
    )
    assert [r.host_url for r in repos] == ["https://example.com/a"]


def test_discover_invariant_to_index_ordering() -> None:
    entries = fixture_index_entries()
    forward = discover_repos(
        FixtureRepoIndex(entries), ["matlib", "simkit"], {"MIT", "Apache-2.0"}, now=NOW
    )
    backward = discover_repos(
        FixtureRepoIndex(list(reversed(entries))),
        ["matlib", "simkit"],
        {"MIT", "Apache-2.0"},
        now=NOW,
    )
    assert forward == backward


def test_discover_drops_inactive_repositories() -> None:
    entries = fixture_index_entries()
    entries[0]["last_activity"] = (NOW - timedelta(days=6 * 365)).isoformat()
    repos = discover_repos(
        FixtureRepoIndex(entries), ["matlib", "simkit"], {"MIT", "Apache-2.0"}, now=NOW
    )
    assert sorted(r.name for r in repos) == ["b"]


def test_discover_requires_library_names() -> None:
    with pytest.raises(ValueError):
        discover_repos(FixtureRepoIndex([]), [], {"MIT"})


class _StubHttpResponse:
    def __init__(self, status_code: int, payload=None, headers=None):
        self.status_code = status_code
        self._payload = payload or {}
        self.headers = headers or {}

    def json(self):
        return self._payload

    def raise_for_status(self):
        if self.status_code >= 400:
            raise RuntimeError(f"HTTP {self.status_code}")


class _StubSession:
    def __init__(self, response):
        self._response = response

    def get(self, url, params=None, headers=None, timeout=None):
        return self._response


def test_github_index_maps_auth_and_rate_limit_errors() -> None:
    auth_index = GithubRepoIndex(session=_StubSession(_StubHttpResponse(401)))
    with pytest.raises(ApiAuthError):
        list(auth_index.search(["matlib"]))

    limited = GithubRepoIndex(
        session=_StubSession(_StubHttpResponse(429, headers={"Retry-After": "17"}))
    )
    with pytest.raises(ApiRateLimited) as info:
        list(limited.search(["matlib"]))
    assert info.value.retry_after == 17.0


def _descriptors(n: int) -> list[RepoDescriptor]:
    return [RepoDescriptor(host_url=f"u{i}", name=f"r{i}") for i in range(n)]


def test_sample_degenerate_returns_permuted_full_list() -> None:
    repos = _descriptors(4)
    sampled = sample_repos(repos, 10, seed=1)
    assert sorted(r.name for r in sampled) == sorted(r.name for r in repos)


def test_sample_deterministic_for_fixed_seed() -> None:
    repos = _descriptors(20)
    assert sample_repos(repos, 5, seed=42) == sample_repos(repos, 5, seed=42)
    assert sample_repos(repos, 5, seed=42) != sample_repos(repos, 5, seed=43)


def test_sample_uniformity_chi_square_bound() -> None:
    # 10,000 draws of 1 from 4 items: each frequency within 2500 +/- 150
    repos = _descriptors(4)
    counts: Counter[str] = Counter()
    for seed in range(10_000):
        counts[sample_repos(repos, 1, seed=seed)[0].name] += 1
    for name in ("r0", "r1", "r2", "r3"):
        assert abs(counts[name] - 2500) <= 150, counts


def local_descriptor(path: Path) -> RepoDescriptor:
    return RepoDescriptor(host_url=f"file://{path}", name=path.name)


def test_fetch_local_fixture_and_snapshot_digest(tmp_path, fixture_repo) -> None:
    copy = fetch_repo(local_descriptor(fixture_repo), tmp_path / "copy")
    assert copy.root_path.is_dir()
    assert (copy.root_path / "README.md").is_file()
    assert copy.snapshot_id
    # digest is a pure function of the file listing
    again = fetch_repo(local_descriptor(fixture_repo), tmp_path / "copy2")
    assert again.snapshot_id == copy.snapshot_id


def test_fetch_dest_not_writable(fixture_repo, tmp_path) -> None:
    import os

    if os.geteuid() == 0:
        pytest.skip("permission bits do not bind root")
    blocked = tmp_path / "blocked"
    blocked.mkdir()
    blocked.chmod(0o500)
    with pytest.raises(FetchError):
        fetch_repo(local_descriptor(fixture_repo), blocked / "copy")


def test_fetch_dest_conflict_is_fetch_error(fixture_repo, tmp_path) -> None:
    dest = tmp_path / "copy"
    dest.mkdir()
    (dest / "junk").write_text("x")
    with pytest.raises(FetchError):
        fetch_repo(local_descriptor(fixture_repo), dest)


def test_fetch_missing_source_is_fetch_error(tmp_path) -> None:
    with pytest.raises(FetchError):
        fetch_repo(local_descriptor(tmp_path / "nope"), tmp_path / "copy")


def test_repo_too_large_cap(tmp_path) -> None:
    source = tmp_path / "big"
    source.mkdir()
    (source / "blob.dat").write_bytes(b"x" * (2 * 1024 * 1024))
    with pytest.raises(RepoTooLarge):
        fetch_repo(local_descriptor(source), tmp_path / "copy", max_bytes=1024 * 1024)
    assert not (tmp_path / "copy").exists()


def test_enumerate_empty_repo(tmp_path) -> None:
    empty = tmp_path / "empty"
    empty.mkdir()
    copy = WorkingCopy(root_path=empty, descriptor=local_descriptor(empty), snapshot_id="s")
    assert enumerate_files(copy) == []


def test_enumerate_orders_and_classifies(tmp_path, fixture_repo) -> None:
    copy = fetch_repo(local_descriptor(fixture_repo), tmp_path / "copy")
    records = enumerate_files(copy)
    paths = [r.relative_path for r in records]
    assert paths == sorted(paths)
    by_path = {r.relative_path: r for r in records}
    assert by_path["data.bin"].is_text is False  # contains a null byte
    assert by_path["README.md"].is_text is True
    assert by_path["README.md"].byte_size > 0


def test_enumerate_excludes_vcs_and_symlinks(tmp_path) -> None:
    repo = tmp_path / "repo"
    (repo / ".git").mkdir(parents=True)
    (repo / ".git" / "HEAD").write_text("ref: refs/heads/main")
    (repo / "kept.py").write_text("print('hi')\n")
    (repo / "link.py").symlink_to(repo / "kept.py")
    outside = tmp_path / "outside.txt"
    outside.write_text("secret")
    (repo / "escape").symlink_to(tmp_path)
    copy = WorkingCopy(root_path=repo, descriptor=local_descriptor(repo), snapshot_id="s")
    paths = [r.relative_path for r in enumerate_files(copy)]
    assert paths == ["kept.py"]


def test_enumerate_is_pure_function_of_snapshot(tmp_path, fixture_repo) -> None:
    copy = fetch_repo(local_descriptor(fixture_repo), tmp_path / "copy")
    assert enumerate_files(copy) == enumerate_files(copy)


@settings(max_examples=30, deadline=None)
@given(
    names=st.lists(
        st.text(
            alphabet=st.sampled_from("abcXYZ019._-"),
            min_size=1,
            max_size=12,
        ).filter(lambda s: s not in (".", "..") and "/" not in s),
        min_size=0,
        max_size=6,
        unique=True,
    )
)
def test_no_record_escapes_root_fuzz(tmp_path_factory, names) -> None:
    root = tmp_path_factory.mktemp("fuzzrepo")
    for name in names:
        (root / name).write_text("content")
    copy = WorkingCopy(
        root_path=root, descriptor=local_descriptor(root), snapshot_id="s"
    )
    for record in enumerate_files(copy):
        assert not record.relative_path.startswith("/")
        assert ".." not in record.relative_path.split("/")
        assert (root / record.relative_path).is_file()


def test_binary_sniffer_on_constructed_file(tmp_path) -> None:
    repo = tmp_path / "repo"
    repo.mkdir()
    (repo / "mixed.dat").write_bytes(b"plain text then \x00 null")
    (repo / "clean.txt").write_bytes(b"no nulls here")
    (repo / "empty.txt").write_bytes(b"")
    copy = WorkingCopy(root_path=repo, descriptor=local_descriptor(repo), snapshot_id="s")
    by_path = {r.relative_path: r for r in enumerate_files(copy)}
    assert by_path["mixed.dat"].is_text is False
    assert by_path["clean.txt"].is_text is True
    assert by_path["empty.txt"].is_text is True
    assert by_path["empty.txt"].byte_size == 0


def test_fixture_index_from_file(tmp_path) -> None:
    path = tmp_path / "index.json"
    path.write_text(json.dumps(fixture_index_entries()))
    index = FixtureRepoIndex.from_file(path)
    repos = discover_repos(index, ["matlib"], {"MIT"}, now=NOW)
    assert [r.name for r in repos] == ["a"]
    assert repos[0].matched_libraries == frozenset({"matlib"})
