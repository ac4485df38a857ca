"""Sandboxed execution of bundle run scripts.

A workspace holds a read-only mirror of the repository, the four bundle
files, and a fresh output directory. The run script executes under an
isolation backend: the default confined-subprocess backend applies rlimits,
CPU affinity, a wall-clock kill over the whole process group, stream tail
capture, and (when running as root) drops to an unprivileged uid and
detaches the network namespace when execution-phase network is disallowed.
A container backend covers deployments that need full filesystem isolation;
the subprocess backend cannot stop a script from *reading* outside the
workspace, only from modifying the mirror or escaping its limits.

Script failures are never exceptions: every run produces a RunTrace and the
debug loop treats failures as data.
"""

from __future__ import annotations

import ctypes
import logging
import os
import shutil
import signal
import stat
import subprocess
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Protocol

from .errors import AdmissionError, SandboxBackendError
from .generation import (
    EXAMPLE_FILENAME,
    MANIFEST_FILENAME,
    METADATA_FILENAME,
    RUN_SCRIPT_FILENAME,
    ExampleBundle,
    metadata_to_dict,
    write_bundle_dir,
)
from .ingest import WorkingCopy

logger = logging.getLogger(__name__)

# Instrumentation contract shared with generation prompts.
LOG_FILENAME = "run.log"
RESULTS_FILENAME = "results.json"
OUTPUT_DIRNAME = "output"

GRACE_SECONDS = 2.0
DEFAULT_STREAM_CAP_BYTES = 64 * 1024

SANDBOX_UID = 65534  # nobody
SANDBOX_GID = 65534

CLONE_NEWNET = 0x40000000

MIB = 1024 * 1024


@dataclass(frozen=True)
class SandboxLimits:
    wall_clock_cap: float = 1800.0
    cpu_cores: int = 2
    ram_mib: int = 2048
    disk_mib: int = 1024
    network_allowed: bool = True

    def __post_init__(self) -> None:
        if self.wall_clock_cap <= 0:
            raise ValueError("wall_clock_cap must be positive")
        for name in ("cpu_cores", "ram_mib", "disk_mib"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class RunTrace:
    exit_status: int | str
    wall_time: float
    stdout_tail: str
    stderr_tail: str
    log_entries: list[tuple[datetime | None, str]] = field(default_factory=list)
    results_document: dict | list | None = None
    produced_files: list[tuple[str, int]] = field(default_factory=list)
    truncated: bool = False

    @property
    def succeeded_exit(self) -> bool:
        return self.exit_status == 0


@dataclass
class Workspace:
    root: Path
    repo_dir: Path
    run_dir: Path
    output_dir: Path
    bundle: ExampleBundle

    def cleanup(self) -> None:
        _make_tree_writable(self.root)
        shutil.rmtree(self.root, ignore_errors=True)


def _make_tree_writable(root: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(root):
        for name in dirnames + filenames:
            try:
                os.chmod(Path(dirpath) / name, 0o755)
            except OSError:
                pass


def prepare_workspace(
    bundle: ExampleBundle,
    copy: WorkingCopy,
    dest: str | Path,
    *,
    limits: SandboxLimits,
    machine_gpus: int = 0,
) -> Workspace:
    """Build the execution workspace: repo mirror, bundle files, output dir.

    Admission rejects bundles whose declared resources exceed the machine
    caps before anything is copied.
    """
    resources = bundle.metadata.resources
    if resources.gpus > machine_gpus:
        raise AdmissionError(
            f"bundle requests {resources.gpus} GPU(s), machine has {machine_gpus}"
        )
    if resources.cpu_cores > limits.cpu_cores:
        raise AdmissionError(
            f"bundle requests {resources.cpu_cores} cores, cap is {limits.cpu_cores}"
        )
    if resources.ram_mib > limits.ram_mib:
        raise AdmissionError(
            f"bundle requests {resources.ram_mib} MiB RAM, cap is {limits.ram_mib}"
        )
    if resources.disk_mib > limits.disk_mib:
        raise AdmissionError(
            f"bundle requests {resources.disk_mib} MiB disk, cap is {limits.disk_mib}"
        )

    root = Path(dest)
    repo_dir = root / "repo"
    run_dir = root / "run"
    output_dir = run_dir / OUTPUT_DIRNAME
    root.mkdir(parents=True, exist_ok=True)
    os.chmod(root, 0o711)

    shutil.copytree(copy.root_path, repo_dir, symlinks=False)
    # Mirror is read-only: mode bits stop non-root writers, and the
    # subprocess backend drops privileges when running as root.
    for dirpath, dirnames, filenames in os.walk(repo_dir, topdown=False):
        for name in filenames:
            os.chmod(Path(dirpath) / name, 0o444)
        for name in dirnames:
            os.chmod(Path(dirpath) / name, 0o555)
    os.chmod(repo_dir, 0o555)

    run_dir.mkdir()
    write_bundle_dir(bundle, run_dir)
    output_dir.mkdir()
    for name in ("home", "tmp"):
        scratch = root / name
        scratch.mkdir()
        os.chmod(scratch, 0o777)
    os.chmod(run_dir, 0o777)
    os.chmod(output_dir, 0o777)
    for name in (EXAMPLE_FILENAME, MANIFEST_FILENAME, RUN_SCRIPT_FILENAME, METADATA_FILENAME):
        os.chmod(run_dir / name, 0o644)

    return Workspace(
        root=root,
        repo_dir=repo_dir,
        run_dir=run_dir,
        output_dir=output_dir,
        bundle=bundle,
    )


class _TailBuffer:
    """Bounded byte buffer keeping the most recent output."""

    def __init__(self, cap: int):
        self.cap = cap
        self._chunks: list[bytes] = []
        self._size = 0
        self.truncated = False

    def feed(self, data: bytes) -> None:
        self._chunks.append(data)
        self._size += len(data)
        while self._size > self.cap:
            self.truncated = True
            overflow = self._size - self.cap
            head = self._chunks[0]
            if len(head) <= overflow:
                self._chunks.pop(0)
                self._size -= len(head)
            else:
                self._chunks[0] = head[overflow:]
                self._size -= overflow

    def text(self) -> str:
        return b"".join(self._chunks).decode("utf-8", errors="replace")


def _drain(pipe, buffer: _TailBuffer) -> None:
    try:
        while True:
            chunk = pipe.read(8192)
            if not chunk:
                break
            buffer.feed(chunk)
    except (OSError, ValueError):
        pass
    finally:
        try:
            pipe.close()
        except OSError:
            pass


def _unshare_net() -> bool:
    try:
        libc = ctypes.CDLL(None, use_errno=True)
        return libc.unshare(CLONE_NEWNET) == 0
    except Exception:
        return False


def _others_can_traverse(run_dir: Path) -> bool:
    """Whether an unprivileged uid can reach and use the run directory."""
    path = run_dir.resolve()
    if not (path.stat().st_mode & 0o007) == 0o007:
        return False
    for ancestor in path.parents:
        if not ancestor.stat().st_mode & stat.S_IXOTH:
            return False
    return True


class IsolationBackend(Protocol):
    def run(self, workspace: Workspace, limits: SandboxLimits) -> "RawRun": ...


@dataclass
class RawRun:
    exit_status: int | str
    wall_time: float
    stdout_tail: str
    stderr_tail: str
    streams_truncated: bool


class SubprocessBackend:
    """Confined plain-subprocess isolation (tests, CI, container-less hosts).

    drop_privileges=None means auto: drop to the sandbox uid when running as
    root and the workspace is reachable by that uid.
    """

    def __init__(
        self,
        *,
        drop_privileges: bool | None = None,
        stream_cap_bytes: int = DEFAULT_STREAM_CAP_BYTES,
        sandbox_uid: int = SANDBOX_UID,
        sandbox_gid: int = SANDBOX_GID,
    ):
        self.drop_privileges = drop_privileges
        self.stream_cap_bytes = stream_cap_bytes
        self.sandbox_uid = sandbox_uid
        self.sandbox_gid = sandbox_gid

    def _should_drop(self, workspace: Workspace) -> bool:
        if self.drop_privileges is False:
            return False
        if os.geteuid() != 0:
            if self.drop_privileges:
                logger.warning("cannot drop privileges without root; continuing")
            return False
        if not _others_can_traverse(workspace.run_dir):
            if self.drop_privileges:
                logger.warning(
                    "workspace %s not reachable by sandbox uid; running without "
                    "privilege drop",
                    workspace.root,
                )
            return False
        return True

    def _build_env(self, workspace: Workspace) -> dict[str, str]:
        env = {
            "HOME": str(workspace.root / "home"),
            "TMPDIR": str(workspace.root / "tmp"),
            "REPO_DIR": str(workspace.repo_dir),
            "OUTPUT_DIR": str(workspace.output_dir),
            "PYTHONDONTWRITEBYTECODE": "1",
        }
        for key in ("PATH", "LANG", "LC_ALL"):
            value = os.environ.get(key)
            if value:
                env[key] = value
        return env

    def _preexec(self, limits: SandboxLimits, drop: bool):
        import resource

        ram_bytes = limits.ram_mib * MIB
        fsize_bytes = limits.disk_mib * MIB
        cpu_seconds = int(limits.wall_clock_cap * limits.cpu_cores) + 5
        network_allowed = limits.network_allowed
        cpu_cores = limits.cpu_cores
        uid, gid = self.sandbox_uid, self.sandbox_gid

        def inner() -> None:
            resource.setrlimit(resource.RLIMIT_AS, (ram_bytes, ram_bytes))
            resource.setrlimit(resource.RLIMIT_FSIZE, (fsize_bytes, fsize_bytes))
            resource.setrlimit(resource.RLIMIT_CPU, (cpu_seconds, cpu_seconds))
            try:
                available = sorted(os.sched_getaffinity(0))
                os.sched_setaffinity(0, set(available[:cpu_cores]))
            except OSError:
                pass
            if not network_allowed and os.geteuid() == 0:
                _unshare_net()
            if drop:
                os.setgid(gid)
                os.setgroups([])
                os.setuid(uid)

        return inner

    def run(self, workspace: Workspace, limits: SandboxLimits) -> RawRun:
        drop = self._should_drop(workspace)
        if not limits.network_allowed and not (drop or os.geteuid() == 0):
            logger.warning("network isolation needs root; running without it")

        started = time.monotonic()
        try:
            process = subprocess.Popen(
                ["bash", RUN_SCRIPT_FILENAME],
                cwd=workspace.run_dir,
                env=self._build_env(workspace),
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
                preexec_fn=self._preexec(limits, drop),
            )
        except OSError as exc:
            raise SandboxBackendError(f"cannot spawn sandbox process: {exc}") from exc

        stdout_buffer = _TailBuffer(self.stream_cap_bytes)
        stderr_buffer = _TailBuffer(self.stream_cap_bytes)
        readers = [
            threading.Thread(target=_drain, args=(process.stdout, stdout_buffer), daemon=True),
            threading.Thread(target=_drain, args=(process.stderr, stderr_buffer), daemon=True),
        ]
        for reader in readers:
            reader.start()

        killed_for_timeout = False
        try:
            process.wait(timeout=limits.wall_clock_cap)
        except subprocess.TimeoutExpired:
            killed_for_timeout = True
            _kill_group(process.pid)
            process.wait()
        wall_time = time.monotonic() - started
        _kill_group(process.pid)  # sweep stragglers in the group
        for reader in readers:
            reader.join(timeout=GRACE_SECONDS)

        if killed_for_timeout:
            exit_status: int | str = "killed:timeout"
        elif process.returncode in (-signal.SIGXCPU, -signal.SIGXFSZ):
            exit_status = "killed:resource"
        else:
            exit_status = process.returncode
        return RawRun(
            exit_status=exit_status,
            wall_time=wall_time,
            stdout_tail=stdout_buffer.text(),
            stderr_tail=stderr_buffer.text(),
            streams_truncated=stdout_buffer.truncated or stderr_buffer.truncated,
        )


def _kill_group(pid: int) -> None:
    try:
        os.killpg(pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


class ContainerBackend:
    """OS-container isolation via the docker CLI (production deployments)."""

    def __init__(
        self,
        image: str = "ubuntu:22.04",
        *,
        docker_binary: str = "docker",
        stream_cap_bytes: int = DEFAULT_STREAM_CAP_BYTES,
    ):
        self.image = image
        self.docker_binary = docker_binary
        self.stream_cap_bytes = stream_cap_bytes

    def run(self, workspace: Workspace, limits: SandboxLimits) -> RawRun:
        if shutil.which(self.docker_binary) is None:
            raise SandboxBackendError(f"{self.docker_binary} not found on PATH")
        command = [
            self.docker_binary,
            "run",
            "--rm",
            "--network",
            "bridge" if limits.network_allowed else "none",
            "--cpus",
            str(limits.cpu_cores),
            "--memory",
            f"{limits.ram_mib}m",
            "-v",
            f"{workspace.repo_dir}:/repo:ro",
            "-v",
            f"{workspace.run_dir}:/work",
            "-w",
            "/work",
            "-e",
            "REPO_DIR=/repo",
            "-e",
            f"OUTPUT_DIR=/work/{OUTPUT_DIRNAME}",
            self.image,
            "bash",
            RUN_SCRIPT_FILENAME,
        ]
        started = time.monotonic()
        try:
            completed = subprocess.run(
                command,
                capture_output=True,
                timeout=limits.wall_clock_cap,
            )
            exit_status: int | str = completed.returncode
            stdout, stderr = completed.stdout, completed.stderr
        except subprocess.TimeoutExpired as exc:
            exit_status = "killed:timeout"
            stdout = exc.stdout or b""
            stderr = exc.stderr or b""
        wall_time = time.monotonic() - started
        cap = self.stream_cap_bytes
        return RawRun(
            exit_status=exit_status,
            wall_time=wall_time,
            stdout_tail=stdout[-cap:].decode("utf-8", errors="replace"),
            stderr_tail=stderr[-cap:].decode("utf-8", errors="replace"),
            streams_truncated=len(stdout) > cap or len(stderr) > cap,
        )


def parse_log_file(path: Path) -> list[tuple[datetime | None, str]]:
    """Parse 'ISO-timestamp<TAB>message' lines; malformed lines kept raw."""
    if not path.is_file():
        return []
    entries: list[tuple[datetime | None, str]] = []
    for line in path.read_text(errors="replace").splitlines():
        timestamp_text, _, message = line.partition("\t")
        if _:
            try:
                entries.append((datetime.fromisoformat(timestamp_text), message))
                continue
            except ValueError:
                pass
        entries.append((None, line))
    return entries


def collect_trace(workspace: Workspace) -> dict:
    """Harvest instrumentation from a finished run."""
    import json

    log_entries = parse_log_file(workspace.run_dir / LOG_FILENAME)

    results_document = None
    results_path = workspace.run_dir / RESULTS_FILENAME
    if results_path.is_file():
        try:
            results_document = json.loads(results_path.read_text())
        except (json.JSONDecodeError, OSError) as exc:
            logger.warning("results document unparseable: %s", exc)

    produced: list[tuple[str, int]] = []
    if workspace.output_dir.is_dir():
        for dirpath, _dirnames, filenames in os.walk(workspace.output_dir):
            for name in filenames:
                file_path = Path(dirpath) / name
                produced.append(
                    (
                        file_path.relative_to(workspace.output_dir).as_posix(),
                        file_path.stat().st_size,
                    )
                )
    produced.sort()
    return {
        "log_entries": log_entries,
        "results_document": results_document,
        "produced_files": produced,
    }


def execute(
    workspace: Workspace,
    limits: SandboxLimits,
    backend: IsolationBackend | None = None,
) -> RunTrace:
    """Run the bundle's run script and capture the instrumented outputs.

    Never raises on script misbehavior; only SandboxBackendError (backend
    unavailable) escapes.
    """
    if backend is None:
        backend = SubprocessBackend()
    raw = backend.run(workspace, limits)
    harvest = collect_trace(workspace)
    killed = isinstance(raw.exit_status, str)
    return RunTrace(
        exit_status=raw.exit_status,
        wall_time=raw.wall_time,
        stdout_tail=raw.stdout_tail,
        stderr_tail=raw.stderr_tail,
        log_entries=harvest["log_entries"],
        results_document=harvest["results_document"],
        produced_files=harvest["produced_files"],
        truncated=raw.streams_truncated or killed,
    )
