"""Toolchain backbone: status database, FIFO message queue, and worker pool.

One scenario-generator thread claims pending jobs from the database and feeds
serialized scenario specs into the queue; generator workers consume the queue
(synthesize, quality-gate, persist or delete), and annotator workers fit
sequences the analyser passed. Both services are file-backed (append-only
journals replayed on open) with an in-memory mode for tests, and safe under
concurrent access from any number of worker threads. Delivery is
at-least-once with idempotent workers: re-processing a sequence rewrites the
same bytes, keyed by sequence id.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .body import KinematicTree, default_tree
from .camera import CameraDistribution, default_distribution
from .engine import (
    ActionCatalog,
    ScenarioSpec,
    SubjectCatalog,
    default_actions,
    default_subjects,
    generate_scenario,
    save_sequence,
    load_sequence,
    synthesize_sequence,
)
from .fitting import FitConfig, fit_sequence, save_fit_result
from .occlusion import default_scene
from .quality import Thresholds, quality_gate


class JobStatus(Enum):
    PENDING = "PENDING"
    QUEUED = "QUEUED"
    GENERATED = "GENERATED"
    ANALYSED = "ANALYSED"
    ANALYSIS_FAILED = "ANALYSIS_FAILED"
    ANNOTATED = "ANNOTATED"
    ANNOTATION_FAILED = "ANNOTATION_FAILED"


FAILED_STATUSES = frozenset({JobStatus.ANALYSIS_FAILED, JobStatus.ANNOTATION_FAILED})

LEGAL_EDGES = frozenset({
    (JobStatus.PENDING, JobStatus.QUEUED),
    (JobStatus.QUEUED, JobStatus.GENERATED),
    (JobStatus.GENERATED, JobStatus.ANALYSED),
    (JobStatus.GENERATED, JobStatus.ANALYSIS_FAILED),
    (JobStatus.ANALYSED, JobStatus.ANNOTATED),
    (JobStatus.ANALYSED, JobStatus.ANNOTATION_FAILED),
    (JobStatus.ANALYSIS_FAILED, JobStatus.QUEUED),
    (JobStatus.ANNOTATION_FAILED, JobStatus.QUEUED),
})


class IllegalTransition(ValueError):
    """Requested status edge is not in the transition graph."""


class LeaseError(ValueError):
    """Ack or nack against an unknown, stolen, or expired lease."""


class SimulatedCrash(RuntimeError):
    """Raised by the crash-injection hook; the store refuses all writes after."""


@dataclass
class JobRecord:
    sequence_id: str
    status: JobStatus
    attempts: int = 0
    last_error: str | None = None
    artifact: str | None = None
    timestamps: list = field(default_factory=list)  # (status, unix time) pairs


class JobStore:
    """Job state machine with an append-only transition log.

    The log is the authoritative persistence: opening a store replays it.
    All mutations are atomic under one lock, so any number of worker threads
    may claim and update concurrently. Annotation claims use a volatile (not
    persisted) lease set because failed-over ANALYSED jobs must become
    claimable again after a crash.
    """

    def __init__(self, path: str | Path | None = None, max_attempts: int = 3,
                 clock=time.time, crash_after_transitions: int | None = None):
        self._lock = threading.Lock()
        self._jobs: dict[str, JobRecord] = {}
        self._fit_leases: set[str] = set()
        self._clock = clock
        self.max_attempts = max_attempts
        self._crash_after = crash_after_transitions
        self._transitions = 0
        self._dead = False
        self._path = Path(path) if path is not None else None
        self._fh = None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            if self._path.exists():
                self._replay()
            self._fh = open(self._path, "a")

    def _replay(self):
        for line in self._path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            job_id = rec["id"]
            to = JobStatus(rec["to"])
            job = self._jobs.get(job_id)
            if job is None:
                job = JobRecord(sequence_id=job_id, status=to)
                self._jobs[job_id] = job
            job.status = to
            job.attempts = rec.get("attempt", job.attempts)
            job.last_error = rec.get("error")
            if rec.get("artifact"):
                job.artifact = rec["artifact"]
            job.timestamps.append((to.value, rec["ts"]))

    def _append(self, job_id, from_status, to_status, attempt, error=None, artifact=None):
        self._transitions += 1
        if self._fh is not None:
            rec = {
                "ts": self._clock(),
                "id": job_id,
                "from": from_status.value if from_status else None,
                "to": to_status.value,
                "attempt": attempt,
            }
            if error:
                rec["error"] = error
            if artifact:
                rec["artifact"] = artifact
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()
        if self._crash_after is not None and self._transitions >= self._crash_after:
            self._dead = True
            raise SimulatedCrash(f"injected crash after {self._transitions} transitions")

    def _check_alive(self):
        if self._dead:
            raise SimulatedCrash("store is dead (simulated crash)")

    def add_jobs(self, ids) -> list[str]:
        """Create PENDING records; existing ids are left untouched (resume)."""
        created = []
        with self._lock:
            self._check_alive()
            for job_id in ids:
                if job_id in self._jobs:
                    continue
                job = JobRecord(sequence_id=job_id, status=JobStatus.PENDING)
                job.timestamps.append((JobStatus.PENDING.value, self._clock()))
                self._jobs[job_id] = job
                self._append(job_id, None, JobStatus.PENDING, 0)
                created.append(job_id)
        return created

    def claim_pending(self, n: int) -> list[str]:
        """Atomically move up to n claimable jobs to QUEUED.

        Claimable: PENDING, or a failed status with attempts < max_attempts.
        No id is ever handed to two callers.
        """
        claimed = []
        with self._lock:
            self._check_alive()
            for job_id in sorted(self._jobs):
                if len(claimed) >= n:
                    break
                job = self._jobs[job_id]
                claimable = job.status is JobStatus.PENDING or (
                    job.status in FAILED_STATUSES and job.attempts < self.max_attempts)
                if not claimable:
                    continue
                from_status = job.status
                job.status = JobStatus.QUEUED
                job.attempts += 1
                job.timestamps.append((JobStatus.QUEUED.value, self._clock()))
                self._append(job_id, from_status, JobStatus.QUEUED, job.attempts)
                claimed.append(job_id)
        return claimed

    def claim_analysed(self, n: int) -> list[str]:
        """Lease up to n ANALYSED jobs for annotation (volatile, per-process)."""
        claimed = []
        with self._lock:
            self._check_alive()
            for job_id in sorted(self._jobs):
                if len(claimed) >= n:
                    break
                job = self._jobs[job_id]
                if job.status is JobStatus.ANALYSED and job_id not in self._fit_leases:
                    self._fit_leases.add(job_id)
                    claimed.append(job_id)
        return claimed

    def release_analysed(self, job_id: str) -> None:
        with self._lock:
            self._fit_leases.discard(job_id)

    def update_status(self, job_id: str, new_status: JobStatus, error: str | None = None,
                      artifact: str | None = None) -> None:
        """Persist one legal transition atomically; illegal edges are rejected
        and leave the record unchanged."""
        with self._lock:
            self._check_alive()
            job = self._jobs.get(job_id)
            if job is None:
                raise KeyError(f"unknown job {job_id}")
            edge = (job.status, new_status)
            if edge not in LEGAL_EDGES:
                raise IllegalTransition(f"{job.status.value} -> {new_status.value} for {job_id}")
            from_status = job.status
            job.status = new_status
            job.last_error = error
            if artifact:
                job.artifact = artifact
            job.timestamps.append((new_status.value, self._clock()))
            self._fit_leases.discard(job_id)
            self._append(job_id, from_status, new_status, job.attempts, error, artifact)

    def status(self, job_id: str) -> JobStatus:
        with self._lock:
            return self._jobs[job_id].status

    def record(self, job_id: str) -> JobRecord:
        with self._lock:
            return self._jobs[job_id]

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._jobs)

    def counts(self) -> dict[str, int]:
        with self._lock:
            out = {status.value: 0 for status in JobStatus}
            for job in self._jobs.values():
                out[job.status.value] += 1
            return out

    def is_terminal(self, job: JobRecord) -> bool:
        if job.status is JobStatus.ANNOTATED:
            return True
        return job.status in FAILED_STATUSES and job.attempts >= self.max_attempts

    def all_terminal(self) -> bool:
        with self._lock:
            return all(self.is_terminal(job) for job in self._jobs.values())

    def total(self) -> int:
        with self._lock:
            return len(self._jobs)

    def snapshot(self, path: str | Path) -> None:
        """Convenience state dump; the transition log stays authoritative."""
        with self._lock:
            doc = {
                "format": "synthpose-jobs-snapshot",
                "version": 1,
                "jobs": {
                    job_id: {
                        "status": job.status.value,
                        "attempts": job.attempts,
                        "error": job.last_error,
                        "artifact": job.artifact,
                    }
                    for job_id, job in sorted(self._jobs.items())
                },
            }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def verify_transition_log(path: str | Path) -> dict[str, str]:
    """Replay a transition log, checking every edge is legal and per-job
    timestamps are monotone. Returns the final status per job id."""
    statuses: dict[str, JobStatus] = {}
    last_ts: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        job_id = rec["id"]
        to = JobStatus(rec["to"])
        claimed_from = rec.get("from")
        if job_id not in statuses:
            if to is not JobStatus.PENDING or claimed_from is not None:
                raise ValueError(f"line {lineno}: job {job_id} must start at PENDING")
        else:
            current = statuses[job_id]
            if claimed_from != current.value:
                raise ValueError(
                    f"line {lineno}: job {job_id} log claims from={claimed_from}, "
                    f"replay says {current.value}")
            if (current, to) not in LEGAL_EDGES:
                raise ValueError(f"line {lineno}: illegal edge {current.value} -> {to.value}")
        if rec["ts"] < last_ts.get(job_id, float("-inf")):
            raise ValueError(f"line {lineno}: timestamps for {job_id} not monotone")
        statuses[job_id] = to
        last_ts[job_id] = rec["ts"]
    return {job_id: status.value for job_id, status in statuses.items()}


# ---------------------------------------------------------------------------
# FIFO queue
# ---------------------------------------------------------------------------

@dataclass
class QueueMessage:
    payload: str
    seq_no: int
    delivery_count: int
    lease_deadline: float
    token: int


class FifoQueue:
    """Persistent FIFO queue with leases (at-least-once delivery).

    Dequeue leases the lowest-sequence visible message; ack deletes it; nack
    or lease expiry makes it visible again. Sequence numbers are strictly
    increasing, so a single consumer that never nacks observes exact FIFO
    order. The journal is replayed on open; lease deadlines are wall-clock,
    so a restarted process sees in-flight messages reappear once their leases
    lapse.
    """

    def __init__(self, path: str | Path | None = None, clock=time.time):
        self._lock = threading.Lock()
        self._clock = clock
        self._entries: dict[int, dict] = {}
        self._next_seq = 0
        self._next_token = 0
        self._path = Path(path) if path is not None else None
        self._fh = None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            if self._path.exists():
                self._replay()
            self._fh = open(self._path, "a")

    def _replay(self):
        for line in self._path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            op = rec["op"]
            if op == "put":
                seq = rec["seq"]
                self._entries[seq] = {
                    "payload": rec["payload"], "delivery_count": 0,
                    "leased_until": 0.0, "token": None, "acked": False,
                }
                self._next_seq = max(self._next_seq, seq + 1)
            elif op == "lease":
                entry = self._entries[rec["seq"]]
                entry["delivery_count"] += 1
                entry["leased_until"] = rec["deadline"]
                entry["token"] = rec["token"]
                self._next_token = max(self._next_token, rec["token"] + 1)
            elif op == "nack":
                self._entries[rec["seq"]]["leased_until"] = 0.0
            elif op in ("ack", "drop"):
                self._entries[rec["seq"]]["acked"] = True

    def _log(self, rec):
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def enqueue(self, payload: str) -> int:
        with self._lock:
            seq = self._next_seq
            self._next_seq += 1
            self._entries[seq] = {
                "payload": payload, "delivery_count": 0,
                "leased_until": 0.0, "token": None, "acked": False,
            }
            self._log({"op": "put", "seq": seq, "payload": payload, "ts": self._clock()})
            return seq

    def dequeue(self, lease_seconds: float = 30.0) -> QueueMessage | None:
        """Lease the oldest visible message, or None if none is visible."""
        with self._lock:
            now = self._clock()
            for seq in sorted(self._entries):
                entry = self._entries[seq]
                if entry["acked"] or entry["leased_until"] > now:
                    continue
                token = self._next_token
                self._next_token += 1
                deadline = now + lease_seconds
                entry["delivery_count"] += 1
                entry["leased_until"] = deadline
                entry["token"] = token
                self._log({"op": "lease", "seq": seq, "token": token,
                           "deadline": deadline, "ts": now})
                return QueueMessage(payload=entry["payload"], seq_no=seq,
                                    delivery_count=entry["delivery_count"],
                                    lease_deadline=deadline, token=token)
        return None

    def _validate_lease(self, msg: QueueMessage):
        entry = self._entries.get(msg.seq_no)
        if entry is None or entry["acked"]:
            raise LeaseError(f"message {msg.seq_no} unknown or already acked")
        if entry["token"] != msg.token:
            raise LeaseError(f"lease token for message {msg.seq_no} superseded")
        if self._clock() >= entry["leased_until"]:
            raise LeaseError(f"lease for message {msg.seq_no} expired")
        return entry

    def ack(self, msg: QueueMessage) -> None:
        with self._lock:
            entry = self._validate_lease(msg)
            entry["acked"] = True
            self._log({"op": "ack", "seq": msg.seq_no, "token": msg.token,
                       "ts": self._clock()})

    def nack(self, msg: QueueMessage) -> None:
        """Return a leased message to the queue immediately."""
        with self._lock:
            entry = self._validate_lease(msg)
            entry["leased_until"] = 0.0
            self._log({"op": "nack", "seq": msg.seq_no, "token": msg.token,
                       "ts": self._clock()})

    def drain(self, seq_no: int) -> None:
        """Administratively delete a message (startup reconciliation only)."""
        with self._lock:
            entry = self._entries.get(seq_no)
            if entry is not None and not entry["acked"]:
                entry["acked"] = True
                self._log({"op": "drop", "seq": seq_no, "ts": self._clock()})

    def unacked(self) -> list[tuple[int, str]]:
        with self._lock:
            return [(seq, e["payload"]) for seq, e in sorted(self._entries.items())
                    if not e["acked"]]

    def pending_count(self) -> int:
        with self._lock:
            now = self._clock()
            return sum(1 for e in self._entries.values()
                       if not e["acked"] and e["leased_until"] <= now)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# pipeline orchestration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    sequences: int
    out_dir: str | Path
    gen_workers: int = 1
    fit_workers: int = 1
    seed: int = 0
    max_attempts: int = 3
    lease_seconds: float = 30.0
    nack_probability: float = 0.0          # chaos injection for tests
    crash_after_transitions: int | None = None  # simulated-crash hook
    thresholds: Thresholds = field(default_factory=Thresholds)
    fit: FitConfig = field(default_factory=FitConfig)
    tree: KinematicTree | None = None
    scene: list | None = None
    subjects: SubjectCatalog | None = None
    actions: ActionCatalog | None = None
    camera_dist: CameraDistribution | None = None
    capsule_radii: object = None


@dataclass
class PipelineSummary:
    counts: dict
    total: int
    crashed: bool
    wall_seconds: float
    out_dir: str

    @property
    def all_terminal(self) -> bool:
        return not self.crashed and self.counts.get("PENDING", 0) == 0


def job_id_for(index: int) -> str:
    return f"seq_{index:06d}"


def scenario_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


class _Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out_dir)
        (self.out / "sequences").mkdir(parents=True, exist_ok=True)
        (self.out / "annotations").mkdir(parents=True, exist_ok=True)
        self.tree = config.tree or default_tree()
        self.scene = config.scene if config.scene is not None else default_scene()
        self.subjects = config.subjects or default_subjects()
        self.actions = config.actions or default_actions(self.tree.joint_count)
        self.camera_dist = config.camera_dist or default_distribution()
        self.store = JobStore(self.out / "db" / "transitions.jsonl",
                              max_attempts=config.max_attempts,
                              crash_after_transitions=config.crash_after_transitions)
        self.queue = FifoQueue(self.out / "queue" / "journal.jsonl")
        self.stop = threading.Event()
        self.crashed = threading.Event()
        self.spec_lock = threading.Lock()

    # -- job identity ------------------------------------------------------

    def spec_for(self, job_id: str) -> ScenarioSpec:
        index = int(job_id.rsplit("_", 1)[1])
        return generate_scenario(scenario_seed(self.config.seed, index),
                                 self.subjects, self.actions, sequence_id=job_id)

    def sequence_path(self, job_id: str) -> Path:
        return self.out / "sequences" / f"{job_id}.json"

    def annotation_path(self, job_id: str) -> Path:
        return self.out / "annotations" / f"{job_id}.json"

    # -- startup -----------------------------------------------------------

    def seed_jobs(self):
        self.store.add_jobs(job_id_for(i) for i in range(self.config.sequences))

    def reconcile(self):
        """Resume hygiene: one live message per QUEUED job, none for others."""
        seen: set[str] = set()
        for seq_no, payload in self.queue.unacked():
            job_id = json.loads(payload)["sequence_id"]
            try:
                status = self.store.status(job_id)
            except KeyError:
                status = None
            if status is not JobStatus.QUEUED or job_id in seen:
                self.queue.drain(seq_no)
            else:
                seen.add(job_id)
        for job_id in self.store.ids():
            if self.store.status(job_id) is JobStatus.QUEUED and job_id not in seen:
                spec = self.spec_for(job_id)
                self.queue.enqueue(json.dumps(spec.to_dict(), sort_keys=True))

    # -- workers -----------------------------------------------------------

    def scenario_worker(self):
        spec_file = self.out / "specs.jsonl"
        try:
            with open(spec_file, "a") as fh:
                while not self.stop.is_set():
                    ids = self.store.claim_pending(8)
                    if not ids:
                        if self.store.all_terminal():
                            return
                        time.sleep(0.002)
                        continue
                    for job_id in ids:
                        spec = self.spec_for(job_id)
                        line = json.dumps(spec.to_dict(), sort_keys=True)
                        fh.write(line + "\n")
                        fh.flush()
                        self.queue.enqueue(line)
        except SimulatedCrash:
            self.crashed.set()
            self.stop.set()

    def generator_worker(self, worker_index: int):
        rng = np.random.default_rng([self.config.seed, 0xC4A0, worker_index])
        try:
            while not self.stop.is_set():
                msg = self.queue.dequeue(self.config.lease_seconds)
                if msg is None:
                    if self.store.all_terminal():
                        return
                    time.sleep(0.002)
                    continue
                if self.config.nack_probability > 0 and \
                        rng.random() < self.config.nack_probability:
                    try:
                        self.queue.nack(msg)
                    except LeaseError:
                        pass
                    continue
                self.process_generation(msg)
        except SimulatedCrash:
            self.crashed.set()
            self.stop.set()

    def process_generation(self, msg: QueueMessage):
        spec = ScenarioSpec.from_dict(json.loads(msg.payload))
        job_id = spec.sequence_id
        status = self.store.status(job_id)
        if status not in (JobStatus.QUEUED, JobStatus.GENERATED):
            self.queue.ack(msg)  # stale redelivery; work already finished
            return
        try:
            seq = synthesize_sequence(spec, self.tree, self.scene, self.subjects,
                                      self.actions, self.camera_dist,
                                      self.config.capsule_radii)
            path = self.sequence_path(job_id)
            save_sequence(seq, path)
            if self.store.status(job_id) is JobStatus.QUEUED:
                self.store.update_status(job_id, JobStatus.GENERATED,
                                         artifact=str(path))
            report = quality_gate(seq, self.config.thresholds)
            if report.passed:
                self.store.update_status(job_id, JobStatus.ANALYSED,
                                         artifact=str(path))
            else:
                path.unlink(missing_ok=True)  # failed data is deleted
                reasons = ",".join(sorted(r.value for r in report.reasons))
                self.store.update_status(job_id, JobStatus.ANALYSIS_FAILED,
                                         error=reasons)
        except SimulatedCrash:
            raise
        except Exception as exc:  # worker failure becomes a job failure
            self.sequence_path(job_id).unlink(missing_ok=True)
            try:
                if self.store.status(job_id) is JobStatus.QUEUED:
                    self.store.update_status(job_id, JobStatus.GENERATED)
                self.store.update_status(job_id, JobStatus.ANALYSIS_FAILED,
                                         error=f"{type(exc).__name__}: {exc}")
            except (IllegalTransition, KeyError):
                pass
        try:
            self.queue.ack(msg)
        except LeaseError:
            # lease lapsed mid-processing: the message redelivers, and since
            # the work is idempotent the redelivery is harmless
            pass

    def annotator_worker(self, worker_index: int):
        try:
            while not self.stop.is_set():
                ids = self.store.claim_analysed(1)
                if not ids:
                    if self.store.all_terminal():
                        return
                    time.sleep(0.002)
                    continue
                job_id = ids[0]
                try:
                    seq = load_sequence(self.sequence_path(job_id))
                    result = fit_sequence(seq, self.tree, self.config.fit)
                    path = self.annotation_path(job_id)
                    save_fit_result(result, path, self.config.fit)
                    self.store.update_status(job_id, JobStatus.ANNOTATED,
                                             artifact=str(path))
                except SimulatedCrash:
                    raise
                except Exception as exc:
                    try:
                        self.store.update_status(
                            job_id, JobStatus.ANNOTATION_FAILED,
                            error=f"{type(exc).__name__}: {exc}")
                    except (IllegalTransition, KeyError):
                        self.store.release_analysed(job_id)
        except SimulatedCrash:
            self.crashed.set()
            self.stop.set()

    # -- run ---------------------------------------------------------------

    def run(self) -> PipelineSummary:
        start = time.perf_counter()
        try:
            self.seed_jobs()
            self.reconcile()
        except SimulatedCrash:
            self.crashed.set()
        threads = []
        if not self.crashed.is_set():
            threads.append(threading.Thread(target=self.scenario_worker, name="scenario"))
            for i in range(self.config.gen_workers):
                threads.append(threading.Thread(target=self.generator_worker,
                                                args=(i,), name=f"gen-{i}"))
            for i in range(self.config.fit_workers):
                threads.append(threading.Thread(target=self.annotator_worker,
                                                args=(i,), name=f"fit-{i}"))
            for thread in threads:
                thread.start()
            while any(thread.is_alive() for thread in threads):
                if self.store.all_terminal() or self.crashed.is_set():
                    self.stop.set()
                for thread in threads:
                    thread.join(timeout=0.02)
        counts = self.store.counts()
        summary = PipelineSummary(
            counts=counts,
            total=self.store.total(),
            crashed=self.crashed.is_set(),
            wall_seconds=time.perf_counter() - start,
            out_dir=str(self.out),
        )
        if not self.crashed.is_set():
            self.store.snapshot(self.out / "db" / "jobs.json")
            (self.out / "summary.json").write_text(json.dumps({
                "counts": counts,
                "total": summary.total,
                "seed": self.config.seed,
                "sequences": self.config.sequences,
                "gen_workers": self.config.gen_workers,
                "fit_workers": self.config.fit_workers,
                "wall_seconds": summary.wall_seconds,
            }, indent=1, sort_keys=True))
        self.store.close()
        self.queue.close()
        return summary


def run_pipeline(config: PipelineConfig) -> PipelineSummary:
    """Run generation, analysis and annotation end to end.

    Spawns one scenario-generator thread, `gen_workers` synth/analyse workers
    consuming the FIFO queue, and `fit_workers` annotators; terminates when
    every job is terminal (ANNOTATED, or failed with attempts exhausted).
    Calling it again on the same output directory resumes: existing jobs and
    queue state are picked up, in-flight work is reconciled, and finished
    artifacts are not disturbed. A simulated crash (test hook) aborts all
    workers immediately; the summary reports crashed=True.
    """
    return _Pipeline(config).run()
