"""Timing, statistics, workload generation, and report emission.

Two experiment families at desk scale: a per-message overhead profile of
the full protocol flow against an RNG device, and disk workloads run
against the block device pair in plain and secured modes. Sequential
presets default to 64 MiB transfers; random presets to 4 MiB (scriptable
with --scale). All timing uses the monotonic high-resolution clock; an
optional cycle-counter hook can be supplied where the platform exposes
one and is reported as a separate unit.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
import random
import statistics
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

from scipy.stats import t as _student_t

from . import crypto, devices, wire
from .devices import (
    BLOCK_OPCODE,
    MODE_PLAIN,
    MODE_SECURED,
    SECTOR_SIZE,
    BlockDevice,
    BlockDeviceHost,
    LatencyModel,
    RngDevice,
    driver_init,
    rng_request,
)
from .errors import InsufficientSamples, SpdmError
from .requester import (
    MODE_ALL_AT_ONCE,
    MODE_ONE_BY_ONE,
    SESSION_CERT_DHE,
    SESSION_PSK,
    Requester,
    RequesterConfig,
)
from .responder import Responder, ResponderConfig, make_default_measurements
from .transport import LoopbackEndpoint, MmioChannel

DEFAULT_PSK_HINT = b"bench-psk"

# 7200 rpm: one half revolution averages 4.17 ms, worst case 8.33 ms.
ROT_LATENCY_7200RPM_MS = 8.33

UNIT_SECONDS = "seconds"
UNIT_BYTES_PER_S = "bytes/s"
UNIT_IOPS = "iops"
UNIT_CYCLES = "cycles"

# -- statistics ---------------------------------------------------------------


@dataclass
class SampleSet:
    values: list
    unit: str = UNIT_SECONDS


@dataclass(frozen=True)
class StatSummary:
    n: int
    mean: float
    sd: float
    ci95: float  # half-width: t(0.975, n-1) * sd / sqrt(n)


def t_quantile_975(df: int) -> float:
    return float(_student_t.ppf(0.975, df))


def summarize(samples: SampleSet) -> StatSummary:
    values = samples.values
    n = len(values)
    if n < 2:
        raise InsufficientSamples(f"need >= 2 samples, got {n}")
    mean = statistics.fmean(values)
    sd = statistics.stdev(values)
    ci95 = t_quantile_975(n - 1) * sd / math.sqrt(n)
    return StatSummary(n=n, mean=mean, sd=sd, ci95=ci95)


# -- reports ------------------------------------------------------------------


@dataclass
class ReportRow:
    label: str
    unit: str
    summary: StatSummary


@dataclass
class Report:
    metadata: dict
    rows: list = field(default_factory=list)
    partial: bool = False

    def add(self, label: str, samples: SampleSet) -> None:
        self.rows.append(ReportRow(label, samples.unit, summarize(samples)))

    def row(self, label: str) -> ReportRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "partial": self.partial,
            "rows": [
                {"label": r.label, "unit": r.unit, "n": r.summary.n,
                 "mean": r.summary.mean, "sd": r.summary.sd,
                 "ci95": r.summary.ci95}
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Report":
        report = cls(metadata=data["metadata"], partial=data["partial"])
        for r in data["rows"]:
            report.rows.append(ReportRow(
                r["label"], r["unit"],
                StatSummary(n=r["n"], mean=r["mean"], sd=r["sd"], ci95=r["ci95"])))
        return report


def render_report(report: Report, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "unit", "n", "mean", "sd", "ci95"])
        for r in report.rows:
            writer.writerow([r.label, r.unit, r.summary.n, repr(r.summary.mean),
                             repr(r.summary.sd), repr(r.summary.ci95)])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: Report, fmt: str, path) -> Path:
    """Bit-stable for fixed inputs: same report, same bytes."""
    path = Path(path)
    path.write_text(render_report(report, fmt))
    return path


def _base_metadata(topology: str, seed, fixtures: "BenchFixtures | None" = None) -> dict:
    meta = {
        "suite": "RSA-PSS-3072/ECDSA-P384/SHA-384/SECP384R1/AES-256-GCM/HKDF",
        "topology": topology,
        "seed": seed,
        "host": platform.platform(),
        "measurement_fixture": "5x128B",
    }
    if fixtures is not None:
        meta["responder_chain_bytes"] = len(fixtures.responder_chain.serialize())
        meta["requester_chain_bytes"] = len(fixtures.requester_chain.serialize())
    return meta


# -- fixtures -----------------------------------------------------------------


@dataclass
class BenchFixtures:
    responder_chain: crypto.CertificateChain
    responder_key: object
    requester_chain: crypto.CertificateChain
    requester_key: object
    psk_table: dict

    @classmethod
    def generate(cls, depth: int = 3) -> "BenchFixtures":
        rsp_chain, rsp_key = crypto.generate_test_chain("responder", depth=depth)
        req_chain, req_key = crypto.generate_test_chain("requester", depth=depth)
        return cls(rsp_chain, rsp_key, req_chain, req_key,
                   {DEFAULT_PSK_HINT: hashlib.sha256(b"bench-psk-secret").digest()})

    @classmethod
    def from_dir(cls, path) -> "BenchFixtures":
        path = Path(path)
        rsp_chain, rsp_key = crypto.load_chain_pem(
            path / "responder_chain.pem", path / "responder_key.pem")
        req_chain, req_key = crypto.load_chain_pem(
            path / "requester_chain.pem", path / "requester_key.pem")
        psk = {
            bytes.fromhex(hint): bytes.fromhex(secret)
            for hint, secret in json.loads((path / "psk.json").read_text()).items()
        }
        return cls(rsp_chain, rsp_key, req_chain, req_key, psk)

    def write_dir(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        crypto.save_chain_pem(self.responder_chain, self.responder_key,
                              path / "responder_chain.pem", path / "responder_key.pem")
        crypto.save_chain_pem(self.requester_chain, self.requester_key,
                              path / "requester_chain.pem", path / "requester_key.pem")
        (path / "psk.json").write_text(json.dumps(
            {hint.hex(): secret.hex() for hint, secret in self.psk_table.items()},
            sort_keys=True, indent=2))
        return path

    def responder_config(self, instrument: bool = False, seed=None) -> ResponderConfig:
        return ResponderConfig(
            slots={0: (self.responder_chain, self.responder_key)},
            measurements=make_default_measurements(),
            psk_table=dict(self.psk_table),
            trusted_requester_roots=(self.requester_chain.root(),),
            instrument=instrument,
            rng_seed=seed,
        )

    def requester_config(self, seed=None) -> RequesterConfig:
        return RequesterConfig(
            trusted_responder_roots=(self.responder_chain.root(),),
            own_chain=self.requester_chain,
            own_key=self.requester_key,
            psk_table=dict(self.psk_table),
            rng_seed=seed,
        )


@contextmanager
def serve_in_thread(serve_fn, endpoint):
    stop = threading.Event()
    thread = threading.Thread(target=serve_fn, args=(endpoint, stop), daemon=True)
    thread.start()
    try:
        yield
    finally:
        stop.set()
        thread.join(timeout=5.0)


# -- message benchmark ----------------------------------------------------------

# Requester-side rows whose sum approximates the secured driver bootstrap.
BOOTSTRAP_ROWS = (
    "init[requester]",
    "cert-load[requester]",
    "GetVersion",
    "GetCapabilities",
    "NegotiateAlgorithms",
    "GetDigests",
    "GetCertificate",
    "Challenge",
    "KeyExchange(CertDhe)",
    "Finish(CertDhe)",
)

_RESPONDER_LABELS = {
    "GET_VERSION": "GetVersion",
    "GET_CAPABILITIES": "GetCapabilities",
    "NEGOTIATE_ALGORITHMS": "NegotiateAlgorithms",
    "GET_DIGESTS": "GetDigests",
    "GET_CERTIFICATE": "GetCertificate",
    "CHALLENGE": "Challenge",
    "GET_MEASUREMENTS": "GetMeasurements",
    "KEY_EXCHANGE": "KeyExchange",
    "PSK_EXCHANGE": "KeyExchange(PSK)",
    "FINISH": "Finish",
    "PSK_FINISH": "PskFinish",
    "HEARTBEAT": "Heartbeat",
    "KEY_UPDATE": "KeyUpdate",
    "END_SESSION": "EndSession",
    "APP_DATA": "AppRequest(secured)",
    "app-plain": "AppRequest(plain)",
    "GET_ENCAPSULATED_REQUEST": "Encapsulated",
    "DELIVER_ENCAPSULATED_RESPONSE": "Encapsulated(deliver)",
}


def run_message_bench(cert_dir, runs: int = 100, seed: int | None = None,
                      cycle_hook=None) -> Report:
    """One timed row per protocol step, requester side; responder-side
    rows come from handler instrumentation and carry a [responder] tag."""
    cert_dir = Path(cert_dir)
    fixtures_probe = BenchFixtures.from_dir(cert_dir)
    samples: dict[str, list] = {}
    rsp_samples: dict[str, list] = {}
    cycle_samples: dict[str, list] = {}

    def note(label, seconds):
        samples.setdefault(label, []).append(seconds)

    def timed(label, fn, *args, **kwargs):
        c0 = cycle_hook() if cycle_hook else 0
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        note(label, time.perf_counter() - t0)
        if cycle_hook:
            cycle_samples.setdefault(label, []).append(cycle_hook() - c0)
        return out

    partial = False
    try:
        for _ in range(runs):
            channel = MmioChannel()
            t0 = time.perf_counter()
            rsp_fix = BenchFixtures.from_dir(cert_dir)
            rsp_cfg = rsp_fix.responder_config(instrument=True, seed=seed)
            note("cert-load[responder]", time.perf_counter() - t0)
            responder = Responder(rsp_cfg)
            rng_dev = RngDevice(seed=seed)
            responder.register_app_handler(rng_dev.opcode, rng_dev.handle)

            with serve_in_thread(responder.serve, channel.responder_end):
                t0 = time.perf_counter()
                req_fix = BenchFixtures.from_dir(cert_dir)
                note("cert-load[requester]", time.perf_counter() - t0)
                req_cfg = req_fix.requester_config(seed=seed)
                requester = timed("init[requester]", Requester, req_cfg,
                                  channel.requester_end)

                timed("GetVersion", requester.negotiate_version)
                timed("GetCapabilities", requester.negotiate_capabilities)
                timed("NegotiateAlgorithms", requester.negotiate_algorithms)
                timed("GetDigests", requester.fetch_digests)
                timed("GetCertificate", requester.fetch_certificate, 0)
                timed("Challenge", requester.challenge_authenticate, 0)
                timed("GetMeasurements(one-by-one)",
                      requester.fetch_measurements, MODE_ONE_BY_ONE)
                timed("GetMeasurements(all-at-once)",
                      requester.fetch_measurements, MODE_ALL_AT_ONCE)

                sid = requester.establish_session(SESSION_CERT_DHE)
                note("KeyExchange(CertDhe)", requester.last_timings["key_exchange"])
                note("Finish(CertDhe)", requester.last_timings["finish"])
                timed("Heartbeat", requester.heartbeat, sid)
                timed("KeyUpdate", requester.request_key_update, sid)
                timed("AppRequest(secured)", rng_request, requester, sid,
                      MODE_SECURED)
                timed("AppRequest(plain)", rng_request, requester, None,
                      MODE_PLAIN)
                timed("EndSession", requester.end_session, sid)

                psk_sid = requester.establish_session(SESSION_PSK, DEFAULT_PSK_HINT)
                note("KeyExchange(PSK)", requester.last_timings["psk_exchange"])
                note("PskFinish", requester.last_timings["psk_finish"])
                requester.end_session(psk_sid)

            for key, values in responder.timings.items():
                label = _RESPONDER_LABELS.get(key, key)
                rsp_samples.setdefault(label, []).extend(values)
            channel.close()
    except SpdmError:
        partial = True

    report = Report(metadata=_base_metadata("in-process-mmio", seed, fixtures_probe)
                    | {"runs": runs, "benchmark": "messages"},
                    partial=partial)
    for label, values in samples.items():
        report.add(label, SampleSet(values, UNIT_SECONDS))
    for label, values in rsp_samples.items():
        report.add(f"{label}[responder]", SampleSet(values, UNIT_SECONDS))
    for label, values in cycle_samples.items():
        report.add(f"{label}(cycles)", SampleSet(values, UNIT_CYCLES))
    return report


# -- disk benchmark ---------------------------------------------------------------

PATTERN_SEQ_READ = "seq-read"
PATTERN_SEQ_WRITE = "seq-write"
PATTERN_RAND_READ = "rand-read"
PATTERN_RAND_RW = "rand-rw"

METRIC_THROUGHPUT = "throughput"
METRIC_IOPS = "iops"
METRIC_LATENCY = "latency"


@dataclass
class WorkloadSpec:
    pattern: str
    block_size: int
    total_bytes: int
    fsync_every: int = 0  # 0 = never (one flush at the end of a write run)
    latency_model: LatencyModel = field(
        default_factory=lambda: LatencyModel(enabled=False))
    mode: str = MODE_PLAIN
    runs: int = 3
    seed: int = 0
    label: str = ""
    metric: str = ""  # derived from the pattern when empty
    device_bytes: int = devices.DEFAULT_CAPACITY_BYTES

    def __post_init__(self):
        if self.pattern in (PATTERN_SEQ_READ, PATTERN_SEQ_WRITE):
            if self.total_bytes % self.block_size:
                raise ValueError("block_size must divide total_bytes "
                                 "for sequential patterns")
        if self.runs < 2:
            raise ValueError("runs must be >= 2 for CI computation")
        if not self.metric:
            self.metric = (METRIC_THROUGHPUT
                           if self.pattern in (PATTERN_SEQ_READ, PATTERN_SEQ_WRITE)
                           else METRIC_IOPS)
        if not self.label:
            self.label = self.pattern


def _preset_specs(scale: float, seek_ms: float, per_byte_ns: float) -> dict:
    seq_total = int(64 * 1024 * 1024 * scale)
    rand_total = int(4 * 1024 * 1024 * scale)
    latency = LatencyModel(seek_delay_ms=seek_ms, per_byte_ns=per_byte_ns,
                           rot_latency_ms=(ROT_LATENCY_7200RPM_MS if seek_ms > 0
                                           else 0.0),
                           enabled=(seek_ms > 0 or per_byte_ns > 0))
    mib = 1024 * 1024
    return {
        "dd-small": WorkloadSpec(PATTERN_SEQ_WRITE, 4096, seq_total,
                                 fsync_every=0, latency_model=latency,
                                 label="dd-small"),
        "dd-big": WorkloadSpec(PATTERN_SEQ_WRITE, 16 * mib,
                               max(16 * mib, seq_total), fsync_every=0,
                               latency_model=latency, label="dd-big"),
        "ioping": WorkloadSpec(PATTERN_RAND_READ, 4096, 10 * 4096,
                               latency_model=latency, label="ioping",
                               metric=METRIC_LATENCY),
        "fio-seq-read": WorkloadSpec(PATTERN_SEQ_READ, mib, seq_total,
                                     fsync_every=10000, latency_model=latency,
                                     label="fio-seq-read"),
        "fio-seq-write": WorkloadSpec(PATTERN_SEQ_WRITE, mib, seq_total,
                                      fsync_every=10000, latency_model=latency,
                                      label="fio-seq-write"),
        "fio-rand-read": WorkloadSpec(PATTERN_RAND_READ, 4096, rand_total,
                                      fsync_every=1, latency_model=latency,
                                      label="fio-rand-read"),
        "fio-rand-rw": WorkloadSpec(PATTERN_RAND_RW, 4096, rand_total,
                                    fsync_every=1, latency_model=latency,
                                    label="fio-rand-rw"),
        # bonnie++-style approximations: unbuffered sequential 8 KiB I/O
        "bonnie-write": WorkloadSpec(PATTERN_SEQ_WRITE, 8192, rand_total,
                                     fsync_every=1, latency_model=latency,
                                     label="bonnie-write"),
        "bonnie-read": WorkloadSpec(PATTERN_SEQ_READ, 8192, rand_total,
                                    latency_model=latency, label="bonnie-read"),
    }


PRESET_NAMES = tuple(_preset_specs(1.0, 0.0, 0.0))


def get_preset(name: str, scale: float = 1.0, seek_ms: float = 0.0,
               per_byte_ns: float = 0.0, mode: str = MODE_PLAIN,
               runs: int = 3, seed: int = 0) -> WorkloadSpec:
    presets = _preset_specs(scale, seek_ms, per_byte_ns)
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; know {sorted(presets)}")
    return replace(presets[name], mode=mode, runs=runs, seed=seed)


def generate_trace(spec: WorkloadSpec, run_seed: int):
    """Deterministic op trace: (op, sector, sector_count) tuples."""
    rng = random.Random(run_seed)
    sectors_per_block = spec.block_size // SECTOR_SIZE
    ops = spec.total_bytes // spec.block_size
    device_sectors = spec.device_bytes // SECTOR_SIZE
    max_start = device_sectors - sectors_per_block
    trace = []
    if spec.pattern == PATTERN_SEQ_READ:
        trace = [("read", i * sectors_per_block, sectors_per_block)
                 for i in range(ops)]
    elif spec.pattern == PATTERN_SEQ_WRITE:
        trace = [("write", i * sectors_per_block, sectors_per_block)
                 for i in range(ops)]
    elif spec.pattern == PATTERN_RAND_READ:
        trace = [("read", rng.randrange(0, max_start + 1), sectors_per_block)
                 for _ in range(ops)]
    elif spec.pattern == PATTERN_RAND_RW:
        for _ in range(ops):
            op = "read" if rng.random() < 0.5 else "write"
            trace.append((op, rng.randrange(0, max_start + 1), sectors_per_block))
    else:
        raise ValueError(f"unknown pattern {spec.pattern!r}")
    return trace


def trace_hash(trace) -> str:
    h = hashlib.sha256()
    for op, sector, count in trace:
        h.update(f"{op}:{sector}:{count};".encode())
    return h.hexdigest()


def _run_disk_once(spec: WorkloadSpec, fixtures: BenchFixtures, run_seed: int):
    """One full workload execution; returns (elapsed, op_latencies, hash).

    The device host is driven through a synchronous loopback endpoint so
    the timed path contains only protocol, crypto, and device-model work
    (topology "in-process-sync"); thread-handoff noise would otherwise
    drown the percent-level trends this benchmark asserts.
    """
    device = BlockDevice(capacity_bytes=spec.device_bytes,
                         latency=spec.latency_model, latency_seed=run_seed)
    responder = Responder(fixtures.responder_config())
    host = BlockDeviceHost(device, responder)
    endpoint = LoopbackEndpoint(host.service)
    trace = generate_trace(spec, run_seed)
    payload = random.Random(run_seed ^ 0x5EED).randbytes(spec.block_size)
    latencies = [] if spec.metric == METRIC_LATENCY else None
    driver = driver_init(
        endpoint, spec.mode,
        requester_config=(fixtures.requester_config()
                          if spec.mode == MODE_SECURED else None))
    writes = 0
    wrote_any = False
    t_run = time.perf_counter()
    for op, sector, count in trace:
        t_op = time.perf_counter()
        if op == "read":
            driver.read_sectors(sector, count)
        else:
            driver.write_sectors(sector, payload)
            wrote_any = True
            writes += 1
            if spec.fsync_every and writes % spec.fsync_every == 0:
                driver.flush()
        if latencies is not None:
            latencies.append(time.perf_counter() - t_op)
    if wrote_any:
        driver.flush()
    elapsed = time.perf_counter() - t_run
    return elapsed, latencies, trace_hash(trace)


def run_disk_bench(spec: WorkloadSpec, fixtures: BenchFixtures | None = None) -> Report:
    """Throughput for sequential patterns, iops for random patterns,
    per-op latency for the ping preset."""
    if fixtures is None:
        fixtures = BenchFixtures.generate()
    values = []
    hashes = []
    ops = spec.total_bytes // spec.block_size
    for run in range(spec.runs):
        elapsed, latencies, thash = _run_disk_once(spec, fixtures, spec.seed + run)
        hashes.append(thash)
        if spec.metric == METRIC_LATENCY:
            values.extend(latencies)
        elif spec.metric == METRIC_THROUGHPUT:
            values.append(spec.total_bytes / elapsed)
        else:
            values.append(ops / elapsed)
    unit = {METRIC_THROUGHPUT: UNIT_BYTES_PER_S, METRIC_IOPS: UNIT_IOPS,
            METRIC_LATENCY: UNIT_SECONDS}[spec.metric]
    report = Report(metadata=_base_metadata("in-process-sync", spec.seed, fixtures)
                    | {"benchmark": "disk", "preset": spec.label,
                       "pattern": spec.pattern, "block_size": spec.block_size,
                       "total_bytes": spec.total_bytes, "mode": spec.mode,
                       "runs": spec.runs, "fsync_every": spec.fsync_every,
                       "seek_ms": spec.latency_model.seek_delay_ms,
                       "per_byte_ns": spec.latency_model.per_byte_ns,
                       "trace_hashes": hashes})
    report.add(f"{spec.label}[{spec.mode}]", SampleSet(values, unit))
    return report


def run_disk_pair(spec: WorkloadSpec, fixtures: BenchFixtures | None = None) -> Report:
    """Interleaved plain/secured runs of the same spec with identical
    per-run seeds; the paired traces are asserted identical."""
    if fixtures is None:
        fixtures = BenchFixtures.generate()
    results = {MODE_PLAIN: [], MODE_SECURED: []}
    hashes = {MODE_PLAIN: [], MODE_SECURED: []}
    ops = spec.total_bytes // spec.block_size
    for run in range(spec.runs):
        for mode in (MODE_PLAIN, MODE_SECURED):
            mode_spec = replace(spec, mode=mode)
            elapsed, latencies, thash = _run_disk_once(
                mode_spec, fixtures, spec.seed + run)
            hashes[mode].append(thash)
            if spec.metric == METRIC_LATENCY:
                results[mode].extend(latencies)
            elif spec.metric == METRIC_THROUGHPUT:
                results[mode].append(spec.total_bytes / elapsed)
            else:
                results[mode].append(ops / elapsed)
    if hashes[MODE_PLAIN] != hashes[MODE_SECURED]:
        raise AssertionError("paired runs executed different traces")
    unit = {METRIC_THROUGHPUT: UNIT_BYTES_PER_S, METRIC_IOPS: UNIT_IOPS,
            METRIC_LATENCY: UNIT_SECONDS}[spec.metric]
    report = Report(metadata=_base_metadata("in-process-sync", spec.seed, fixtures)
                    | {"benchmark": "disk-pair", "preset": spec.label,
                       "pattern": spec.pattern, "block_size": spec.block_size,
                       "total_bytes": spec.total_bytes, "runs": spec.runs,
                       "fsync_every": spec.fsync_every,
                       "seek_ms": spec.latency_model.seek_delay_ms,
                       "per_byte_ns": spec.latency_model.per_byte_ns,
                       "trace_hashes": hashes[MODE_PLAIN]})
    for mode in (MODE_PLAIN, MODE_SECURED):
        report.add(f"{spec.label}[{mode}]", SampleSet(results[mode], unit))
    return report


# -- bootstrap benchmark ------------------------------------------------------------


def _timed_driver_init(cert_dir, mode: str):
    """Includes identity loading from disk, mirroring the message-bench
    cert-load row, so the delta cross-checks against summed rows."""
    channel = MmioChannel()
    fixtures = BenchFixtures.from_dir(cert_dir)
    device = BlockDevice(capacity_bytes=4 * 1024 * 1024)
    responder = Responder(fixtures.responder_config())
    host = BlockDeviceHost(device, responder)
    with serve_in_thread(host.serve, channel.responder_end):
        t0 = time.perf_counter()
        req_fix = BenchFixtures.from_dir(cert_dir) if mode == MODE_SECURED else None
        driver = driver_init(
            channel.requester_end, mode,
            requester_config=(req_fix.requester_config()
                              if mode == MODE_SECURED else None))
        elapsed = time.perf_counter() - t0
        steps = dict(driver.bootstrap_timing.steps)
    channel.close()
    return elapsed, steps


def run_bootstrap_bench(cert_dir, runs: int = 15) -> Report:
    """Secured-minus-plain driver initialization deltas over fresh
    transports, with per-step rows from the secured bootstraps."""
    deltas, secured_totals, plain_totals = [], [], []
    step_samples: dict[str, list] = {}
    for _ in range(runs):
        secured, steps = _timed_driver_init(cert_dir, MODE_SECURED)
        plain, _ = _timed_driver_init(cert_dir, MODE_PLAIN)
        secured_totals.append(secured)
        plain_totals.append(plain)
        deltas.append(secured - plain)
        for name, seconds in steps.items():
            step_samples.setdefault(name, []).append(seconds)
    fixtures = BenchFixtures.from_dir(cert_dir)
    report = Report(metadata=_base_metadata("in-process-mmio", None, fixtures)
                    | {"benchmark": "bootstrap", "runs": runs})
    report.add("bootstrap-delta", SampleSet(deltas, UNIT_SECONDS))
    report.add("bootstrap-secured", SampleSet(secured_totals, UNIT_SECONDS))
    report.add("bootstrap-plain", SampleSet(plain_totals, UNIT_SECONDS))
    for name, values in sorted(step_samples.items()):
        report.add(f"bootstrap-step:{name}", SampleSet(values, UNIT_SECONDS))
    return report


# -- application-phase scenario ------------------------------------------------------

APP_PHASE_STEPS = ("key-agreement", "heartbeat", "key-update", "app-request",
                   "end-session")


def run_app_phase(fixtures: BenchFixtures | None = None, runs: int = 10,
                  session_mode: str = SESSION_CERT_DHE,
                  seed: int | None = None) -> Report:
    """The five-step application scenario: key agreement, heartbeat, key
    update, one application request, session teardown."""
    if fixtures is None:
        fixtures = BenchFixtures.generate()
    samples = {step: [] for step in APP_PHASE_STEPS}
    for _ in range(runs):
        channel = MmioChannel()
        responder = Responder(fixtures.responder_config(seed=seed))
        rng_dev = RngDevice(seed=seed)
        responder.register_app_handler(rng_dev.opcode, rng_dev.handle)
        with serve_in_thread(responder.serve, channel.responder_end):
            requester = Requester(fixtures.requester_config(seed=seed),
                                  channel.requester_end)
            requester.init_connection()
            if session_mode == SESSION_CERT_DHE:
                requester.fetch_digests()
                requester.fetch_certificate(0)
                requester.challenge_authenticate(0)

            def timed(step, fn, *args):
                t0 = time.perf_counter()
                out = fn(*args)
                samples[step].append(time.perf_counter() - t0)
                return out

            if session_mode == SESSION_PSK:
                sid = timed("key-agreement", requester.establish_session,
                            SESSION_PSK, DEFAULT_PSK_HINT)
            else:
                sid = timed("key-agreement", requester.establish_session)
            timed("heartbeat", requester.heartbeat, sid)
            timed("key-update", requester.request_key_update, sid)
            timed("app-request", rng_request, requester, sid, MODE_SECURED)
            timed("end-session", requester.end_session, sid)
        channel.close()
    report = Report(metadata=_base_metadata("in-process-mmio", seed, fixtures)
                    | {"benchmark": "app-phase", "runs": runs,
                       "session_mode": session_mode})
    for step in APP_PHASE_STEPS:
        report.add(f"app-phase:{step}", SampleSet(samples[step], UNIT_SECONDS))
    return report
