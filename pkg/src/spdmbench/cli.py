"""Command-line interface.

Subcommands: gencerts, serve, connect, msgbench, diskbench, bootbench,
app-phase. `serve` binds a responder to a TCP listener speaking the
documented wire format; `connect` runs the requester flow against it.
The bench subcommands run in-process and emit reports as JSON or CSV.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from . import bench, crypto, devices, wire
from .bench import BenchFixtures, emit_report, render_report
from .devices import MODE_PLAIN, MODE_SECURED, RngDevice, rng_request
from .requester import SESSION_CERT_DHE, SESSION_PSK, Requester, bootstrap
from .responder import Responder, ResponderConfig, make_default_measurements
from .transport import TcpEndpoint, tcp_connect, tcp_listener


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--runs", type=int, default=None,
                        help="number of measured repetitions")
    parser.add_argument("--scale", type=float, default=1.0,
                        help="multiplier on workload sizes")
    parser.add_argument("--mode", choices=[MODE_PLAIN, MODE_SECURED, "both"],
                        default="both")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=None,
                        help="write the report to this path")
    parser.add_argument("--format", choices=["json", "csv"], default="json")
    parser.add_argument("--seek-ms", type=float, default=0.0,
                        help="seek delay applied on non-contiguous requests")
    parser.add_argument("--per-byte-ns", type=float, default=0.0,
                        help="transfer cost per byte")
    parser.add_argument("--certs", type=Path, default=None,
                        help="fixture directory from `gencerts`")


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _fixtures(args) -> tuple[BenchFixtures, Path]:
    """Load fixtures from --certs, generating a throwaway set if absent."""
    if args.certs is not None:
        return BenchFixtures.from_dir(args.certs), args.certs
    tmp = Path(tempfile.mkdtemp(prefix="spdmbench-certs-"))
    print(f"generating throwaway fixtures in {tmp}", file=sys.stderr)
    fixtures = BenchFixtures.generate()
    fixtures.write_dir(tmp)
    return fixtures, tmp


def _finish_report(report, args) -> int:
    text = render_report(report, args.format)
    if args.out is not None:
        emit_report(report, args.format, args.out)
        print(f"wrote {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return 1 if report.partial else 0


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    return json.loads(path.read_text())


def cmd_gencerts(args) -> int:
    fixtures = BenchFixtures.generate(depth=args.depth)
    fixtures.write_dir(args.out)
    chain_len = len(fixtures.responder_chain.serialize())
    print(f"wrote fixtures to {args.out} (responder chain {chain_len} bytes)")
    return 0


def cmd_serve(args) -> int:
    fixtures, _ = _fixtures(args)
    config = _load_config(args.config)
    host, port = _parse_addr(args.listen)
    srv = tcp_listener(host, port)
    print(f"serving on {host}:{port}", file=sys.stderr)
    while True:
        sock, peer = srv.accept()
        print(f"connection from {peer}", file=sys.stderr)
        cfg = fixtures.responder_config(seed=config.get("seed"))
        if "measurements" in config:
            cfg.measurements = make_default_measurements(
                config["measurements"].get("count", 5),
                config["measurements"].get("size", 128))
        responder = Responder(cfg)
        rng_dev = RngDevice(seed=config.get("seed"))
        responder.register_app_handler(rng_dev.opcode, rng_dev.handle)
        responder.serve(TcpEndpoint(sock))
        if args.once:
            return 0


def cmd_connect(args) -> int:
    fixtures, _ = _fixtures(args)
    host, port = _parse_addr(args.addr)
    endpoint = tcp_connect(host, port)
    requester = Requester(fixtures.requester_config(), endpoint)
    mode = SESSION_PSK if args.psk else SESSION_CERT_DHE
    t0 = time.perf_counter()
    steps = bootstrap(requester, session_mode=mode,
                      psk_hint=bench.DEFAULT_PSK_HINT if args.psk else None)
    total = time.perf_counter() - t0
    sid = steps.pop("session_id")
    requester.heartbeat(sid)
    value = rng_request(requester, sid, MODE_SECURED)
    requester.end_session(sid)
    out = {
        "topology": "tcp-split",
        "session_mode": mode,
        "bootstrap_seconds": total,
        "steps_seconds": steps,
        "random_number": value.hex(),
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    endpoint.close()
    return 0


def cmd_msgbench(args) -> int:
    _, cert_dir = _fixtures(args)
    report = bench.run_message_bench(cert_dir, runs=args.runs or 100,
                                     seed=args.seed)
    return _finish_report(report, args)


def cmd_diskbench(args) -> int:
    fixtures, _ = _fixtures(args)
    spec = bench.get_preset(args.preset, scale=args.scale, seek_ms=args.seek_ms,
                            per_byte_ns=args.per_byte_ns,
                            mode=MODE_PLAIN if args.mode == "both" else args.mode,
                            runs=args.runs or 3, seed=args.seed)
    if args.mode == "both":
        report = bench.run_disk_pair(spec, fixtures)
    else:
        report = bench.run_disk_bench(spec, fixtures)
    return _finish_report(report, args)


def cmd_bootbench(args) -> int:
    _, cert_dir = _fixtures(args)
    report = bench.run_bootstrap_bench(cert_dir, runs=args.runs or 15)
    return _finish_report(report, args)


def cmd_app_phase(args) -> int:
    fixtures, _ = _fixtures(args)
    mode = SESSION_PSK if args.psk else SESSION_CERT_DHE
    report = bench.run_app_phase(fixtures, runs=args.runs or 10,
                                 session_mode=mode, seed=args.seed)
    return _finish_report(report, args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spdmbench",
        description="Component-authentication protocol, secured devices, "
                    "and overhead benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gencerts", help="write PEM fixture chains and keys")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--depth", type=int, default=3)
    p.set_defaults(fn=cmd_gencerts)

    p = sub.add_parser("serve", help="run a responder on a TCP listener")
    _add_common(p)
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config (seed, measurements)")
    p.add_argument("--once", action="store_true",
                   help="exit after the first connection ends")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("connect", help="run the requester flow over TCP")
    _add_common(p)
    p.add_argument("--addr", required=True, metavar="HOST:PORT")
    p.add_argument("--psk", action="store_true", help="PSK session mode")
    p.set_defaults(fn=cmd_connect)

    p = sub.add_parser("msgbench", help="per-message overhead profile")
    _add_common(p)
    p.set_defaults(fn=cmd_msgbench)

    p = sub.add_parser("diskbench", help="disk workload benchmark")
    _add_common(p)
    p.add_argument("--preset", required=True, choices=sorted(bench.PRESET_NAMES))
    p.set_defaults(fn=cmd_diskbench)

    p = sub.add_parser("bootbench", help="driver bootstrap cost benchmark")
    _add_common(p)
    p.set_defaults(fn=cmd_bootbench)

    p = sub.add_parser("app-phase", help="five-step application scenario")
    _add_common(p)
    p.add_argument("--psk", action="store_true", help="PSK session mode")
    p.set_defaults(fn=cmd_app_phase)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
