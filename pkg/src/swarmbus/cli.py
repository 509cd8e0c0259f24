"""Operator command line.

Exit status: 0 on success, 1 on a domain error (verification failure, denial,
any bus error code), 2 on usage errors. Reports go to stdout one item per
line; errors go to stderr as ``CODE: detail``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from .bus import Bus
from .errors import SwarmError
from .ledger import PrivacyLedger
from .ledger.audit import AuditLog, verify_lines
from .model import load_descriptor
from .server import BusServer, Directory, OperatorClient, read_envelope_file, run_adapter
from .transport import DEFAULT_PORT
from .verifier import verify

DEFAULT_DIRECTORY = "demo/adapters.env"
DEFAULT_SECRETS = "demo/secrets.env"


def _port() -> int:
    return int(os.environ.get("SWARMBUS_PORT", DEFAULT_PORT))


def _data_dir() -> Path:
    return Path(os.environ.get("SWARMBUS_DATA_DIR", "./data"))


def _password(secrets_file: str, name: str) -> str:
    passwords = read_envelope_file(secrets_file)["passwords"]
    if name not in passwords:
        raise SwarmError("UNKNOWN_PRINCIPAL", f"{name} not in {secrets_file}")
    return passwords[name]


def _operator(args) -> OperatorClient:
    try:
        return OperatorClient.connect(args.host, _port(), args.operator, _password(args.secrets, args.operator))
    except OSError as exc:
        raise SwarmError("BUS_UNREACHABLE", f"{args.host}:{_port()} ({exc.strerror or exc})") from None


def _print_report(report_lines: Sequence[str]) -> None:
    for line in report_lines:
        print(line)


# ---- commands ---------------------------------------------------------------

def cmd_bus_start(args) -> int:
    directory = Directory.load(args.directory)
    ledger = PrivacyLedger(_data_dir(), fsync=args.fsync)
    bus = Bus(ledger, credentials=directory.credentials)
    bus.recover()
    pending = [load_descriptor(p) for p in args.descriptor]
    server = BusServer(bus, directory, host=args.host, port=_port(), pending=pending)
    port = server.start()
    print(f"bus listening on {args.host}:{port} data={_data_dir()}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        ledger.audit.close()
    return 0


def cmd_adapter_run(args) -> int:
    from .healthfuse.institutions import CitizenProfile, Institution

    directory = Directory.load(args.directory)
    matches = [i for i in directory.identities.values()
               if i.role == args.role and (args.adapter_id is None or i.adapter_id == args.adapter_id)]
    if not matches:
        raise SwarmError("UNKNOWN_ROLE", args.role)
    identity = matches[0]
    profiles = [CitizenProfile.from_envelope(p) for p in read_envelope_file(args.fixtures)["profiles"]]
    adapter = Institution(identity, profiles)
    reason = run_adapter(
        adapter, _password(args.secrets, identity.adapter_id), args.host, _port(),
        connect_timeout=args.connect_timeout,
        on_connect=lambda: print(f"{identity.adapter_id} connected as {identity.role}", flush=True),
    )
    print(f"{identity.adapter_id} channel closed: {reason}")
    return 0


def cmd_descriptor_verify(args) -> int:
    d = load_descriptor(args.file)
    directory = Directory.load(args.adapters)
    report = verify(d, list(directory.identities.values()))
    _print_report(report.lines())
    print("OK" if report.ok else f"FAILED {len(report.violations)} violations")
    return 0 if report.ok else 1


def cmd_descriptor_register(args) -> int:
    d = load_descriptor(args.file)
    result = _operator(args).call("descriptor.register", descriptor=d.to_envelope())
    _print_report(result["violations"])
    print(f"registered {d.name} v{d.version}" if result["ok"] else "REJECTED")
    return 0 if result["ok"] else 1


def cmd_swarm_launch(args) -> int:
    payload = read_envelope_file(args.payload)
    op = _operator(args)
    result = op.call(
        "swarm.launch", name=args.name, version=args.version, payload=payload,
        subjectId=args.subject, consentToken=args.consent or "", wait=args.wait,
    )
    iid = result["instanceId"]
    print(iid)
    if not args.wait:
        return 0
    status = op.call("swarm.status", instanceId=iid)
    print(status["status"] + (f"\t{status['detail']}" if status["detail"] else ""))
    return 0 if status["status"] == "ISSUED" else 1


def cmd_swarm_status(args) -> int:
    s = _operator(args).call("swarm.status", instanceId=args.id)
    print(f"{s['instanceId']}\t{s['status']}\t{s['currentPhase'] or '-'}\t{s['detail']}")
    for hop in s["hopTrail"]:
        print(f"  {hop['phase']}\t{hop['adapterId']}\tread={','.join(hop['fieldsRead'])}\twrote={','.join(hop['fieldsWritten'])}")
    return 0


def _log_path(args) -> Path:
    return Path(args.log) if args.log else _data_dir() / "audit.log"


def cmd_audit_verify(args) -> int:
    path = _log_path(args)
    if not path.exists():
        raise SwarmError("UNKNOWN_LOG", str(path))
    bad = verify_lines(path.read_bytes())
    if bad is None:
        print("OK")
        return 0
    print(f"firstBadSeq={bad}")
    return 1


def cmd_audit_who(args) -> int:
    log = AuditLog(_log_path(args))
    try:
        for a in log.who_accessed(args.subject):
            flag = "\tredacted" if a.redacted else ""
            print(f"{a.timestamp_utc}\t{a.actor_id}\t{a.actor_class.value}\t{a.action.value}\t"
                  f"{','.join(sorted(a.field_names))}{flag}")
    finally:
        log.close()
    return 0


def cmd_gdpr_erase(args) -> int:
    r = _operator(args).call("gdpr.erase", subjectId=args.subject)
    for name, n in r["perStore"]:
        print(f"{name}\t{n}")
    for iid in r["cancelledInstances"]:
        print(f"cancelled\t{iid}")
    for finding in r["residualFindings"]:
        print(f"residual\t{finding}")
    print("ERASED" if r["success"] else "INCOMPLETE")
    return 0 if r["success"] else 1


def cmd_consent_grant(args) -> int:
    cats = [c for c in args.categories.split(",") if c]
    print(_operator(args).call("consent.grant", subjectId=args.subject, purpose=args.purpose, categories=cats)["token"])
    return 0


def cmd_consent_revoke(args) -> int:
    _operator(args).call("consent.revoke", token=args.token)
    print("revoked")
    return 0


def cmd_demo_scenario(args) -> int:
    from .healthfuse.scenarios import SCENARIOS, run_scenario

    names = list(SCENARIOS) if args.name == "all" else [args.name]
    if any(n not in SCENARIOS for n in names):
        raise SwarmError("UNKNOWN_SCENARIO", f"{args.name} (choose from {', '.join(SCENARIOS)}, all)")
    failed = 0
    for name in names:
        run = run_scenario(name, echo=print)
        print(f"{'PASS' if run.ok else 'FAIL'} {name}")
        failed += not run.ok
    return 1 if failed else 0


def cmd_demo_http(args) -> int:
    from .healthfuse import Healthfuse
    from .healthfuse.http import serve

    service = Healthfuse.in_process(_data_dir())
    for pid in service.profiles:
        service.add_account(pid, args.password)
    service.add_staff("support-agent-1", args.password)
    serve(service, host=args.host, port=args.port)
    return 0


# ---- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarmbus", description="Privacy-by-design integration bus")
    p.add_argument("-v", "--verbose", action="store_true")
    top = p.add_subparsers(dest="group", required=True)

    def online(sp):
        sp.add_argument("--host", default="127.0.0.1")
        sp.add_argument("--operator", default="operator")
        sp.add_argument("--secrets", default=DEFAULT_SECRETS)

    bus = top.add_parser("bus").add_subparsers(dest="cmd", required=True)
    sp = bus.add_parser("start", help="run the bus until interrupted")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--directory", default=DEFAULT_DIRECTORY)
    sp.add_argument("--descriptor", action="append", default=[], help="register once its adapters connect")
    sp.add_argument("--fsync", action="store_true")
    sp.set_defaults(func=cmd_bus_start)

    ad = top.add_parser("adapter").add_subparsers(dest="cmd", required=True)
    sp = ad.add_parser("run", help="run a mock institution adapter")
    sp.add_argument("role")
    sp.add_argument("--fixtures", required=True)
    sp.add_argument("--adapter-id")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--directory", default=DEFAULT_DIRECTORY)
    sp.add_argument("--secrets", default=DEFAULT_SECRETS)
    sp.add_argument("--connect-timeout", type=float, default=10.0)
    sp.set_defaults(func=cmd_adapter_run)

    de = top.add_parser("descriptor").add_subparsers(dest="cmd", required=True)
    sp = de.add_parser("verify", help="check a descriptor against an adapter directory")
    sp.add_argument("file")
    sp.add_argument("--adapters", default=DEFAULT_DIRECTORY)
    sp.set_defaults(func=cmd_descriptor_verify)
    sp = de.add_parser("register")
    sp.add_argument("file")
    online(sp)
    sp.set_defaults(func=cmd_descriptor_register)

    sw = top.add_parser("swarm").add_subparsers(dest="cmd", required=True)
    sp = sw.add_parser("launch")
    sp.add_argument("name")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--payload", required=True)
    sp.add_argument("--version", type=int)
    sp.add_argument("--consent")
    sp.add_argument("--wait", action="store_true", help="run to completion; exit 1 unless ISSUED")
    online(sp)
    sp.set_defaults(func=cmd_swarm_launch)
    sp = sw.add_parser("status")
    sp.add_argument("id")
    online(sp)
    sp.set_defaults(func=cmd_swarm_status)

    au = top.add_parser("audit").add_subparsers(dest="cmd", required=True)
    sp = au.add_parser("verify")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_audit_verify)
    sp = au.add_parser("who")
    sp.add_argument("subject")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_audit_who)

    gd = top.add_parser("gdpr").add_subparsers(dest="cmd", required=True)
    sp = gd.add_parser("erase")
    sp.add_argument("subject")
    online(sp)
    sp.set_defaults(func=cmd_gdpr_erase)

    co = top.add_parser("consent").add_subparsers(dest="cmd", required=True)
    sp = co.add_parser("grant")
    sp.add_argument("subject")
    sp.add_argument("--purpose", required=True)
    sp.add_argument("--categories", required=True, help="comma separated")
    online(sp)
    sp.set_defaults(func=cmd_consent_grant)
    sp = co.add_parser("revoke")
    sp.add_argument("token")
    online(sp)
    sp.set_defaults(func=cmd_consent_revoke)

    dm = top.add_parser("demo").add_subparsers(dest="cmd", required=True)
    sp = dm.add_parser("scenario")
    sp.add_argument("name", help="scenario name or 'all'")
    sp.set_defaults(func=cmd_demo_scenario)
    sp = dm.add_parser("http", help="serve the citizen HTTP API over an in-process deployment")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)
    sp.add_argument("--password", default="demo", help="password for every demo account")
    sp.set_defaults(func=cmd_demo_http)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SwarmError as exc:
        print(f"{exc.code}: {exc.detail}", file=sys.stderr)
        return 1
    except (OSError, KeyError, ValueError) as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
