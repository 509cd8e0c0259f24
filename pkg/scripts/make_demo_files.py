"""Regenerate the shipped choreography and demo deployment files.

The passwords written to demo/secrets.env are for the local demo only.
"""

import argparse
import secrets
from pathlib import Path

from swarmbus import scram
from swarmbus.healthfuse.institutions import build_issue_ehic_descriptor, demo_identities, demo_profiles
from swarmbus.model import canonical_encode
from swarmbus.server import Directory, write_envelope_file

OPERATOR = "operator"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", type=Path, default=Path(__file__).resolve().parents[1])
    args = ap.parse_args()
    demo, chor = args.root / "demo", args.root / "choreographies"
    demo.mkdir(exist_ok=True)
    chor.mkdir(exist_ok=True)

    d = build_issue_ehic_descriptor()
    (chor / "issue_ehic.swarm").write_bytes(canonical_encode(d) + b"\n")

    idents = demo_identities(d)
    passwords = {i.adapter_id: secrets.token_urlsafe(18) for i in idents}
    passwords[OPERATOR] = secrets.token_urlsafe(18)
    creds = {name: scram.new_credential(name, pw) for name, pw in passwords.items()}
    directory = Directory({i.adapter_id: i for i in idents}, creds, frozenset({OPERATOR}))
    write_envelope_file(demo / "adapters.env", directory.to_envelope())
    write_envelope_file(demo / "secrets.env", {"passwords": passwords})
    write_envelope_file(demo / "fixtures.env", {"profiles": [p.to_envelope() for p in demo_profiles()]})
    print(f"wrote {chor / 'issue_ehic.swarm'} and demo/{{adapters,secrets,fixtures}}.env")


if __name__ == "__main__":
    main()
