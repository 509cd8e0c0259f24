"""Human exposure per citizen: automated flow versus the legacy office-by-office process.

Runs every demo profile through issue_ehic, then one consented support view,
and prints distinct human actors in each citizen's access log.
"""

from swarmbus.healthfuse import Healthfuse
from swarmbus.healthfuse.institutions import LEGACY_HUMAN_HANDLERS
from swarmbus.healthfuse.service import ehic_categories


def main() -> None:
    hf = Healthfuse.in_process()
    hf.support.register_staff("support-agent-1")
    print(f"{'subject':<16}{'outcome':<9}{'hops':>5}{'legacy':>7}{'automated':>11}{'after support':>15}")
    for pid in hf.profiles:
        token = hf.grant_consent(pid, "issue_ehic", ehic_categories())
        iid = hf.request_insurance(pid, "ehic-standard", token)
        decision = hf.decision(iid)
        automated = len(hf.human_actors(pid))
        support_token = hf.grant_consent(pid, "support", ["decision", "contact"])
        hf.support_view("support-agent-1", hf.open_support_ticket(pid, "status?", support_token))
        after = len(hf.human_actors(pid))
        hops = len(hf.bus.instance(iid).hop_trail)
        print(f"{pid:<16}{decision.outcome.value:<9}{hops:>5}{LEGACY_HUMAN_HANDLERS:>7}{automated:>11}{after:>15}")
    hf.close()


if __name__ == "__main__":
    main()
