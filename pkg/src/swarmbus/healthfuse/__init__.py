"""Healthfuse: European health insurance card issuance over the bus."""

from .institutions import CitizenProfile, build_issue_ehic_descriptor, demo_profiles
from .service import Healthfuse, InsuranceDecision

__all__ = ["CitizenProfile", "Healthfuse", "InsuranceDecision", "build_issue_ehic_descriptor", "demo_profiles"]
