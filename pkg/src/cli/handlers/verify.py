"""Self-check battery command."""

import logging
from typing import Optional

from src.cli.experiment import VerificationFailed
from src.services.verification import VerificationReport, run_verification

logger = logging.getLogger(__name__)


class VerifyHandler:
    """Handler for the verify subcommand."""

    def __init__(self, cases: int = 5, seed: int = 0):
        self.cases = cases
        self.seed = seed

    async def verify_command(self, fault: Optional[str] = None) -> VerificationReport:
        """Run every check; raises VerificationFailed listing the failures."""
        report = run_verification(cases=self.cases, seed=self.seed, fault=fault)
        for result in report.results:
            status = "PASS" if result.passed else "FAIL"
            print(f"{status}  {result.name}  {result.detail}".rstrip())
        if not report.passed:
            names = [result.name for result in report.failed]
            raise VerificationFailed(f"{len(names)} check(s) failed: {', '.join(names)}", names)
        print(f"all {len(report.results)} checks passed in {report.seconds:.1f}s")
        return report
