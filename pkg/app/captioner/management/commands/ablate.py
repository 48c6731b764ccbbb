from captioner.ablation import SUITES, run_suite
from captioner.management.base import FusecapCommand
from captioner.runconfig import load_run_config


class Command(FusecapCommand):
    help = "Run an ablation suite and write its comparison CSV"

    def add_arguments(self, parser):
        parser.add_argument("--suite", required=True, choices=SUITES)
        parser.add_argument("--config", required=True)
        parser.add_argument("--out", required=True)

    def run(self, **options):
        result = run_suite(options["suite"], load_run_config(options["config"]), options["out"])
        self.stdout.write(f"table {result.table}")
        for run in result.runs:
            if run.seed == "mean":
                accuracy = "" if run.accuracy is None else f" accuracy={run.accuracy:.4f}"
                self.stdout.write(
                    f"{run.arm} params={run.params_total} b1={run.report.b1:.2f} b4={run.report.b4:.2f}{accuracy}"
                )
