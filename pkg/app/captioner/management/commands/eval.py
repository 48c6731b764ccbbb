from pathlib import Path

from captioner.caption_metrics import MetricReport
from captioner.management.base import FusecapCommand
from captioner.trainer import evaluate, load_checkpoint


class Command(FusecapCommand):
    help = "Greedy-decode a manifest with a checkpoint and print the metric report as CSV"

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--manifest", required=True)
        parser.add_argument("--out", help="Directory for report.csv, samples.csv and hypotheses.txt")

    def run(self, **options):
        out = options["out"] or Path(options["checkpoint"]).parent / "eval"
        result = evaluate(load_checkpoint(options["checkpoint"]), options["manifest"], out)
        self.write_csv(MetricReport.columns(), [result.report.as_row()])
        if result.accuracy is not None:
            self.stdout.write(f"discriminating_accuracy {result.accuracy:.4f}")
