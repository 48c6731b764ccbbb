from captioner.caption_metrics import MetricOptions, MetricReport, load_pairs, score_corpus
from captioner.management.base import FusecapCommand


class Command(FusecapCommand):
    help = "Score a hypothesis file against a reference file (tab-separated references per line)"

    def add_arguments(self, parser):
        parser.add_argument("--hyp", required=True)
        parser.add_argument("--refs", required=True)
        parser.add_argument("--rouge-multi-ref", choices=["max", "mean"], default="max")

    def run(self, **options):
        pairs = load_pairs(options["hyp"], options["refs"])
        report = score_corpus(pairs, MetricOptions(rouge_multi_ref=options["rouge_multi_ref"]))
        self.write_csv(MetricReport.columns(), [report.as_row()])
