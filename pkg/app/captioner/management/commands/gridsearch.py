from captioner.management.base import FusecapCommand
from captioner.runconfig import load_run_config
from captioner.trainer import gridsearch


class Command(FusecapCommand):
    help = "Train and validate every cell of the lr/heads/dropout grid"

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True)
        parser.add_argument("--out", help="Directory for gridsearch.csv and best.conf")

    def run(self, **options):
        result = gridsearch(load_run_config(options["config"]), options["out"])
        best = result.best
        self.stdout.write(f"table {result.table}")
        self.stdout.write(
            f"best cell={best.index} lr={best.lr} heads={best.heads} "
            f"encoder_dropout={best.encoder_dropout} decoder_dropout={best.decoder_dropout} "
            f"b4={best.report.b4:.4f} rl={best.report.rl:.4f}"
        )
