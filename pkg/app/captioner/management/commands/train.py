from captioner.management.base import FusecapCommand
from captioner.runconfig import load_run_config
from captioner.trainer import train


class Command(FusecapCommand):
    help = "Train a captioning model from a run config and write its checkpoint"

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Run config file (key = value)")

    def run(self, **options):
        result = train(load_run_config(options["config"]))
        final = result.losses[-1] if result.losses else float("nan")
        self.stdout.write(f"checkpoint {result.checkpoint}")
        self.stdout.write(f"final_loss {final:.6f}")
