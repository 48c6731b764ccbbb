from captioner.management.base import FusecapCommand
from captioner.runconfig import load_run_config
from captioner.trainer import param_count


class Command(FusecapCommand):
    help = "Print trainable and total parameter counts per module group"

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True)
        parser.add_argument("--vocab-size", type=int, help="Decoder vocabulary size; defaults to model.vocab_size or data.train")

    def run(self, **options):
        rows = param_count(load_run_config(options["config"]), options["vocab_size"])
        self.write_csv(["group", "trainable", "total"], [(r.group, r.trainable, r.total) for r in rows])
