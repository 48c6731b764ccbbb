from captioner.management.base import FusecapCommand
from captioner.trainer import caption, load_checkpoint


class Command(FusecapCommand):
    help = "Caption a single image (plus depth map or feature file when the checkpoint needs them)"

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--rgb")
        parser.add_argument("--depth")
        parser.add_argument("--features")

    def run(self, **options):
        trained = load_checkpoint(options["checkpoint"])
        self.stdout.write(caption(trained, options["rgb"], options["depth"], options["features"]))
