from captioner.management.base import FusecapCommand
from captioner.synthetic import generate_synthetic_dataset


class Command(FusecapCommand):
    help = "Write the synthetic depth-discriminative dataset (images, manifests, feature files)"

    def add_arguments(self, parser):
        parser.add_argument("--out", required=True)
        parser.add_argument("--n-train", type=int, required=True)
        parser.add_argument("--n-test", type=int, required=True)
        parser.add_argument("--n-val", type=int, default=0)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--image-size", type=int, default=32)

    def run(self, **options):
        dataset = generate_synthetic_dataset(
            options["out"],
            options["n_train"],
            options["n_test"],
            image_size=options["image_size"],
            seed=options["seed"],
            n_val=options["n_val"],
        )
        for split, path in dataset.manifests.items():
            self.stdout.write(f"{split} {path}")
        self.stdout.write(f"features {dataset.root / 'features'}")
