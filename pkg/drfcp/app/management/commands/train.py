from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Train the models the configured methods need, for one or all partitions"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--partition", type=int, action="append", help="Partition index (repeatable; default all)")

    def run(self, service, **options):
        manifest = service.train(options.get("partition"))
        for partition, paths in sorted(manifest.models.items()):
            self.stdout.write(f"{partition}: {', '.join(sorted(paths))}")
        self.stdout.write(self.style.SUCCESS(f"Models written to {service.output_dir}"))
