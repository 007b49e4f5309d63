from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Write per-sample prediction intervals of one method, confidence level and partition"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_cell_arguments(parser, required=True)

    def run(self, service, **options):
        csv_path, plot_path = service.intervals(options["partition"], options["method"], options["cl"])
        self.stdout.write(self.style.SUCCESS(f"Wrote {csv_path} and {plot_path}"))
