from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Evaluate every (method, confidence level, partition) cell and write reports and tables"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_cell_arguments(parser, required=False)

    def run(self, service, **options):
        aggregate = service.evaluate(options.get("partition"), options.get("method"), options.get("cl"))
        for report in aggregate:
            self.stdout.write(
                f"{report.method:<12} cl={report.confidence_level:.2f} "
                f"coverage={report.coverage:.4f} width={report.mean_width:.4g} "
                f"mad={report.mad_conditional_coverage:.4f}"
            )
        self.stdout.write(self.style.SUCCESS(f"Reports written to {service.output_dir}"))
