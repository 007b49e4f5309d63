from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Write the train/cal/test CSVs of every partition for a synthetic data source"

    def run(self, service, **options):
        written = service.synthesize()
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(written)} files to {service.output_dir}"))
