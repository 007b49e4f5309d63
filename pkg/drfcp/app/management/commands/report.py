from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Print the partition-averaged accuracy and interval tables of an evaluated run"

    def run(self, service, **options):
        accuracy, intervals = service.report()
        self.stdout.write(accuracy.to_string(index=False, float_format=lambda v: f"{v:.5f}"))
        self.stdout.write("")
        self.stdout.write(intervals.to_string(index=False, float_format=lambda v: f"{v:.5f}"))
