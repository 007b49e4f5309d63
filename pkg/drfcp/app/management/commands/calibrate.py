import math

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Compute and store the conformal calibration of one method, confidence level and partition"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_cell_arguments(parser, required=True)

    def run(self, service, **options):
        calibration = service.calibrate(options["partition"], options["method"], options["cl"])
        q_hat = "inf (unbounded intervals)" if math.isinf(calibration.q_hat) else f"{calibration.q_hat:.6g}"
        self.stdout.write(f"m={calibration.m} k={calibration.k} alpha={calibration.alpha:.3g} q_hat={q_hat}")
