from django.utils.translation import gettext as _

from spotscape.data import SyntheticSpec
from spotscape.numeric import configure_threads
from spotscape.tasks import run_synth_job

from ._base import SpotscapeCommand


class Command(SpotscapeCommand):
    help = "Génère des coupes synthétiques en bandes horizontales (comptages de Poisson, étiquettes de vérité)"

    def add_command_arguments(self, parser):
        parser.add_argument("--spots", type=int, default=900)
        parser.add_argument("--genes", type=int, default=200)
        parser.add_argument("--domains", type=int, default=3)
        parser.add_argument("--slices", type=int, default=1)
        parser.add_argument("--batch-shift", type=float, default=0.0)

    def run(self, **options):
        out = self.require_out(options)
        seed, threads = self.defaults(options)
        configure_threads(threads)
        spec = SyntheticSpec(
            spots=options["spots"],
            genes=options["genes"],
            domains=options["domains"],
            slices=options["slices"],
            batch_shift=options["batch_shift"],
            seed=seed,
        )
        dataset, _bundle = run_synth_job(spec, out)
        self.success(_("%(slices)d coupe(s) de %(spots)d spots écrite(s) dans %(out)s") % {
            "slices": dataset.n_slices, "spots": spec.spots, "out": out,
        })
