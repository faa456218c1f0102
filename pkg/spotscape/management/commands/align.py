from django.utils.translation import gettext as _

from spotscape.numeric import configure_threads
from spotscape.tasks import run_align_job

from ._base import SpotscapeCommand


class Command(SpotscapeCommand):
    help = "Apparie chaque spot requête à son plus proche spot de référence et transfère son étiquette"

    def add_command_arguments(self, parser):
        parser.add_argument("--reference", required=True)
        parser.add_argument("--reference-labels", required=True)
        parser.add_argument("--query", required=True)
        parser.add_argument("--query-labels", default=None)

    def run(self, **options):
        out = self.require_out(options)
        _seed, threads = self.defaults(options)
        configure_threads(threads)
        document, _bundle = run_align_job(
            options["reference"],
            options["reference_labels"],
            options["query"],
            out,
            query_labels_path=options["query_labels"],
        )
        self.success(_("Alignement de %(n)d spots, ltari=%(ltari)s") % {
            "n": document["n_query"], "ltari": document["ltari"],
        })
