from django.utils.translation import gettext as _

from spotscape.apps import module_config
from spotscape.numeric import configure_threads
from spotscape.tasks import run_evaluate_job

from ._base import SpotscapeCommand


class Command(SpotscapeCommand):
    help = "K-means sur des plongements puis ARI / NMI / CA / silhouette (et silhouette_batch avec --slices)"

    def add_command_arguments(self, parser):
        parser.add_argument("--embeddings", required=True)
        parser.add_argument("--labels", default=None)
        parser.add_argument("--slices", default=None, help=_("CSV avec une colonne slice (ex. spots.csv)"))
        parser.add_argument("--k", type=int, default=None)
        parser.add_argument("--repeats", type=int, default=1)
        parser.add_argument("--anchor", type=int, default=None)
        parser.add_argument("--ari", action="store_true", help=_("Exige les métriques supervisées"))

    def run(self, **options):
        out = self.require_out(options)
        if options["ari"] and not options["labels"]:
            self.usage_error(_("--ari exige --labels"))
        seed, threads = self.defaults(options)
        configure_threads(threads)
        cfg = module_config()
        k = options["k"] if options["k"] is not None else cfg["n_clusters"]
        metrics, _bundle = run_evaluate_job(
            options["embeddings"],
            out,
            k=k,
            seed=seed,
            repeats=options["repeats"],
            labels_path=options["labels"],
            slices_path=options["slices"],
            anchor=options["anchor"],
            restarts=cfg["kmeans_restarts"],
        )
        self.success(_("Métriques écrites (k=%(k)d) : %(values)s") % {"k": k, "values": metrics.to_json()})
