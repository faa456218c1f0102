from django.utils.translation import gettext as _

from spotscape.apps import module_config
from spotscape.numeric import configure_threads
from spotscape.services import load_run_config
from spotscape.tasks import run_preprocess_job

from ._base import SpotscapeCommand


class Command(SpotscapeCommand):
    help = "Sélection des gènes variables puis normalisation CPM + log1p des coupes"

    def add_command_arguments(self, parser):
        parser.add_argument("--inputs", nargs="+", default=None)
        parser.add_argument("--config", default=None)
        parser.add_argument("--hvg-n", type=int, default=None)
        parser.add_argument("--target-sum", type=float, default=None)

    def run(self, **options):
        cfg = module_config()
        if options["config"]:
            cfg.update(load_run_config(options["config"]))
        inputs = options["inputs"] or cfg["inputs"]
        out = options["out"] or cfg["out"]
        if not inputs:
            self.usage_error(_("--inputs est obligatoire"))
        if not out:
            self.usage_error(_("--out est obligatoire"))
        _seed, threads = self.defaults(options)
        configure_threads(threads)
        hvg_n = options["hvg_n"] if options["hvg_n"] is not None else cfg["hvg_n"]
        target_sum = options["target_sum"] if options["target_sum"] is not None else cfg["target_sum"]
        dataset, _bundle = run_preprocess_job(inputs, out, hvg_n=hvg_n, target_sum=target_sum)
        self.success(_("%(slices)d coupe(s) prétraitée(s), %(genes)d gènes retenus") % {
            "slices": dataset.n_slices, "genes": dataset.n_genes,
        })
