from django.utils.translation import gettext as _

from spotscape.services import load_run_config
from spotscape.tasks import run_training_job

from ._base import SpotscapeCommand


class Command(SpotscapeCommand):
    help = "Entraîne l'encodeur (mode single ou multi) et écrit plongements, rapport et point de reprise"

    def add_command_arguments(self, parser):
        parser.add_argument("--config", default=None)
        parser.add_argument("--inputs", nargs="+", default=None)
        self.add_training_flags(parser)

    def run(self, **options):
        data = load_run_config(options["config"]) if options["config"] else {}
        config = self.training_config(options, data, inputs=options["inputs"], out=options["out"])
        if not config.inputs:
            self.usage_error(_("--inputs est obligatoire (ou inputs dans la configuration)"))
        if not config.out:
            self.usage_error(_("--out est obligatoire (ou out dans la configuration)"))
        _model, report, bundle = run_training_job(config, search_lr=options["lr_search"])
        self.success(_("Entraînement terminé : %(epochs)d epochs, %(files)d fichiers dans %(out)s") % {
            "epochs": len(report.epochs), "files": len(bundle.files), "out": config.out,
        })
