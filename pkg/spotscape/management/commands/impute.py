from django.utils.translation import gettext as _

from spotscape.services import load_run_config
from spotscape.tasks import run_impute_job

from ._base import SpotscapeCommand


class Command(SpotscapeCommand):
    help = "Écrit l'expression reconstruite (imputée) à partir d'un point de reprise"

    def add_command_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--inputs", nargs="+", required=True)
        parser.add_argument(
            "--config", default=None,
            help=_("Configuration d'entraînement attendue ; refus si l'empreinte diffère"),
        )
        # mêmes surcharges que train, pour recalculer la même empreinte
        self.add_training_flags(parser)

    def run(self, **options):
        out = self.require_out(options)
        config = None
        if options["config"]:
            config = self.training_config(options, load_run_config(options["config"]))
        elif options["mode"] or options["epochs"] is not None or options["learning_rate"] is not None \
                or options["lr_search"]:
            self.usage_error(_("--mode, --epochs, --learning-rate et --lr-search exigent --config"))
        imputed, _bundle = run_impute_job(
            options["checkpoint"], options["inputs"], out, config=config, lr_searched=options["lr_search"],
        )
        self.success(_("Matrice imputée %(rows)d × %(cols)d écrite dans %(out)s") % {
            "rows": imputed.shape[0], "cols": imputed.shape[1], "out": out,
        })
