import sys

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError
from django.utils.translation import gettext as _

from spotscape.apps import module_config
from spotscape.exceptions import SpotscapeError
from spotscape.services import TrainConfig


def _usage_error(parser, message):
    # argparse sort en 2 par défaut ; 2 est réservé aux échecs d'exécution
    if parser.called_from_command_line:
        parser.print_usage(sys.stderr)
        parser.exit(1, f"{parser.prog}: error: {message}\n")
    raise CommandError(f"Error: {message}", returncode=1)


def format_validation_error(exc):
    return "; ".join(exc.messages)


class SpotscapeCommand(BaseCommand):
    """
    Base des commandes : drapeaux globaux --seed / --threads / --out et codes de sortie
    (0 succès, 1 usage ou validation, 2 échec numérique ou d'exécution).
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = lambda message: _usage_error(parser, message)
        return parser

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=None, help=_("Graine aléatoire"))
        parser.add_argument("--threads", type=int, default=None, help=_("Threads de calcul (1 = séquentiel)"))
        parser.add_argument("--out", default=None, help=_("Répertoire de sortie"))
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except ValidationError as exc:
            raise CommandError(format_validation_error(exc), returncode=1)
        except SpotscapeError as exc:
            raise CommandError(str(exc), returncode=2)

    def run(self, **options):
        raise NotImplementedError

    # ------------------------------------------------------------

    def usage_error(self, message):
        raise CommandError(message, returncode=1)

    def defaults(self, options):
        cfg = module_config()
        seed = options.get("seed")
        threads = options.get("threads")
        return (
            cfg["seed"] if seed is None else seed,
            cfg["threads"] if threads is None else threads,
        )

    def add_training_flags(self, parser):
        parser.add_argument("--mode", choices=["single", "multi"], default=None)
        parser.add_argument("--epochs", type=int, default=None)
        parser.add_argument("--learning-rate", type=float, default=None)
        parser.add_argument(
            "--lr-search", action="store_true",
            help=_("Parcourt lr_grid et garde le taux au meilleur critère (silhouette par défaut)"),
        )

    def training_config(self, options, data, **extra):
        """
        Configuration d'entraînement : document puis drapeaux --mode, --epochs, --learning-rate,
        --seed et --threads. train et impute la construisent de la même façon.
        """
        if options["lr_search"] and options["learning_rate"] is not None:
            self.usage_error(_("--lr-search et --learning-rate sont incompatibles"))
        return TrainConfig.from_mapping(
            data,
            mode=options["mode"],
            seed=options["seed"],
            threads=options["threads"],
            epochs=options["epochs"],
            learning_rate=options["learning_rate"],
            **extra,
        )

    def require_out(self, options):
        if not options.get("out"):
            self.usage_error(_("--out est obligatoire"))
        return options["out"]

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))
