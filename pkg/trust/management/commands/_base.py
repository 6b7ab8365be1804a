import logging
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError as DjangoValidationError
from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from trust.pipeline import default_workers
from trust.serializers import load_config

logger = logging.getLogger(__name__)


def format_errors(detail, prefix=''):
    """
    Flattens a nested error detail into `dotted.field: message` lines.
    """
    if isinstance(detail, dict):
        lines = []
        for key, value in detail.items():
            lines += format_errors(value, f'{prefix}.{key}' if prefix else str(key))
        return lines
    if isinstance(detail, (list, tuple)):
        lines = []
        for item in detail:
            lines += format_errors(item, prefix)
        return lines
    return [f'{prefix}: {detail}' if prefix else str(detail)]


class StageCommand(BaseCommand):
    """
    Shared flags of the pipeline commands; validation problems become CommandError with exit code 1
    """
    requires_system_checks = []
    stage = None

    def add_arguments(self, parser):
        parser.add_argument('--config', default=None, help='experiment config (JSON); defaults to TRUST_DEFAULT_CONFIG')
        parser.add_argument('--seed', type=int, default=None, help='overrides dataset.seed')
        parser.add_argument('--out', default='runs/default', help='output directory')
        parser.add_argument('--workers', type=int, default=None, help='worker processes for map computation')

    def handle(self, *args, **options):
        try:
            config = load_config(options['config'] or settings.TRUST_DEFAULT_CONFIG, seed=options['seed'])
            workers = options['workers'] or default_workers()
            if workers < 1:
                raise DjangoValidationError(f'--workers must be >= 1, got {workers}.')
            out = Path(options['out'])
            out.mkdir(parents=True, exist_ok=True)
            logger.info('%s: config hash %s, output %s, %d workers', self.stage.__name__, config.hash, out, workers)
            result = self.stage(config, out, workers)
        except ValidationError as exc:
            raise CommandError('\n'.join(format_errors(exc.detail)), returncode=1)
        except DjangoValidationError as exc:
            detail = exc.message_dict if hasattr(exc, 'error_dict') else exc.messages
            raise CommandError('\n'.join(format_errors(detail)), returncode=1)
        self.stdout.write(self.summary(config, out, result))

    def summary(self, config, out, result):
        return f'{self.stage.__name__} finished in {out} (config {config.hash[:12]})'
