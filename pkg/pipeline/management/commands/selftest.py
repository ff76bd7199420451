from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.test.utils import get_runner

TEST_APPS = ['numerics', 'slides', 'contextualizer', 'pretraining', 'evaluation', 'aggregation', 'pipeline']


class Command(BaseCommand):
    help = 'Run the invariant test suite (slow acceptance runs excluded unless --slow)'

    def add_arguments(self, parser):
        parser.add_argument('--slow', action='store_true', help='Include the slow acceptance tests')
        parser.add_argument('labels', nargs='*', help='Test labels (default: every app)')

    def handle(self, *args, **options):
        runner_class = get_runner(settings)
        runner = runner_class(
            verbosity=options['verbosity'], interactive=False,
            exclude_tags=None if options['slow'] else ['slow'],
        )
        failures = runner.run_tests(options['labels'] or TEST_APPS)
        if failures:
            raise CommandError(f'{failures} test(s) failed', returncode=1)
        self.stdout.write(self.style.SUCCESS('All invariant tests passed.'))
