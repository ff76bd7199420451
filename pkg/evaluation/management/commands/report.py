from evaluation.models import EvalResult
from evaluation.reporting import (
    comparison_table, export_pdf, export_xlsx, load_results, records_from_db, render_text,
)
from pipeline.base import PipelineCommand
from ticon_lab.exceptions import DataError


class Command(PipelineCommand):
    help = 'Render raw / iso / ctx comparison tables from eval results'
    out_required = False

    def add_command_arguments(self, parser):
        parser.add_argument(
            'results', nargs='*',
            help='results.jsonl files or eval run directories (default: every result in the run registry)',
        )
        parser.add_argument('--task', help='Only report this task')
        parser.add_argument('--xlsx', help='Also write the table to this Excel file')
        parser.add_argument('--pdf', help='Also write the table to this PDF file')

    def run(self, cfg, out, **options):
        if options['results']:
            records = load_results(options['results'])
        else:
            records = records_from_db(EvalResult.objects.all())
        if options['task']:
            records = [r for r in records if r['task'] == options['task']]
        if not records:
            raise DataError('no eval results to report')

        table = comparison_table(records)
        text = render_text(table)
        self.stdout.write(text)
        if out is not None:
            self.write_json('report.json', table)
            (out / 'report.txt').write_text(text)
        if options['xlsx']:
            export_xlsx(table, options['xlsx'])
            self.stdout.write(self.style.SUCCESS(f'Excel report written to {options["xlsx"]}'))
        if options['pdf']:
            export_pdf(table, options['pdf'])
            self.stdout.write(self.style.SUCCESS(f'PDF report written to {options["pdf"]}'))
