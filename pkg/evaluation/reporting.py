# evaluation/reporting.py
"""Comparison tables over eval results: text, Excel and PDF renderings."""
import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import openpyxl
from django.utils import timezone
from openpyxl.styles import Alignment, Font, PatternFill
from reportlab.lib import colors
from reportlab.lib.pagesizes import A4, landscape
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from ticon_lab.exceptions import DataError

# (better, baseline) pairs reported as differences when both are present
DELTAS = [
    ('ctx', 'raw'),
    ('ctx', 'iso'),
    ('iso', 'raw'),
    ('tangle:ctx', 'tangle:raw'),
    ('tangle:ctx', 'meanpool:ctx'),
]
VARIANT_ORDER = ['raw', 'iso', 'ctx', 'meanpool:raw', 'meanpool:ctx', 'tangle:raw', 'tangle:ctx']


def load_results(paths):
    """Records from results.jsonl files (or run directories holding one)."""
    records = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            path = path / 'results.jsonl'
        if not path.exists():
            raise DataError(f'no eval results at {path}')
        records += [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise DataError('no eval results to report')
    return records


def records_from_db(queryset):
    return [
        {'task': r.task, 'variant': r.variant, 'metric': r.metric, 'value': r.value, 'seed': r.seed,
         'extra': {**r.extra, 'encoder': r.encoder, 'window': r.context_window}}
        for r in queryset
    ]


def comparison_table(records):
    """One row per (task, encoder, window): mean value per variant over seeds, plus deltas."""
    groups = defaultdict(lambda: defaultdict(list))
    metrics = {}
    for record in records:
        extra = record.get('extra', {})
        key = (record['task'], extra.get('encoder', ''), extra.get('window', 0))
        groups[key][record['variant']].append(record['value'])
        metrics[key] = record['metric']
    variants = sorted({v for g in groups.values() for v in g},
                      key=lambda v: (VARIANT_ORDER.index(v) if v in VARIANT_ORDER else len(VARIANT_ORDER), v))
    deltas = [(a, b) for a, b in DELTAS if a in variants and b in variants]
    rows = []
    for key in sorted(groups):
        task, encoder, window = key
        means = {v: float(np.mean(values)) for v, values in groups[key].items()}
        rows.append({
            'task': task, 'encoder': encoder, 'window': window, 'metric': metrics[key],
            'seeds': max(len(values) for values in groups[key].values()),
            'values': means,
            'deltas': {f'{a}-{b}': means[a] - means[b] for a, b in deltas if a in means and b in means},
        })
    return {'variants': variants, 'deltas': [f'{a}-{b}' for a, b in deltas], 'rows': rows}


def table_cells(table):
    header = ['Task', 'Encoder', 'Window', 'Metric', 'Seeds'] + table['variants'] + [
        f'Δ {d}' for d in table['deltas']
    ]
    body = []
    for row in table['rows']:
        body.append(
            [row['task'], row['encoder'], row['window'] or 'slide', row['metric'], row['seeds']]
            + [row['values'].get(v) for v in table['variants']]
            + [row['deltas'].get(d) for d in table['deltas']]
        )
    return header, body


def _fmt(value):
    if value is None:
        return '-'
    if isinstance(value, float):
        return f'{value:.4f}'
    return str(value)


def render_text(table):
    header, body = table_cells(table)
    cells = [header] + [[_fmt(v) for v in row] for row in body]
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(header))]
    lines = []
    for n, row in enumerate(cells):
        lines.append('  '.join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip())
        if n == 0:
            lines.append('  '.join('-' * w for w in widths))
    return '\n'.join(lines) + '\n'


def export_xlsx(table, path):
    """Write the comparison table to an Excel workbook."""
    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = 'Comparison'
    header, body = table_cells(table)

    header_font = Font(bold=True, color='FFFFFF')
    header_fill = PatternFill(start_color='366092', end_color='366092', fill_type='solid')
    header_alignment = Alignment(horizontal='center', vertical='center')

    ws['A1'] = 'Raw vs isolated vs contextualized features'
    ws['A1'].font = Font(bold=True, size=16)
    ws['A2'] = f'Generated on: {timezone.now().strftime("%Y-%m-%d %H:%M")} UTC'

    for col, title in enumerate(header, 1):
        cell = ws.cell(row=4, column=col, value=title)
        cell.font = header_font
        cell.fill = header_fill
        cell.alignment = header_alignment
    for r, row in enumerate(body, 5):
        for col, value in enumerate(row, 1):
            cell = ws.cell(row=r, column=col, value=value)
            if isinstance(value, float):
                cell.number_format = '0.0000'

    for i in range(1, len(header) + 1):
        ws.column_dimensions[openpyxl.utils.get_column_letter(i)].width = 16
    wb.save(path)
    return Path(path)


def export_pdf(table, path):
    """Write the comparison table to a one-section PDF."""
    doc = SimpleDocTemplate(str(path), pagesize=landscape(A4))
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle('ReportTitle', parent=styles['Heading1'], fontSize=16, spaceAfter=12, alignment=1)
    elements = [
        Paragraph('Raw vs isolated vs contextualized features', title_style),
        Paragraph(f'Generated on: {timezone.now().strftime("%Y-%m-%d %H:%M")} UTC', styles['Normal']),
        Spacer(1, 12),
    ]
    header, body = table_cells(table)
    data = [header] + [[_fmt(v) for v in row] for row in body]
    grid = Table(data, repeatRows=1)
    grid.setStyle(TableStyle([
        ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
        ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
        ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTSIZE', (0, 0), (-1, -1), 8),
        ('BOTTOMPADDING', (0, 0), (-1, 0), 8),
        ('BACKGROUND', (0, 1), (-1, -1), colors.beige),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.black),
    ]))
    elements.append(grid)
    doc.build(elements)
    return Path(path)
