from contextualizer.checkpoint import load_model
from contextualizer.network import contextualize
from pipeline.base import PipelineCommand
from slides.gridio import read_grid, write_grid
from ticon_lab.exceptions import RegistryError


class Command(PipelineCommand):
    help = 'Contextualize one grid file with a trained model (grid file in, grid file out)'
    out_is_directory = False

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, help='Model checkpoint (.tck)')
        parser.add_argument('--encoder', required=True, help='Encoder id of the input grid')
        parser.add_argument('--in', dest='grid_in', required=True, help='Input grid file (.teg)')

    def run(self, cfg, out, **options):
        params, meta = load_model(options['checkpoint'])
        encoder_id = options['encoder']
        if encoder_id not in params.cfg.input_dims:
            raise RegistryError(
                f'checkpoint has no input projector for encoder {encoder_id!r} '
                f'(known: {", ".join(sorted(params.cfg.input_dims))})'
            )
        grid = read_grid(options['grid_in'])
        if grid.encoder_id != encoder_id:
            raise RegistryError(f'grid was produced by encoder {grid.encoder_id!r}, not {encoder_id!r}')

        self.stdout.write(f'Contextualizing {grid.rows}x{grid.cols} grid ({grid.n_valid} valid tiles)...')
        result = contextualize(params, encoder_id, grid)
        write_grid(result, out)
        self.stdout.write(self.style.SUCCESS(f'Wrote {result.encoder_id} grid to {out}'))
