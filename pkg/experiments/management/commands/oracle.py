from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Exact Fourier spectrum of curl for a constant metric on T3'
    subcommand = 'oracle'
    options = (
        ('--metric', 'metric', {'help': '"I", inline JSON or a metric file'}),
        ('--K', 'K', {'help': 'Fourier truncation |k_i| <= K'}),
        ('--compare-n', 'compare_n', {'help': 'Also solve on a mesh with this many cubes per side'}),
    )
