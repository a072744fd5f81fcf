from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Track closed and coclosed branches along a metric path and report crossings'
    subcommand = 'track'
    json_options = ('path',)
    options = (
        ('--experiment', 'experiment', {'help': 'path, forced or closed-coclosed'}),
        ('--backend', 'backend', {'help': 'oracle or mesh'}),
        ('--path', 'path', {'help': 'Path as JSON: start, end, rule'}),
        ('--which', 'which', {'help': 'coclosed, closed or both'}),
        ('--n', 'n', {'help': 'Cubes per side (mesh backend)'}),
        ('--K', 'K', {'help': 'Fourier truncation (oracle backend)'}),
        ('--count', 'count', {'help': 'Eigenpairs per solve (mesh backend)'}),
        ('--t-points', 't_points', {'help': 'Grid points in [0, 1]'}),
    )
