from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Span test of Id, A'[v1*v2] and A'[h_a] on a two-dimensional eigenspace"
    subcommand = 'sah2'
    options = (
        ('--metric', 'metric', {'help': 'Constant metric; a seeded random one by default'}),
        ('--K', 'K', {'help': 'Fourier truncation'}),
        ('--level', 'level', {'help': 'Index of the positive oracle level'}),
        ('--a-grid', 'a_grid', {'nargs': '+', 'help': 'Tilt parameters a'}),
        ('--det-tol', 'det_tol', {'help': 'Relative determinant threshold'}),
    )
