from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'First-order eigenvalue variations checked against central finite differences'
    subcommand = 'perturb'
    json_options = ('direction',)
    options = (
        ('--source', 'source', {'help': 'oracle or mesh'}),
        ('--metric', 'metric', {'help': '"I", inline JSON or a metric file'}),
        ('--n', 'n', {'help': 'Cubes per side (mesh source)'}),
        ('--K', 'K', {'help': 'Fourier truncation (oracle source)'}),
        ('--k', 'k', {'nargs': 3, 'help': 'Wavevector of the oracle level'}),
        ('--sign', 'sign', {'help': 'Sign of the oracle level'}),
        ('--direction', 'direction', {'help': 'Constant symmetric 3x3 direction as JSON'}),
        ('--count', 'count', {'help': 'Number of mesh eigenpairs'}),
        ('--fd-step', 'fd_step', {'help': 'Finite-difference step'}),
    )
