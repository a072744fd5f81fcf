from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Low-lying coclosed Beltrami and closed Hodge spectra of a DEC mesh on T3'
    subcommand = 'spectrum'
    options = (
        ('--n', 'n', {'help': 'Cubes per side'}),
        ('--metric', 'metric', {'help': '"I", inline JSON or a metric file'}),
        ('--which', 'which', {'help': 'coclosed, closed or both'}),
        ('--count', 'count', {'help': 'Number of eigenpairs'}),
        ('--max-abs', 'max_abs', {'help': 'Return every coclosed eigenvalue with |lambda| below this'}),
        ('--export-matrices', 'export_matrices', {'action': 'store_true', 'help': 'Write COO matrix files'}),
    )
