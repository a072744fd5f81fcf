from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Closed-form crossing certificate for the Hopf fields on the round 3-sphere'
    subcommand = 'sphere3'
    options = (
        ('--n-eta', 'n_eta', {'help': 'Gauss-Legendre nodes in eta'}),
        ('--n-xi', 'n_xi', {'help': 'Uniform nodes per xi angle'}),
        ('--tol', 'tol', {'help': 'Residual and grid-doubling tolerance'}),
    )
