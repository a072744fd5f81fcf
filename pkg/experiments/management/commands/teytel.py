from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Projector, defining function and slice scan for a finite-dimensional operator family'
    subcommand = 'teytel'
    json_options = ('scan',)
    options = (
        ('--preset', 'preset', {'help': 'Operator family preset'}),
        ('--q0', 'q0', {'nargs': '+', 'help': 'Base parameter'}),
        ('--q', 'q', {'nargs': '+', 'help': 'Parameter for the defining function'}),
        ('--h', 'h', {'nargs': '+', 'help': 'Parameter direction'}),
        ('--level', 'level', {'help': 'Index of the eigenvalue at q0 used as contour center'}),
        ('--radius', 'radius', {'help': 'Contour radius'}),
        ('--nodes', 'nodes', {'help': 'Trapezoid nodes on the contour'}),
        ('--scan', 'scan', {'help': 'Slice scan as JSON: q1_range, q2_range, points, kappa'}),
    )
