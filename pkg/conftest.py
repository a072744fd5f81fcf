import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'beltrami_lab.settings')
django.setup()
