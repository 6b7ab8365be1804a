import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'saliency_trust.settings')
django.setup()
