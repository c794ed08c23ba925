"""
WSGI config for wsi_project project.

It exposes the WSGI callable as a module-level variable named ``application``,
serving the admin pages that browse tracked runs.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'wsi_project.settings')

application = get_wsgi_application()
