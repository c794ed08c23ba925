"""
URL configuration for wsi_project project.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),  # run tracking
]
