"""
Django admin configuration for the pipeline run-tracking models.
"""
from django.contrib import admin
from django.http import HttpResponse
import csv

from .models import SlideDecisionRecord, SyntheticSlide, TrainingRun


class CsvExportMixin:
    """
    Adds an `export_as_csv` action writing `csv_fields` of the selected rows.
    """
    csv_fields = []
    actions = ['export_as_csv']

    def export_as_csv(self, request, queryset):
        meta = self.model._meta
        response = HttpResponse(content_type='text/csv')
        response['Content-Disposition'] = f'attachment; filename={meta.model_name}.csv'
        writer = csv.writer(response)

        writer.writerow(self.csv_fields)
        for obj in queryset:
            writer.writerow([getattr(obj, field) for field in self.csv_fields])

        return response

    export_as_csv.short_description = "Export selected rows as CSV"


@admin.register(SyntheticSlide)
class SyntheticSlideAdmin(CsvExportMixin, admin.ModelAdmin):
    list_display = ['slide_id', 'width', 'height', 'stain_domain', 'n_lesions', 'is_positive', 'created_at']
    list_filter = ['is_positive', 'stain_domain', 'created_at']
    search_fields = ['slide_id', 'dataset_dir']
    readonly_fields = ['created_at']
    csv_fields = ['slide_id', 'width', 'height', 'stain_domain', 'n_lesions', 'is_positive', 'seed',
                  'image_path', 'mask_path']


@admin.register(SlideDecisionRecord)
class SlideDecisionRecordAdmin(CsvExportMixin, admin.ModelAdmin):
    """
    Admin interface for inferred slides, with per-stage timings.
    """
    list_display = ['slide_id', 'pre_label', 'score', 'stage_reached', 'n_key', 'total_seconds', 'created_at']
    list_filter = ['pre_label', 'stage_reached', 'created_at']
    search_fields = ['slide_id', 'run_dir']
    readonly_fields = ['created_at']
    fieldsets = (
        ('Decision', {
            'fields': ('slide_id', 'run_dir', 'pre_label', 'score', 'stage_reached', 'mask_path')
        }),
        ('Patch Counts', {
            'fields': ('n_extracted', 'n_roi_kept', 'n_scored', 'n_key')
        }),
        ('Timings', {
            'fields': ('stage1_seconds', 'stage2_seconds', 'stage3_seconds', 'created_at'),
            'classes': ('collapse',)
        }),
    )
    csv_fields = ['slide_id', 'pre_label', 'score', 'stage_reached', 'n_extracted', 'n_roi_kept', 'n_scored',
                  'n_key', 'stage1_seconds', 'stage2_seconds', 'stage3_seconds', 'mask_path']


@admin.register(TrainingRun)
class TrainingRunAdmin(CsvExportMixin, admin.ModelAdmin):
    list_display = ['kind', 'status', 'seed', 'out_dir', 'created_at', 'finished_at']
    list_filter = ['kind', 'status', 'created_at']
    search_fields = ['out_dir', 'error']
    readonly_fields = ['created_at', 'finished_at', 'effective_config', 'final_losses', 'report']
    date_hierarchy = 'created_at'
    csv_fields = ['kind', 'status', 'seed', 'out_dir', 'final_losses', 'created_at', 'finished_at']
