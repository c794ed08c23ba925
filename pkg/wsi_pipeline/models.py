"""
Database models for tracking pipeline runs in the admin.

Files stay the interface of the pipeline; these rows only record what was
generated, trained and inferred so runs can be browsed and exported.
"""
from django.db import models
from django.utils import timezone


class SyntheticSlide(models.Model):
    """
    One generated synthetic slide.
    """
    DOMAIN_CHOICES = [
        ('A', 'Domain A (pink stain)'),
        ('B', 'Domain B (purple stain)'),
    ]

    slide_id = models.CharField(max_length=100)
    dataset_dir = models.CharField(max_length=500, help_text="Directory the slide was written to")
    height = models.PositiveIntegerField()
    width = models.PositiveIntegerField()
    stain_domain = models.CharField(max_length=1, choices=DOMAIN_CHOICES)
    n_lesions = models.PositiveIntegerField(default=0)
    is_positive = models.BooleanField(default=False)
    seed = models.BigIntegerField()
    image_path = models.CharField(max_length=500)
    mask_path = models.CharField(max_length=500, blank=True)

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at', 'slide_id']
        verbose_name = 'Synthetic Slide'
        verbose_name_plural = 'Synthetic Slides'

    def __str__(self):
        label = 'positive' if self.is_positive else 'negative'
        return f"{self.slide_id} ({self.width}x{self.height}, {label})"


class SlideDecisionRecord(models.Model):
    """
    Outcome of running the three-stage pipeline on one slide.
    """
    LABEL_CHOICES = [
        ('positive', 'Positive'),
        ('negative', 'Negative'),
    ]
    STAGE_CHOICES = [
        (1, 'Stage 1 (WSI triage)'),
        (2, 'Stage 2 (key patches)'),
        (3, 'Stage 3 (segmentation)'),
    ]

    slide_id = models.CharField(max_length=100, db_index=True)
    run_dir = models.CharField(max_length=500)
    pre_label = models.CharField(max_length=10, choices=LABEL_CHOICES)
    score = models.FloatField()
    stage_reached = models.PositiveSmallIntegerField(choices=STAGE_CHOICES, default=1)

    n_extracted = models.PositiveIntegerField(default=0)
    n_roi_kept = models.PositiveIntegerField(default=0)
    n_scored = models.PositiveIntegerField(default=0)
    n_key = models.PositiveIntegerField(default=0)

    stage1_seconds = models.FloatField(default=0.0)
    stage2_seconds = models.FloatField(default=0.0)
    stage3_seconds = models.FloatField(default=0.0)

    mask_path = models.CharField(max_length=500, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at', 'slide_id']
        verbose_name = 'Slide Decision'
        verbose_name_plural = 'Slide Decisions'

    def __str__(self):
        return f"{self.slide_id} - {self.pre_label} ({self.score:.3f})"

    @property
    def total_seconds(self):
        return self.stage1_seconds + self.stage2_seconds + self.stage3_seconds

    @classmethod
    def from_result(cls, result, run_dir, mask_path=''):
        """Unsaved record for a pipeline InferenceResult."""
        report = result.report
        return cls(
            slide_id=result.slide_id,
            run_dir=str(run_dir),
            pre_label=result.decision.pre_label.value,
            score=result.decision.score,
            stage_reached=report.stage_reached,
            n_extracted=report.n_extracted,
            n_roi_kept=report.n_roi_kept,
            n_scored=report.n_scored,
            n_key=report.n_key,
            stage1_seconds=report.stage1_seconds,
            stage2_seconds=report.stage2_seconds,
            stage3_seconds=report.stage3_seconds,
            mask_path=str(mask_path or ''),
        )


class TrainingRun(models.Model):
    """
    A training invocation for one of the three stages.
    """
    KIND_CHOICES = [
        ('stage1', 'Stage-1 classifier'),
        ('stage2', 'Stage-2 ensemble'),
        ('segmentation', 'Adversarial segmentation'),
    ]
    STATUS_CHOICES = [
        ('RUNNING', 'Running'),
        ('COMPLETED', 'Completed'),
        ('FAILED', 'Failed'),
    ]

    kind = models.CharField(max_length=20, choices=KIND_CHOICES)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='RUNNING')
    out_dir = models.CharField(max_length=500)
    seed = models.BigIntegerField(default=0)
    effective_config = models.JSONField(default=dict)
    final_losses = models.JSONField(default=dict, blank=True)
    report = models.JSONField(default=dict, blank=True)
    error = models.TextField(blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']
        verbose_name = 'Training Run'
        verbose_name_plural = 'Training Runs'

    def __str__(self):
        return f"{self.get_kind_display()} - {self.status} ({self.out_dir})"

    def mark_completed(self, report, final_losses):
        self.status = 'COMPLETED'
        self.report = report
        self.final_losses = final_losses
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'report', 'final_losses', 'finished_at'])

    def mark_failed(self, error):
        self.status = 'FAILED'
        self.error = str(error)
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'error', 'finished_at'])
