# Generated manually for the run-tracking models

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='SyntheticSlide',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('slide_id', models.CharField(max_length=100)),
                ('dataset_dir', models.CharField(help_text='Directory the slide was written to', max_length=500)),
                ('height', models.PositiveIntegerField()),
                ('width', models.PositiveIntegerField()),
                ('stain_domain', models.CharField(choices=[('A', 'Domain A (pink stain)'), ('B', 'Domain B (purple stain)')], max_length=1)),
                ('n_lesions', models.PositiveIntegerField(default=0)),
                ('is_positive', models.BooleanField(default=False)),
                ('seed', models.BigIntegerField()),
                ('image_path', models.CharField(max_length=500)),
                ('mask_path', models.CharField(blank=True, max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Synthetic Slide',
                'verbose_name_plural': 'Synthetic Slides',
                'ordering': ['-created_at', 'slide_id'],
            },
        ),
        migrations.CreateModel(
            name='SlideDecisionRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('slide_id', models.CharField(db_index=True, max_length=100)),
                ('run_dir', models.CharField(max_length=500)),
                ('pre_label', models.CharField(choices=[('positive', 'Positive'), ('negative', 'Negative')], max_length=10)),
                ('score', models.FloatField()),
                ('stage_reached', models.PositiveSmallIntegerField(choices=[(1, 'Stage 1 (WSI triage)'), (2, 'Stage 2 (key patches)'), (3, 'Stage 3 (segmentation)')], default=1)),
                ('n_extracted', models.PositiveIntegerField(default=0)),
                ('n_roi_kept', models.PositiveIntegerField(default=0)),
                ('n_scored', models.PositiveIntegerField(default=0)),
                ('n_key', models.PositiveIntegerField(default=0)),
                ('stage1_seconds', models.FloatField(default=0.0)),
                ('stage2_seconds', models.FloatField(default=0.0)),
                ('stage3_seconds', models.FloatField(default=0.0)),
                ('mask_path', models.CharField(blank=True, max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Slide Decision',
                'verbose_name_plural': 'Slide Decisions',
                'ordering': ['-created_at', 'slide_id'],
            },
        ),
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(choices=[('stage1', 'Stage-1 classifier'), ('stage2', 'Stage-2 ensemble'), ('segmentation', 'Adversarial segmentation')], max_length=20)),
                ('status', models.CharField(choices=[('RUNNING', 'Running'), ('COMPLETED', 'Completed'), ('FAILED', 'Failed')], default='RUNNING', max_length=10)),
                ('out_dir', models.CharField(max_length=500)),
                ('seed', models.BigIntegerField(default=0)),
                ('effective_config', models.JSONField(default=dict)),
                ('final_losses', models.JSONField(blank=True, default=dict)),
                ('report', models.JSONField(blank=True, default=dict)),
                ('error', models.TextField(blank=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'verbose_name': 'Training Run',
                'verbose_name_plural': 'Training Runs',
                'ordering': ['-created_at'],
            },
        ),
    ]
