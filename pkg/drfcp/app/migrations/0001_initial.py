import uuid

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('output_dir', models.CharField(max_length=500, unique=True)),
                ('config_hash', models.CharField(db_index=True, max_length=64)),
                ('config', models.JSONField(default=dict)),
                ('seed', models.IntegerField(default=0)),
                ('n_partitions', models.IntegerField(default=1)),
                ('status', models.CharField(choices=[('created', 'Created'), ('trained', 'Trained'), ('evaluated', 'Evaluated'), ('failed', 'Failed')], default='created', max_length=20)),
                ('error', models.TextField(blank=True, default='')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='EvaluationRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('method', models.CharField(choices=[('ann_cp', 'ANN CP'), ('ann_mcd', 'ANN MCD'), ('ann_rf', 'ANN RF'), ('drf_std', 'DRF STD'), ('drf_std_ens', 'DRF STD + Ensemble STD')], max_length=20)),
                ('confidence_level', models.FloatField()),
                ('partition', models.IntegerField(blank=True, null=True)),
                ('r2', models.FloatField()),
                ('coverage', models.FloatField()),
                ('mean_width', models.FloatField(blank=True, null=True)),
                ('mad_conditional_coverage', models.FloatField()),
                ('metrics', models.JSONField(default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='evaluations', to='app.experimentrun')),
            ],
            options={
                'ordering': ['method', 'confidence_level', 'partition'],
                'indexes': [models.Index(fields=['run', 'method', 'confidence_level'], name='eval_run_method_cl_idx')],
            },
        ),
    ]
