# Generated migration for RunManifest model

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='RunManifest',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(db_index=True, max_length=64)),
                ('run_dir', models.CharField(max_length=1024, unique=True)),
                ('config_digest', models.CharField(db_index=True, max_length=64)),
                ('config', models.JSONField(default=dict)),
                ('seeds', models.JSONField(default=list)),
                ('started_at', models.DateTimeField()),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
                ('status', models.CharField(choices=[('completed', 'Completed'), ('collapsed', 'Collapsed'), ('failed', 'Failed')], max_length=16)),
                ('artifacts', models.JSONField(default=dict)),
                ('error', models.TextField(blank=True, default='')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('modified_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
        migrations.AddIndex(
            model_name='runmanifest',
            index=models.Index(fields=['command', 'status'], name='rtdforge_ru_command_idx'),
        ),
    ]
