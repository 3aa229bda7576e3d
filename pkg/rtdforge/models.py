from django.db import models

from rtdforge.services.runs import Manifest


class RunManifest(models.Model):
    """
    Database index of run directories.
    The manifest.json inside ``run_dir`` is the source of truth; rows mirror it.
    """
    STATUS_CHOICES = [
        ('completed', 'Completed'),
        ('collapsed', 'Collapsed'),
        ('failed', 'Failed'),
    ]

    command = models.CharField(max_length=64, db_index=True)
    run_dir = models.CharField(max_length=1024, unique=True)
    config_digest = models.CharField(max_length=64, db_index=True)
    config = models.JSONField(default=dict)
    seeds = models.JSONField(default=list)
    started_at = models.DateTimeField()
    finished_at = models.DateTimeField(null=True, blank=True)
    status = models.CharField(max_length=16, choices=STATUS_CHOICES)
    artifacts = models.JSONField(default=dict)
    error = models.TextField(blank=True, default='')

    created_at = models.DateTimeField(auto_now_add=True)
    modified_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-started_at']
        indexes = [
            models.Index(fields=['command', 'status'], name='rtdforge_ru_command_idx'),
        ]

    def __str__(self):
        return f"{self.command} {self.run_dir} ({self.status})"

    @classmethod
    def record(cls, manifest: Manifest) -> 'RunManifest':
        """Insert or refresh the row for ``manifest.run_dir``."""
        row, _ = cls.objects.update_or_create(
            run_dir=manifest.run_dir,
            defaults={
                'command': manifest.command,
                'config_digest': manifest.config_digest,
                'config': manifest.config,
                'seeds': manifest.seeds,
                'started_at': manifest.started_at,
                'finished_at': manifest.finished_at,
                'status': manifest.status or 'failed',
                'artifacts': manifest.artifacts,
                'error': manifest.error,
            },
        )
        return row
