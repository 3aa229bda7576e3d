import os

from celery import Celery

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')

app = Celery('rtdforge')

app.config_from_object('django.conf:settings', namespace='CELERY')

# Pretraining runs hold a worker for hours; one task per prefetch.
app.conf.worker_prefetch_multiplier = 1
app.conf.task_acks_late = True

app.autodiscover_tasks()
