from django.db import models


class EvalResult(models.Model):
    TASK_CHOICES = [
        ('tile', 'Tile classification'),
        ('tile-aliased', 'Tile classification (aliased pair)'),
        ('tile-nonaliased', 'Tile classification (other classes)'),
        ('spot', 'Spot expression regression'),
        ('slide', 'Slide classification'),
    ]

    task = models.CharField(max_length=20, choices=TASK_CHOICES)
    variant = models.CharField(max_length=30)
    metric = models.CharField(max_length=20)
    value = models.FloatField()
    chosen = models.FloatField(help_text="Hyperparameter picked on the validation split")
    encoder = models.CharField(max_length=50)
    context_window = models.PositiveIntegerField(default=0)
    seed = models.BigIntegerField()
    checkpoint_hash = models.CharField(max_length=64, blank=True)
    output_dir = models.CharField(max_length=500)
    extra = models.JSONField(default=dict, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    def __str__(self):
        return f"{self.get_task_display()} {self.variant} {self.metric}={self.value:.4f}"

    class Meta:
        ordering = ['task', 'encoder', 'variant', '-created_at']
