from django.db import models


class PretrainRun(models.Model):
    KIND_CHOICES = [
        ('PRETRAIN', 'OFMM pretraining'),
        ('ADAPT', 'Frozen-core adaptation'),
        ('AGGREGATE', 'Slide aggregator pretraining'),
    ]

    kind = models.CharField(max_length=10, choices=KIND_CHOICES)
    mode = models.CharField(max_length=30, blank=True)
    encoders = models.CharField(max_length=200, help_text="Comma-separated encoder ids")
    output_dir = models.CharField(max_length=500)
    checkpoint_hash = models.CharField(max_length=64, blank=True)
    seed = models.BigIntegerField()
    iterations = models.PositiveIntegerField(default=0)
    initial_loss = models.FloatField(blank=True, null=True)
    final_loss = models.FloatField(blank=True, null=True)
    created_at = models.DateTimeField(auto_now_add=True)

    def __str__(self):
        return f"{self.get_kind_display()} {self.mode} - {self.output_dir}"

    @property
    def loss_reduction(self):
        if not self.initial_loss or self.final_loss is None:
            return None
        return 1.0 - self.final_loss / self.initial_loss

    class Meta:
        ordering = ['-created_at']
