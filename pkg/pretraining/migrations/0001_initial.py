# Generated by Django 5.2.4 on 2026-10-17 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='PretrainRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(choices=[('PRETRAIN', 'OFMM pretraining'), ('ADAPT', 'Frozen-core adaptation'), ('AGGREGATE', 'Slide aggregator pretraining')], max_length=10)),
                ('mode', models.CharField(blank=True, max_length=30)),
                ('encoders', models.CharField(help_text='Comma-separated encoder ids', max_length=200)),
                ('output_dir', models.CharField(max_length=500)),
                ('checkpoint_hash', models.CharField(blank=True, max_length=64)),
                ('seed', models.BigIntegerField()),
                ('iterations', models.PositiveIntegerField(default=0)),
                ('initial_loss', models.FloatField(blank=True, null=True)),
                ('final_loss', models.FloatField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
