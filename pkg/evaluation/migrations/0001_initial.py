# Generated by Django 5.2.4 on 2026-10-17 10:02

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='EvalResult',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('task', models.CharField(choices=[('tile', 'Tile classification'), ('tile-aliased', 'Tile classification (aliased pair)'), ('tile-nonaliased', 'Tile classification (other classes)'), ('spot', 'Spot expression regression'), ('slide', 'Slide classification')], max_length=20)),
                ('variant', models.CharField(max_length=30)),
                ('metric', models.CharField(max_length=20)),
                ('value', models.FloatField()),
                ('chosen', models.FloatField(help_text='Hyperparameter picked on the validation split')),
                ('encoder', models.CharField(max_length=50)),
                ('context_window', models.PositiveIntegerField(default=0)),
                ('seed', models.BigIntegerField()),
                ('checkpoint_hash', models.CharField(blank=True, max_length=64)),
                ('output_dir', models.CharField(max_length=500)),
                ('extra', models.JSONField(blank=True, default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['task', 'encoder', 'variant', '-created_at'],
            },
        ),
    ]
