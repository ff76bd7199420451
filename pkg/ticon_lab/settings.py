"""
Django settings for the ticon_lab project.

Generated by 'django-admin startproject' using Django 5.2.4, then trimmed to
the pieces a batch pipeline needs: no URL routing, sessions or admin.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/
"""

from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Never used for signing anything; Django refuses to start without one.
SECRET_KEY = 'django-insecure-ticon-lab-batch-pipeline'

DEBUG = False

ALLOWED_HOSTS = []

# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',

    # Custom apps
    'numerics',
    'slides',
    'contextualizer',
    'pretraining',
    'evaluation',
    'aggregation',
    'pipeline',
]

# Database
# The run registry only; every artifact lives in files under the run directories.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

TIME_ZONE = 'UTC'

USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        app: {'handlers': ['console'], 'level': 'INFO', 'propagate': False}
        for app in ('numerics', 'slides', 'contextualizer', 'pretraining',
                    'evaluation', 'aggregation', 'pipeline')
    },
}

# Mock tile encoder registry.
# role: 'pretrain' encoders take part in omni pretraining, 'unseen' ones are
# held out for frozen-core adaptation.
TICON_ENCODERS = [
    {'id': 'enc48', 'dim': 48, 'scale': 'full-tile', 'seed': 4801, 'role': 'pretrain'},
    {'id': 'enc64', 'dim': 64, 'scale': 'quadrant', 'seed': 6401, 'role': 'pretrain'},
    {'id': 'enc96', 'dim': 96, 'scale': 'quadrant', 'seed': 9601, 'role': 'pretrain'},
    {'id': 'enc56', 'dim': 56, 'scale': 'full-tile', 'seed': 5601, 'role': 'unseen'},
    {'id': 'enc80', 'dim': 80, 'scale': 'quadrant', 'seed': 8001, 'role': 'unseen'},
]

# Pipeline defaults, one section per config block.
# Anything here can be overridden by a run config file or --set section.key=value.
TICON = {
    'run': {
        'seed': 20240517,
        'threads': 1,
        # metrics files carry wallclock_ms = 0 so reruns are byte-identical
        'deterministic': True,
    },
    'synth': {
        'slides': 96,
        'rows': 24,
        'cols': 24,
        'regions': 5,
        'latent_dim': 16,
        'genes': 32,
        'alias_pair': '0,1',
        'background_fraction': 0.15,
        'tile_size': 512,
        'candidate_k': 4,
        'min_tissue': 0.55,
        'max_per_slide': 20,
        'heldout_fraction': 0.2,
    },
    'model': {
        'd_model': 64,
        'encoder_depth': 4,
        'decoder_depth': 1,
        'heads': 4,
        'mlp_ratio': 4.0,
        'projector_hidden': 0,  # 0 means d_model
        'decoder_self_attention': True,
    },
    'pretrain': {
        'mode': 'omni-multi-target',
        'batch_size': 32,
        'total_iters': 2000,
        'warmup_iters': 200,
        'base_lr': 1e-3,
        'floor_fraction': 0.1,
        'mask_ratio': 0.75,
        'prediction_ratio': 0.25,
        'beta1': 0.9,
        'beta2': 0.95,
        'weight_decay': 0.05,
        'eval_interval': 100,
        'checkpoint_interval': 500,
        'heldout_items': 64,
        'input_encoders': 'enc48,enc64,enc96',
        'target_encoders': 'enc48,enc64,enc96',
    },
    'adapt': {
        'adapt_iters': 600,
        'batch_size': 32,
        'base_lr': 2e-3,
        'warmup_iters': 60,
    },
    'aggregate': {
        'iters': 1000,
        'batch_size': 32,
        'max_tokens': 256,
        'hidden': 64,
        'heads': 2,
        'slide_dim': 64,
        'attention': 'gated',
        'temperature': 0.1,
        'base_lr': 1e-3,
        'warmup_iters': 50,
        'weight_decay': 0.05,
        'unified': False,
        'eval_interval': 100,
    },
    'eval': {
        'knn_ks': '1,3,5,10,20',
        'pca_dims': 256,
        'ridge_lambdas': '0.01,0.1,1,10,100,1000',
        'probe_cost': 0.5,
        'probe_iters': 400,
        'spot_genes': 16,
        'distance': 'cosine',
        'train_fraction': 0.6,
        'val_fraction': 0.2,
        'tiles_per_slide': 64,
        'context_window': 0,  # 0 means the whole slide
    },
}
