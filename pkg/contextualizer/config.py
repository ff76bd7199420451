# contextualizer/config.py
from dataclasses import asdict, dataclass, field, replace

from ticon_lab.exceptions import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0
    projector_hidden: int = 0
    decoder_self_attention: bool = True
    input_dims: dict = field(default_factory=dict)
    target_dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f'd_model {self.d_model} is not divisible by {self.heads} heads')
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigError('encoder and decoder need at least one block each')

    @property
    def head_dim(self):
        return self.d_model // self.heads

    @property
    def hidden(self):
        """Width of the projector / output-head MLPs."""
        return self.projector_hidden or self.d_model

    @property
    def mlp_hidden(self):
        return int(round(self.d_model * self.mlp_ratio))

    def with_encoder(self, encoder_id, dim):
        return replace(
            self,
            input_dims={**self.input_dims, encoder_id: dim},
            target_dims={**self.target_dims, encoder_id: dim},
        )

    def as_dict(self):
        data = asdict(self)
        data['input_dims'] = dict(sorted(self.input_dims.items()))
        data['target_dims'] = dict(sorted(self.target_dims.items()))
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def desk_config(input_dims, target_dims=None, **overrides):
    return ModelConfig(input_dims=dict(input_dims), target_dims=dict(target_dims or input_dims), **overrides)


def paper_config(input_dims, target_dims=None):
    """Published scale, for parameter counting only.

    Query self-attention is off: a cross-attention-only block matches the
    reported decoder size.
    """
    return ModelConfig(
        d_model=1536, encoder_depth=6, decoder_depth=1, heads=12, mlp_ratio=4.0,
        decoder_self_attention=False,
        input_dims=dict(input_dims), target_dims=dict(target_dims or input_dims),
    )
