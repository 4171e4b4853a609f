"""Small configurations shared by the training and CLI tests."""
from tapir.config import Config

TINY_CFG = """\
[model]
lstm_hidden = 16
ctrl_hidden = 16
memory_size = 3
reviser_layers = 1
d_model = 16
ffn_dim = 32
heads = 2
embed_dim = 8

[train]
lr = 3e-3
batch = 16
clip = 1.0
epochs = 3
patience = 2
dropout = 0.0
seed = 5
unk_prob = 0.0
warmup = 1
decay_points = 10
tapir_lr = 3e-3
tapir_clip = 1.0

[signal]
epochs = 2
warmup = 1
lr = 3e-3
dropout = 0.0
batch = 16
ffn_dim = 32
d_model = 16
heads = 2
"""


def tiny_config(**train) -> Config:
    import configparser

    from tapir.config import config_from_parser

    p = configparser.ConfigParser(interpolation=None)
    p.read_string(TINY_CFG)
    for k, v in train.items():
        p.set("train", k, str(v))
    return config_from_parser(p)
