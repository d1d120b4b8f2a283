import pytest

from u2u.config import load_config, parse_config
from u2u.errors import ConfigError


def test_defaults():
    cfg = parse_config("")
    assert cfg.k == 100 and cfg.seed == 0
    m = cfg.model_config("discrete")
    assert (m.d_model, m.enc_layers, m.dec_layers, m.heads, m.ffn_dim) == (512, 3, 3, 1, 2048)
    assert m.vocab == 103
    c = cfg.model_config("continuous")
    assert (c.d_model, c.enc_layers, c.dec_layers, c.heads) == (256, 6, 6, 4)
    t = cfg.train_config()
    assert (t.lr, t.batch_size, t.epochs) == (1e-4, 25, 80)


def test_overrides_and_types(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# toy\nk = 16\nd_model = 64\nheads=1\nffn_dim = 256\nenc_layers = 2\ndec_layers = 2\n"
                 "epochs = 40\ndedup = true\nseed = 7\ntrain_manifest = data/train.jsonl\n")
    cfg = load_config(p)
    m = cfg.model_config()
    assert m.vocab == 19 and m.d_model == 64 and m.enc_layers == 2
    assert cfg.train_config().dedup is True and cfg.train_config().seed == 7
    assert cfg.path("train_manifest") == str(tmp_path / "data" / "train.jsonl")


@pytest.mark.parametrize("text", ["bogus = 1", "k = many", "heads = 3\nd_model = 64", "epochs = 0", "k = 1",
                                  "fft_size = 128", "frontend = spectral", "k = 4\nk = 5", "no equals sign"])
def test_rejections(text):
    with pytest.raises(ConfigError):
        parse_config(text)
