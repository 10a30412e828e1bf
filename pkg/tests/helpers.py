"""Tiny configurations shared by the training and CLI tests."""
from tokenrot.config import default_finetune_config, default_pretrain_config, set_value
from tokenrot.synthetic_data import DatasetSpec, generate_dataset

TINY = {"encoder.input_shape": "8,8,8", "encoder.n_stages": "2", "encoder.embed_dims": "8,16",
        "encoder.n_heads": "2,2", "encoder.window_size": "2,2,2", "loss.proj_dim": "8",
        "split": "1,0,0", "n_diag_volumes": "2"}


def tiny_dataset(n=4, seed=0, n_classes=2):
    return generate_dataset(DatasetSpec(n_volumes=n, shape=(8, 8, 8), n_classes=n_classes,
                                        seed=seed, radius_range=(0.2, 0.35)))


def tiny_config(finetune=False, **overrides):
    cfg = default_finetune_config() if finetune else default_pretrain_config()
    for k, v in {**TINY, **overrides}.items():
        set_value(cfg, k.replace("__", "."), str(v))
    return cfg.validate()

#: one "PASS/FAIL criterion ..." line per acceptance criterion, echoed by conftest
ACCEPTANCE_LINES = []


def verdict(number, title, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} | {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
