"""Shared test fixtures: small, fast run configurations."""

from fedsvd.config import RunConfig


def small_config(**kw):
    base = dict(
        strategy="fedsvd",
        svd_period=1,
        clients=3,
        participants=2,
        rounds=3,
        local_steps=2,
        learning_rate=0.3,
        batch_size=16,
        classes=3,
        feature_dim=8,
        train_size=240,
        margin=3.0,
        rank=4,
        lora_alpha=4.0,
        pretrain_steps=50,
        epsilon=None,
        seeds=(0,),
        record_timing=False,
    )
    base.update(kw)
    return RunConfig(**base)
