import numpy as np
import pytest
import torch

from pldg.backbone import EncoderConfig, ViTEncoder, build_encoder, load_checkpoint, load_encoder, save_checkpoint
from pldg.errors import ConfigError, LoadError


@pytest.mark.parametrize(
    "kw",
    [dict(image_size=30, patch_size=4), dict(embed_dim=30, num_heads=4), dict(depth=0), dict(num_classes=1), dict(drop_rate=1.0)],
)
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw)


def test_presets():
    assert EncoderConfig.preset("desk").embed_dim == 128
    vitb = EncoderConfig.preset("vitb16")
    assert (vitb.image_size, vitb.patch_size, vitb.embed_dim, vitb.depth) == (224, 16, 768, 12)
    with pytest.raises(ConfigError):
        EncoderConfig.preset("nope")


def test_forward_plain_shapes():
    m = build_encoder(EncoderConfig(embed_dim=64, depth=2, num_heads=4), seed=0).eval()
    cls, logits = m.forward_plain(torch.rand(2, 3, 32, 32))
    assert cls.shape == (2, 64) and logits.shape == (2, 2)


def test_shape_mismatch_names_dimension(micro_encoder):
    with pytest.raises(ConfigError, match="height/width"):
        micro_encoder.forward_plain(torch.rand(2, 3, 32, 32))
    with pytest.raises(ConfigError, match="channel"):
        micro_encoder.forward_plain(torch.rand(2, 1, 16, 16))


def test_duplicated_rows_give_identical_outputs(micro_encoder):
    x = torch.rand(1, 3, 16, 16).repeat(3, 1, 1, 1)
    _, logits = micro_encoder.forward_plain(x)
    assert torch.equal(logits[0], logits[1]) and torch.equal(logits[1], logits[2])


def test_seeded_build_is_bitwise_reproducible(micro_config, images16):
    a = build_encoder(micro_config, seed=11).eval()
    b = build_encoder(micro_config, seed=11).eval()
    assert torch.equal(a.forward_plain(images16)[1], b.forward_plain(images16)[1])


def test_extract_cls_at_depth_equals_final(micro_encoder, images16):
    cls, _ = micro_encoder.forward_plain(images16)
    assert torch.equal(micro_encoder.extract_cls(images16, micro_encoder.config.depth), cls)
    assert micro_encoder.extract_cls(images16[:1], 1).shape == (1, 16)


def test_extract_cls_layer_range(micro_encoder, images16):
    for bad in (0, 3):
        with pytest.raises(ConfigError):
            micro_encoder.extract_cls(images16, bad)


def test_extract_cls_restores_train_mode(micro_encoder, images16):
    micro_encoder.train()
    out = micro_encoder.extract_cls(images16, 1)
    assert micro_encoder.training and not out.requires_grad


def test_empty_prompt_is_identity(micro_encoder, images16):
    _, plain = micro_encoder.forward_plain(images16)
    _, prompted = micro_encoder.forward_prompted(images16, torch.zeros(0, 16))
    assert torch.equal(plain, prompted)


def test_prompt_grows_sequence(micro_encoder, images16):
    tokens = micro_encoder.tokens(images16, torch.zeros(4, 16))
    assert tokens.shape == (4, 1 + 4 + 16, 16)
    _, logits = micro_encoder.forward_prompted(images16, torch.randn(4, 16))
    assert logits.shape == (4, 2)


def test_prompt_width_checked(micro_encoder, images16):
    with pytest.raises(ConfigError, match="prompt width"):
        micro_encoder.forward_prompted(images16, torch.zeros(2, 8))


def test_different_prompts_change_logits(micro_encoder, images16):
    # one optimisation step first, so attention is not near-uniform
    opt = torch.optim.SGD(micro_encoder.parameters(), lr=0.5)
    micro_encoder.train()
    loss = micro_encoder(images16, torch.randn(2, 16)).logsumexp(-1).mean()
    loss.backward()
    opt.step()
    micro_encoder.eval()
    g = torch.Generator().manual_seed(1)
    a = micro_encoder.forward_prompted(images16, torch.randn(2, 16, generator=g))[1]
    b = micro_encoder.forward_prompted(images16, torch.randn(2, 16, generator=g))[1]
    assert (a - b).abs().max() > 1e-9


def test_per_sample_prompts_match_shared(micro_encoder, images16):
    p = torch.randn(3, 16)
    shared = micro_encoder.forward_prompted(images16, p)[1]
    per = micro_encoder.forward_prompted(images16, p.expand(4, -1, -1))[1]
    assert torch.allclose(shared, per, atol=1e-6)


def test_patch_permutation_changes_logits(micro_encoder):
    x = torch.rand(1, 3, 16, 16)
    swapped = x.clone()
    swapped[..., :4, :4], swapped[..., 12:, 12:] = x[..., 12:, 12:], x[..., :4, :4]
    assert not torch.allclose(micro_encoder(x), micro_encoder(swapped))


def test_prompt_gradient_matches_finite_differences(micro_encoder64):
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    y = torch.tensor([0, 1])
    p = (0.1 * torch.randn(3, 16, dtype=torch.float64)).requires_grad_()
    f = lambda q: torch.nn.functional.cross_entropy(micro_encoder64(x, q), y)
    f(p).backward()
    num = torch.zeros_like(p)
    eps = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*p.shape):
            e = torch.zeros_like(p)
            e[idx] = eps
            num[idx] = (f(p + e) - f(p - e)) / (2 * eps)
    rel = (p.grad - num).norm() / num.norm()
    assert rel < 1e-4


def test_checkpoint_round_trip(tmp_path, micro_config, images16):
    m = build_encoder(micro_config, seed=5).eval()
    save_checkpoint(tmp_path / "c.pt", micro_config, {f"encoder.{k}": v for k, v in m.state_dict().items()}, seed=5)
    payload = load_checkpoint(tmp_path / "c.pt")
    assert payload["seed"] == 5 and payload["format_version"] == 1 and payload["encoder"] == micro_config
    m2 = load_encoder(tmp_path / "c.pt").eval()
    assert torch.equal(m(images16), m2(images16))


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "none.pt")


def test_freeze_keeps_head_trainable(micro_encoder):
    micro_encoder.set_backbone_trainable(False)
    trainable = {n for n, p in micro_encoder.named_parameters() if p.requires_grad}
    assert trainable and all(n.startswith("head.") for n in trainable)


def test_dropout_only_in_train_mode(images16):
    m = ViTEncoder(EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2, drop_rate=0.5)).eval()
    assert torch.equal(m(images16), m(images16))
