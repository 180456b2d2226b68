import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dgtse.backend import IGNORE, Backend, BackendConfig
from dgtse.errors import ConfigError, DataError, ShapeError


def make_backend(codec, seed=0, **kw):
    torch.manual_seed(seed)
    return Backend(BackendConfig.toy(**kw), codec).eval()


def waves(seed, *lengths):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(1, n, generator=g) - 0.5 for n in lengths]


def test_defaults_match_reference_sizes(small_codec):
    cfg = BackendConfig()
    assert (cfg.d_model, cfg.conformer_layers, cfg.decoder_layers, cfg.refiner_layers) == (512, 6, 10, 6)
    assert cfg.decoder_heads == 8 and cfg.n_coarse == 2
    with pytest.raises(ConfigError):
        Backend(BackendConfig.toy(n_coarse=5), small_codec)
    with pytest.raises(ConfigError):
        BackendConfig(input_mode="wavlm")


def test_conformer_weight_sharing_and_gradient(small_codec):
    be = make_backend(small_codec)
    (w,) = waves(0, 3000)
    feats = be.features(w)
    e_r, e_m = be.encode_streams(w, w)
    assert torch.equal(e_r, e_m)
    assert e_m.shape == (1, small_codec.n_frames(3000), 64)
    assert feats.shape[-1] == 64
    be.conformer_encode(feats).pow(2).mean().backward()
    assert all(p.grad is not None and p.grad.norm() > 0 for p in be.encoder.parameters())


def test_sequence_layout_counting(small_codec):
    be = make_backend(small_codec)
    e_r, e_m = torch.randn(1, 7, 64), torch.randn(1, 5, 64)
    tokens = torch.randint(0, 32, (1, 2, 5))
    seq = be.build_ar_sequence(e_r, e_m, tokens)
    assert len(seq) == 1 + 7 + 1 + 5 + 1 + 5 + 1
    assert seq.kinds == ["bos"] + ["ref"] * 7 + ["sep"] + ["mix"] * 5 + ["tse"] + ["target"] * 5 + ["eos"]
    assert int(seq.loss_mask.sum()) == 5 + 1
    assert torch.all(seq.labels[:, :, ~seq.loss_mask] == IGNORE)
    gen = be.build_ar_sequence(e_r, e_m)
    assert gen.kinds[-1] == "tse" and gen.labels is None
    with pytest.raises(ShapeError):
        be.build_ar_sequence(e_r, e_m, torch.randint(0, 32, (1, 3, 5)))


def test_ref_output_layout(small_codec):
    be = make_backend(small_codec, output_layout="ref_output")
    e_r, e_m = torch.randn(1, 7, 64), torch.randn(1, 5, 64)
    tokens, ref_tokens = torch.randint(0, 32, (1, 2, 5)), torch.randint(0, 32, (1, 2, 7))
    seq = be.build_ar_sequence(e_r, e_m, tokens, ref_tokens)
    assert "sep" not in seq.kinds
    assert seq.kinds.count("target") == 5 + 7
    assert len(seq) == 1 + 7 + 5 + 1 + 12 + 1
    assert torch.equal(seq.labels[:, :, seq.target_start:seq.target_start + 7], ref_tokens)


def test_empty_target_is_data_error(small_codec):
    be = make_backend(small_codec)
    with pytest.raises(DataError):
        be.ar_forward_loss(be.build_ar_sequence(torch.randn(1, 3, 64), torch.randn(1, 4, 64)))


def test_initial_ce_is_log_vocab(small_codec):
    be = make_backend(small_codec)
    seq = be.build_ar_sequence(torch.randn(1, 9, 64), torch.randn(1, 20, 64), torch.randint(0, 32, (1, 2, 20)))
    ce, _ = be.ar_forward_loss(seq)
    assert abs(ce.item() - math.log(be.vocab + 1)) < 0.15


def test_loss_equals_masked_manual_ce(small_codec):
    be = make_backend(small_codec)
    seq = be.build_ar_sequence(torch.randn(2, 4, 64), torch.randn(2, 6, 64), torch.randint(0, 32, (2, 2, 6)))
    ce, logits = be.ar_forward_loss(seq)
    logp = logits.detach().double().log_softmax(-1)
    total, count = 0.0, 0
    for b in range(2):
        for h in range(2):
            for j in range(len(seq) - 1):
                if seq.loss_mask[j + 1]:
                    total -= float(logp[b, h, j, seq.labels[b, h, j + 1]])
                    count += 1
    assert count == 2 * 2 * 7
    assert abs(ce.item() - total / count) < 1e-5


def test_causality_perturbing_target_frame(small_codec):
    be = make_backend(small_codec)
    e_r, e_m = torch.randn(1, 4, 64), torch.randn(1, 6, 64)
    tokens = torch.randint(0, 32, (1, 2, 6))
    base = be.ar_forward_loss(be.build_ar_sequence(e_r, e_m, tokens))[1]
    for t in range(6):
        pert = tokens.clone()
        pert[0, :, t] = (pert[0, :, t] + 7) % 32
        seq = be.build_ar_sequence(e_r, e_m, pert)
        logits = be.ar_forward_loss(seq)[1]
        pos = seq.target_start + t            # slot index of target frame t
        assert torch.equal(logits[:, :, :pos], base[:, :, :pos])
        assert not torch.equal(logits[:, :, pos:], base[:, :, pos:])


def test_label_path_gradient_zero_on_context_slots(small_codec):
    be = make_backend(small_codec)
    seq = be.build_ar_sequence(torch.randn(1, 4, 64), torch.randn(1, 6, 64), torch.randint(0, 32, (1, 2, 6)))
    logits = be._run_decoder(seq.embeddings[:, :-1])
    logits.retain_grad()
    F.cross_entropy(logits.reshape(-1, logits.shape[-1]), seq.labels[:, :, 1:].reshape(-1),
                    ignore_index=IGNORE).backward()
    predicts_target = seq.loss_mask[1:]
    assert torch.all(logits.grad[:, :, ~predicts_target] == 0)
    assert torch.all(logits.grad[:, :, predicts_target].abs().sum(-1) > 0)


@pytest.mark.parametrize("layout", ["aligned", "ref_output"])
def test_teacher_forcing_matches_generation_path(small_codec, layout):
    be = make_backend(small_codec, output_layout=layout)
    e_r, e_m = torch.randn(1, 5, 64), torch.randn(1, 8, 64)
    tokens = torch.randint(0, 32, (1, 2, 8))
    ref_tokens = torch.randint(0, 32, (1, 2, 5)) if layout == "ref_output" else None
    seq = be.build_ar_sequence(e_r, e_m, tokens, ref_tokens)
    tf = be.decoder_logits(seq)
    forced = seq.labels[:, :, seq.target_start:-1]
    _, gen = be.ar_generate(e_r, e_m, force_tokens=forced, return_logits=True)
    n_steps = forced.shape[-1] + 1
    assert gen.shape[1] == n_steps
    ref = tf[0, :, seq.target_start - 1: seq.target_start - 1 + n_steps]
    assert (gen - ref).abs().max() < 1e-5


def test_greedy_generation_deterministic_and_capped(small_codec):
    be = make_backend(small_codec)
    e_r, e_m = torch.randn(1, 5, 64), torch.randn(1, 8, 64)
    a, b = be.ar_generate(e_r, e_m), be.ar_generate(e_r, e_m)
    assert torch.equal(a, b)
    assert a.shape[0] == 2 and a.shape[1] <= math.ceil(1.25 * 8)


def test_eos_requires_all_heads(small_codec):
    be = make_backend(small_codec)
    e_r, e_m = torch.randn(1, 5, 64), torch.randn(1, 8, 64)
    with torch.no_grad():
        be.heads[0].bias[be.eos_id] = 100.0
    assert be.ar_generate(e_r, e_m).shape[1] == be.gen_cap(8)
    with torch.no_grad():
        for h in be.heads:
            h.bias[be.eos_id] = 100.0
    assert be.ar_generate(e_r, e_m).shape[1] == 0


def test_top_k_sampling_seeded(small_codec):
    be = make_backend(small_codec)
    e_r, e_m = torch.randn(1, 5, 64), torch.randn(1, 8, 64)
    a = be.ar_generate(e_r, e_m, top_k=5, generator=torch.Generator().manual_seed(3))
    b = be.ar_generate(e_r, e_m, top_k=5, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


@pytest.mark.parametrize("inputs", ["all", "mix", "ref"])
def test_refiner_output_frames(small_codec, inputs):
    be = make_backend(small_codec, refiner_inputs=inputs)
    for lr_, lm in [(1, 4), (9, 4), (3, 17)]:
        out = be.refine_embedding(torch.randn(1, lr_, 64), torch.randn(1, lm, 64), torch.randn(1, lm, 16))
        assert out.shape == (1, lm, 16)
    with pytest.raises(ShapeError):
        be.refine_embedding(torch.randn(1, 3, 64), torch.randn(1, 4, 64), torch.randn(1, 4, 15))


def test_untrained_refiner_passes_coarse_latent_through(small_codec):
    be = make_backend(small_codec)
    coarse = torch.randn(1, 7, 16)
    assert torch.equal(be.refine_embedding(torch.randn(1, 3, 64), torch.randn(1, 7, 64), coarse), coarse)


def test_coarse_from_logits_straight_through(small_codec):
    be = make_backend(small_codec)
    logits = torch.randn(1, 2, 6, be.vocab + 1, requires_grad=True)
    hard = be.coarse_from_logits(logits, straight_through=False)
    soft = be.coarse_from_logits(logits, straight_through=True)
    assert torch.allclose(hard, soft, atol=1e-6)
    assert not hard.requires_grad
    soft.sum().backward()
    assert logits.grad.abs().sum() > 0


@pytest.mark.parametrize("split", [True, False])
def test_refiner_loss_gradient_on_decoder(small_codec, split):
    be = make_backend(small_codec, refiner_split=split)
    be.train()
    m, r, s = waves(1, 3000, 2000, 3000)
    out = be.compute_losses(m, r, s)
    be.zero_grad()
    out["refine"].backward()
    grads = [p.grad for p in list(be.decoder.parameters()) + list(be.heads.parameters())]
    norm = sum(float(g.norm()) for g in grads if g is not None)
    if split:
        assert norm == 0.0
    else:
        assert norm > 0.0


def test_compute_losses_and_extract(small_codec):
    be = make_backend(small_codec)
    m, r, s = waves(2, 4000, 2500, 4000)
    out = be.compute_losses(m, r, s)
    assert torch.isfinite(out["ce"]) and torch.isfinite(out["refine"])
    wav, tokens = be.extract(m[0], r[0], return_tokens=True)
    assert wav.shape == (4000,) and torch.isfinite(wav).all()
    assert tokens.shape[0] == 2


@pytest.mark.parametrize("kw", [dict(input_mode="discrete"), dict(output_layout="ref_output"),
                                dict(refiner_inputs="mix"), dict(n_coarse=3), dict(n_coarse=1)])
def test_ablation_variants_run(small_codec, kw):
    be = make_backend(small_codec, **kw)
    m, r, s = waves(3, 3000, 2000, 3000)
    out = be.compute_losses(m, r, s)
    assert torch.isfinite(out["ce"] + out["refine"])
    wav = be.extract(m[0], r[0])
    assert wav.shape == (3000,) and torch.isfinite(wav).all()


def test_refine_loss_zero_for_perfect_prediction():
    x = torch.randn(1, 5, 16)
    assert float(F.l1_loss(x, x) + F.mse_loss(x, x)) == 0.0
