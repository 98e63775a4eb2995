import numpy as np
import pytest
import torch

from wearlang import model as M
from wearlang.text import END, PAD, START

SMALL = M.ModelConfig(enc_layers=1, dec_layers=1, hidden_dim=16, heads=2, mlp_dim=32,
                      patch=(2, 120), embed_dim=8, vocab_size=20, L_text=8)


def _x(b=2, seed=0):
    x = np.random.default_rng(seed).normal(size=(b, 26, 1440))
    return torch.from_numpy(x.astype(np.float32))


def test_token_count_for_reference_patch():
    assert M.n_patch_tokens((2, 10)) == 1872
    for name in ("S", "B", "L", "XL"):
        cfg = M.FAMILY[name].validate()
        assert cfg.n_tokens == 1872 and cfg.patch == (2, 10)


@pytest.mark.parametrize("changes", [
    {"patch": (3, 10)}, {"patch": (2, 7)}, {"hidden_dim": 30, "heads": 4}, {"dec_layers": 0},
    {"dropout": 1.0}, {"vocab_size": 3}, {"L_text": 0},
])
def test_invalid_configs_rejected(changes):
    with pytest.raises(ValueError):
        M.ModelConfig(**changes).validate()


def test_patchify_matches_loop_oracle():
    x = torch.arange(26 * 1440, dtype=torch.float32).reshape(1, 26, 1440)
    pf, pt = 2, 60
    out = M.patchify(x, (pf, pt))[0]
    k = 0
    for fb in range(26 // pf):
        for tb in range(1440 // pt):
            block = x[0, fb * pf:(fb + 1) * pf, tb * pt:(tb + 1) * pt].reshape(-1)
            assert torch.equal(out[k], block)
            k += 1
    assert k == out.shape[0]


def test_init_is_seeded_and_follows_the_scheme():
    a, b, c = (M.SensorTextModel(SMALL, seed=s) for s in (1, 1, 2))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    for name, p in a.named_parameters():
        if name.endswith("bias"):
            assert torch.all(p == 0), name
        elif ".ln" in name or name.startswith("ln"):
            assert torch.all(p == 1), name
        else:
            assert p.abs().max() <= 0.04 + 1e-7, name


def test_embeddings_are_unit_norm_and_shapes():
    m = M.SensorTextModel(SMALL)
    tokens, s = M.encode_sensor(m, _x())
    assert tokens.shape == (2, SMALL.n_tokens, 16) and s.shape == (2, 8)
    assert torch.allclose(s.norm(dim=-1), torch.ones(2), atol=1e-6)
    ids = torch.tensor([[START, 5, 6, END, PAD, PAD, PAD, PAD]])
    _, v = M.encode_text(m, ids)
    assert torch.allclose(v.norm(dim=-1), torch.ones(1), atol=1e-6)


def test_text_embedding_ignores_padding():
    m = M.SensorTextModel(SMALL).double()
    short = torch.tensor([[START, 5, 6, END, PAD, PAD]])
    longer = torch.tensor([[START, 5, 6, END, PAD, PAD, PAD, PAD]])
    assert torch.allclose(M.encode_text(m, short)[1], M.encode_text(m, longer)[1], atol=1e-12)


def test_decoder_is_causal():
    m = M.SensorTextModel(SMALL).double()
    tokens, _ = M.encode_sensor(m, _x(1).double())
    a = torch.tensor([[START, 4, 5, 6, 7]])
    b = torch.tensor([[START, 4, 5, 9, 11]])
    la, lb = M.decode_multimodal(m, tokens, a), M.decode_multimodal(m, tokens, b)
    assert torch.allclose(la[:, :3], lb[:, :3], atol=1e-12)
    assert not torch.allclose(la[:, 3:], lb[:, 3:])
    with pytest.raises(ValueError):
        M.decode_multimodal(m, tokens, torch.ones(1, 9, dtype=torch.long))


def test_decoder_attends_to_sensor_tokens():
    m = M.SensorTextModel(SMALL).double()
    prefix = torch.tensor([[START, 4]])
    l1 = M.decode_multimodal(m, M.encode_sensor(m, _x(1, 0).double())[0], prefix)
    l2 = M.decode_multimodal(m, M.encode_sensor(m, _x(1, 1).double())[0], prefix)
    assert not torch.allclose(l1, l2)


def test_greedy_generation_respects_max_len_and_matches_stepwise_argmax():
    m = M.SensorTextModel(SMALL)
    tokens, _ = M.encode_sensor(m, _x(1))
    assert M.generate_ids(m, tokens, 1) == [[]]
    out = M.generate_ids(m, tokens, 6)[0]
    assert len(out) <= 5
    prefix = [START]
    for tok in out:
        logits = M.decode_multimodal(m, tokens, torch.tensor([prefix]))
        assert int(logits[0, -1].argmax()) == tok
        prefix.append(tok)


def test_grad_returns_zeros_for_unused_and_rejects_bad_losses():
    m = M.SensorTextModel(SMALL)
    g = M.grad(m, lambda: M.encode_sensor(m, _x())[1].sum())
    assert set(g) == {n for n, _ in m.named_parameters()}
    assert all(torch.all(g[n] == 0) for n in m.group("decoder"))
    with pytest.raises(ValueError):
        M.grad(m, lambda: M.encode_sensor(m, _x())[1])
    with pytest.raises(FloatingPointError):
        M.grad(m, lambda: M.encode_sensor(m, _x())[1].sum() * float("nan"))


def test_non_finite_activation_reports_parameter_norms():
    m = M.SensorTextModel(SMALL)
    with torch.no_grad():
        m.sensor_encoder.patch_proj.weight.fill_(float("inf"))
    with pytest.raises(FloatingPointError, match="largest parameter norms"):
        M.encode_sensor(m, _x())


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    m = M.SensorTextModel(SMALL, seed=4)
    M.save_checkpoint(m, tmp_path / "a.slmc")
    back = M.load_checkpoint(tmp_path / "a.slmc", expect=SMALL)
    M.save_checkpoint(back, tmp_path / "b.slmc")
    assert (tmp_path / "a.slmc").read_bytes() == (tmp_path / "b.slmc").read_bytes()
    sd, sb = m.state_dict(), back.state_dict()
    assert all(torch.equal(sd[k], sb[k]) for k in sd)


def test_checkpoint_errors(tmp_path):
    m = M.SensorTextModel(SMALL)
    path = tmp_path / "c.slmc"
    M.save_checkpoint(m, path)
    blob = path.read_bytes()
    with pytest.raises(M.CheckpointError, match="config mismatch"):
        M.load_checkpoint(path, expect=SMALL.replace(L_text=9))
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(M.CheckpointError, match="magic"):
        M.load_checkpoint(path)
    path.write_bytes(blob[:-8])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(path)
    path.write_bytes(blob + b"\0")
    with pytest.raises(M.CheckpointError, match="trailing"):
        M.load_checkpoint(path)
    other = M.SensorTextModel(SMALL.replace(hidden_dim=8, mlp_dim=16))
    path.write_bytes(blob)
    _, tensors = M.read_checkpoint(path)
    with pytest.raises(M.CheckpointError, match="shape"):
        M.load_tensors(other, tensors)
    tensors.pop("decoder.head.bias")
    with pytest.raises(M.CheckpointError, match="missing"):
        M.load_tensors(m, tensors)
