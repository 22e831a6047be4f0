import math

import numpy as np
import pytest
import torch

from patchtokens.errors import ShapeError
from patchtokens.losses import robust_ce
from patchtokens.vocab import VisualProjector, expand_vocabulary, logits, project_prototypes


def scalar_projector(x, scale, offset, down, up, eps=1e-5):
    """Row-by-row LayerNorm and two matrix products written as plain loops."""
    out = []
    for row in x:
        d = len(row)
        mean = sum(row) / d
        var = sum((v - mean) ** 2 for v in row) / d
        normed = [(v - mean) / math.sqrt(var + eps) * scale[i] + offset[i] for i, v in enumerate(row)]
        mid = [sum(normed[i] * down[i][j] for i in range(d)) for j in range(len(down[0]))]
        out.append([sum(mid[j] * up[j][k] for j in range(len(mid))) for k in range(len(up[0]))])
    return out


def test_zero_input_zero_output():
    proj = VisualProjector(8)
    out = project_prototypes(torch.zeros(3, 8), proj)
    assert torch.equal(out, torch.zeros(3, 8))


def test_identity_projector():
    proj = VisualProjector(6, rank=6)
    with torch.no_grad():
        proj.down.copy_(torch.eye(6))
        proj.up.copy_(torch.eye(6))
    row = torch.tensor([[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]])  # mean 0, variance 1
    torch.testing.assert_close(project_prototypes(row, proj), row, atol=1e-5, rtol=0)


def test_projector_matches_scalar_loop():
    torch.manual_seed(3)
    proj = VisualProjector(8, rank=2)
    with torch.no_grad():
        proj.norm.weight.uniform_(0.5, 1.5)
        proj.norm.bias.uniform_(-0.2, 0.2)
    x = torch.randn(4, 8, dtype=torch.float64)
    proj = proj.double()
    got = project_prototypes(x, proj).detach().numpy()
    want = scalar_projector(
        x.tolist(), proj.norm.weight.tolist(), proj.norm.bias.tolist(), proj.down.tolist(), proj.up.tolist()
    )
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_projector_disabled_is_identity():
    x = torch.randn(5, 8)
    assert torch.equal(VisualProjector(8, enabled=False)(x), x)


def test_projector_width_mismatch():
    with pytest.raises(ShapeError):
        project_prototypes(torch.zeros(2, 7), VisualProjector(8))


def test_expand_sizes_and_boundary_row():
    text = torch.randn(5, 8)
    protos = torch.randn(4, 8)
    v = expand_vocabulary(text, protos)
    assert v.total_size == 9
    assert torch.equal(v.lookup(5), protos[0])
    assert torch.equal(v.table[5], protos[0])
    assert torch.equal(v.embed(torch.tensor([5]))[0], protos[0])
    with pytest.raises(ShapeError):
        expand_vocabulary(text, torch.randn(4, 7))


def test_two_images_differ_only_in_visual_rows():
    text = torch.randn(5, 8)
    a = expand_vocabulary(text, torch.randn(4, 8)).table
    b = expand_vocabulary(text, torch.randn(4, 8)).table
    same = [bool(torch.equal(a[i], b[i])) for i in range(9)]
    assert same == [True] * 5 + [False] * 4


def test_logits_examples():
    v = expand_vocabulary(torch.randn(5, 8), torch.randn(4, 8))
    assert torch.equal(logits(v, torch.zeros(8)), torch.zeros(9))
    q, _ = torch.linalg.qr(torch.randn(9, 9, dtype=torch.float64))
    ortho = expand_vocabulary(q[:5], q[5:])
    out = logits(ortho, q[6])
    expect = torch.zeros(9, dtype=torch.float64)
    expect[6] = 1
    torch.testing.assert_close(out, expect, atol=1e-12, rtol=0)


def test_logits_match_scalar_loop():
    g = torch.Generator().manual_seed(11)
    text = torch.randn(5, 8, generator=g)
    protos = torch.randn(4, 8, generator=g)
    h = torch.randn(8, generator=g)
    got = logits(expand_vocabulary(text, protos), h)
    rows = text.tolist() + protos.tolist()
    want = [sum(r[i] * h[i].item() for i in range(8)) for r in rows]
    np.testing.assert_allclose(got.numpy(), want, atol=1e-6)
    with pytest.raises(ShapeError):
        logits(expand_vocabulary(text, protos), torch.zeros(7))


def test_batched_matches_single():
    text = torch.randn(5, 8)
    protos = torch.randn(3, 4, 8)
    h = torch.randn(3, 6, 8)
    ids = torch.randint(0, 9, (3, 6))
    vb = expand_vocabulary(text, protos)
    for b in range(3):
        vs = expand_vocabulary(text, protos[b])
        torch.testing.assert_close(vb.logits(h)[b], vs.logits(h[b]))
        torch.testing.assert_close(vb.embed(ids)[b], vs.embed(ids[b]))


def test_weight_tying_in_place_edit_seen_by_both_routes():
    text = torch.randn(5, 8)
    protos = torch.randn(4, 8)
    v = expand_vocabulary(text, protos)
    h = torch.randn(8)
    protos[2].fill_(0.5)
    assert torch.equal(v.embed(torch.tensor([7]))[0], torch.full((8,), 0.5))
    assert torch.isclose(v.logits(h)[7], 0.5 * h.sum())


def test_gradient_reaches_prototypes_through_target_and_competitor():
    text = torch.randn(5, 8)
    protos = torch.randn(4, 8, requires_grad=True)
    v = expand_vocabulary(text, protos)
    h = torch.randn(1, 8)
    mask = torch.tensor([[1, 0, 0, 1]], dtype=torch.uint8)  # VRTs 1 and 2 visible
    loss = robust_ce(v.logits(h), torch.tensor([5 + 2]), mask, v_text=5)
    loss.backward()
    norms = protos.grad.norm(dim=1)
    assert norms[2] > 0 and norms[1] > 0
    assert norms[0] == 0 and norms[3] == 0
