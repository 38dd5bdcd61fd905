import numpy as np
import pytest

from footfield import autodiff as ad
from footfield import losses as L
from footfield import mesh as M
from footfield import model as MD
from footfield import synth
from footfield.autodiff import Tape, Tensor

from conftest import grad_check, rel_err

RNG = np.random.default_rng(77)


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def brute_force_chamfer(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def test_chamfer_identical_sets_zero():
    pts = RNG.random((40, 3))
    assert L.chamfer(pts, pts).item() == 0.0


def test_chamfer_single_point_pair():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0.0, 0.0]])
    assert L.chamfer(a, b).item() == 2.0  # both directional means are 1


@pytest.mark.parametrize("n", [10, 50, 200])
def test_chamfer_matches_brute_force_oracle_exactly(n):
    a = RNG.random((n, 3))
    b = RNG.random((n, 3))
    assert L.chamfer(a, b).item() == brute_force_chamfer(a, b)


def test_chamfer_symmetry():
    a = RNG.random((30, 3))
    b = RNG.random((45, 3))
    assert L.chamfer(a, b).item() == L.chamfer(b, a).item()


def test_chamfer_empty_set_errors():
    with pytest.raises(ValueError):
        L.chamfer(np.zeros((0, 3)), np.ones((3, 3)))


def test_chamfer_gradient_vs_finite_differences():
    a = ad.parameter(RNG.random((12, 3)))
    b = RNG.random((15, 3))
    err = grad_check(lambda: L.chamfer(a, b), [a], h=1e-7)
    assert err < 1e-5


def test_chamfer_accepts_sampled_points(template_foot):
    mesh, _ = template_foot
    sp1 = M.sample_surface(mesh, 100, seed=0)
    sp2 = M.sample_surface(mesh, 100, seed=1)
    assert L.chamfer(sp1, sp2).item() > 0


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

def test_smoothness_matches_definition(template_foot):
    mesh, _ = template_foot
    got = L.smoothness_loss(mesh.vertices, mesh.faces).item()
    lap = M.uniform_laplacian(mesh)
    edges = mesh.unique_edges()
    el2 = ((mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]) ** 2).sum(axis=1)
    expected = (lap ** 2).sum(axis=1).mean() + el2.mean()
    assert abs(got - expected) < 1e-15


def test_smoothness_scaling_quadratic():
    m = M.icosphere(1)
    s1 = L.smoothness_loss(m.vertices, m.faces).item()
    s2 = L.smoothness_loss(m.vertices * 2.0, m.faces).item()
    assert abs(s2 / s1 - 4.0) < 1e-12


def test_smoothness_gradient_vs_finite_differences():
    m = M.icosphere(1)  # 42 vertices; check a 20-coordinate subset
    v = ad.parameter(m.vertices)
    err = grad_check(lambda: L.smoothness_loss(v, m.faces), [v],
                     indices=range(20))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# texture
# ---------------------------------------------------------------------------

def make_model_and_instance(template):
    model = MD.FieldModel(template, seed=3)
    insts = MD.InstanceSet()
    inst = insts.add("idX", "scanX")
    return model, inst


def test_texture_loss_zero_when_prediction_matches(template_foot):
    mesh, _ = template_foot
    model, inst = make_model_and_instance(mesh)
    pts = M.sample_surface(mesh, 50, seed=0).points
    # ground truth := whatever the colour head currently outputs there
    feats = model.trunk_features(Tensor(inst.registration.invert_np(pts)))
    gt_colors = model.color(feats, inst.z_texture).data
    assert L.texture_loss(model, inst, pts, gt_colors).item() < 1e-12


def test_texture_loss_constant_offset(template_foot):
    mesh, _ = template_foot
    model, inst = make_model_and_instance(mesh)  # zero-init head: exactly 0.5
    pts = M.sample_surface(mesh, 64, seed=1).points
    gt = np.ones((64, 3))
    got = L.texture_loss(model, inst, pts, gt).item()
    assert abs(got - np.sqrt(3.0) * 0.5) < 1e-12


def test_texture_loss_gradient_wrt_texture_code(template_foot):
    mesh, _ = template_foot
    model, inst = make_model_and_instance(mesh)
    for w, b in model.color_head:  # non-degenerate head
        w.data = RNG.normal(0, 0.05, size=w.shape)
    pts = M.sample_surface(mesh, 16, seed=2).points
    gt = RNG.random((16, 3))
    inst.z_texture.data = RNG.normal(0, 0.1, size=100)
    err = grad_check(lambda: L.texture_loss(model, inst, pts, gt),
                     [inst.z_texture], indices=range(10))
    assert err < 1e-3


def test_texture_loss_requires_colors(template_foot):
    mesh, _ = template_foot
    model, inst = make_model_and_instance(mesh)
    with pytest.raises(ValueError):
        L.texture_loss(model, inst, np.zeros((4, 3)), None)


# ---------------------------------------------------------------------------
# contrastive
# ---------------------------------------------------------------------------

T_POSE = L.encode_pose_label(["T-Pose"])
PLANTAR = L.encode_pose_label(["Plantarflex"])


def vec(d):
    z = np.zeros(100)
    z[0] = d
    return z


def test_contrastive_same_code_same_label_zero():
    z = RNG.normal(size=100)
    assert L.contrastive_loss(z, z, T_POSE, T_POSE).item() == 0.0


def test_contrastive_closed_forms():
    # y = 1: d^2 ; y = 0, d < M: (M-d)^2 ; y = 0, d >= M: 0
    assert abs(L.contrastive_loss(vec(0), vec(0.3), T_POSE, T_POSE).item() - 0.09) < 1e-12
    assert abs(L.contrastive_loss(vec(0), vec(0), T_POSE, PLANTAR).item() - 0.25) < 1e-12
    assert abs(L.contrastive_loss(vec(0), vec(0.3), T_POSE, PLANTAR).item() - 0.04) < 1e-12
    assert L.contrastive_loss(vec(0), vec(0.7), T_POSE, PLANTAR).item() == 0.0


def test_contrastive_continuous_at_margin():
    eps = 1e-7
    below = L.contrastive_loss(vec(0), vec(0.5 - eps), T_POSE, PLANTAR).item()
    above = L.contrastive_loss(vec(0), vec(0.5 + eps), T_POSE, PLANTAR).item()
    assert abs(below - above) < 1e-12


def test_contrastive_similarity_clamped():
    both = L.encode_pose_label(["Dorsiflexion", "Inversion", "Toe Extension"])
    y = L.pose_similarity(both, both)
    assert y == 1.0
    y2 = L.pose_similarity(T_POSE, PLANTAR)
    assert y2 == 0.0
    mixed = L.pose_similarity(both, L.encode_pose_label(["Dorsiflex"]))
    assert 0.0 < mixed < 1.0


def test_contrastive_gradient_finite_at_zero_distance():
    z1 = ad.parameter(np.zeros(100))
    z2 = ad.parameter(np.zeros(100))
    with Tape() as tape:
        loss = L.contrastive_loss(z1, z2, T_POSE, PLANTAR)
        grads = tape.backward(loss)
    assert np.isfinite(grads[z1.tid]).all()


# ---------------------------------------------------------------------------
# part-based cross entropy
# ---------------------------------------------------------------------------

def brute_force_ce(scores, labels, valid):
    h, w, c = scores.shape
    total, count = 0.0, 0
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                continue
            e = np.exp(scores[i, j])
            total += -np.log(e[labels[i, j]] / e.sum())
            count += 1
    return total / count


def test_part_ce_one_hot_near_zero():
    c = 5
    scores = np.zeros((3, 3, c))
    labels = RNG.integers(0, c, size=(3, 3))
    for i in range(3):
        for j in range(3):
            scores[i, j, labels[i, j]] = 10.0
    got = L.part_ce_loss(scores, labels, np.ones((3, 3), bool)).item()
    assert got < np.log(1 + (c - 1) * np.exp(-10.0)) + 1e-12


def test_part_ce_uniform_scores():
    got = L.part_ce_loss(np.zeros((2, 2, 20)), np.zeros((2, 2), int),
                         np.ones((2, 2), bool)).item()
    assert abs(got - np.log(20.0)) < 1e-12


def test_part_ce_matches_brute_force():
    for c in (3, 7):
        scores = RNG.normal(size=(4, 4, c))
        labels = RNG.integers(0, c, size=(4, 4))
        valid = RNG.random((4, 4)) > 0.3
        valid[0, 0] = True
        got = L.part_ce_loss(scores, labels, valid).item()
        assert abs(got - brute_force_ce(scores, labels, valid)) < 1e-12


def test_part_ce_monotone_in_correct_score():
    scores = RNG.normal(size=(2, 2, 4))
    labels = RNG.integers(0, 4, size=(2, 2))
    valid = np.ones((2, 2), bool)
    prev = None
    for bump in np.linspace(0.0, 3.0, 7):
        s = scores.copy()
        s[0, 1, labels[0, 1]] += bump
        val = L.part_ce_loss(s, labels, valid).item()
        if prev is not None:
            assert val < prev
        prev = val


def test_part_ce_errors():
    with pytest.raises(ValueError):
        L.part_ce_loss(np.zeros((2, 2, 3)), np.zeros((2, 2), int),
                       np.zeros((2, 2), bool))  # empty valid mask
    with pytest.raises(ValueError):
        L.part_ce_loss(np.zeros((2, 2, 3)), np.full((2, 2), 5),
                       np.ones((2, 2), bool))  # label out of range
    with pytest.raises(ad.ShapeError):
        L.part_ce_loss(np.zeros((2, 2, 3)), np.zeros((3, 2), int),
                       np.ones((2, 2), bool))


def test_part_ce_gradient_vs_finite_differences():
    scores = ad.parameter(RNG.normal(size=(3, 3, 4)))
    labels = RNG.integers(0, 4, size=(3, 3))
    valid = np.ones((3, 3), bool)
    err = grad_check(lambda: L.part_ce_loss(scores, labels, valid), [scores])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# pose labels
# ---------------------------------------------------------------------------

def test_pose_label_worked_example():
    v = L.encode_pose_label(["Dorsiflexion", "Inversion", "Toe Extension"])
    assert v.tolist() == [0, 1, -1, 0, 1, 0, 0, 0]


def test_pose_label_tpose():
    assert L.encode_pose_label(["T-Pose"]).tolist() == [1, 0, 0, 0, 0, 0, 0, 0]


def test_pose_label_conflicting_extremes():
    with pytest.raises(ValueError):
        L.encode_pose_label(["Plantarflex", "Dorsiflex"])


def test_pose_label_unknown_name():
    with pytest.raises(ValueError):
        L.encode_pose_label(["Moonwalk"])


def test_pose_label_encode_decode_identity():
    vocab = ["T-Pose", "Plantarflex", "Dorsiflex", "Inversion", "Eversion",
             "Lateral rotation", "Medial rotation", "Toe Flexion",
             "Toe Extension", "Toe Abduction", "Toe Adduction",
             "Standing on Floor", "Tiptoes"]
    for name in vocab:
        v = L.encode_pose_label([name])
        assert np.array_equal(L.encode_pose_label(L.decode_pose_label(v)), v)
    combo = L.encode_pose_label(["Dorsiflex", "Eversion", "Tiptoes"])
    assert np.array_equal(L.encode_pose_label(L.decode_pose_label(combo)), combo)


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        L.LossWeights(chamfer=-1.0)


def test_all_losses_finite_on_stress_inputs():
    pts_a = RNG.normal(size=(30, 3)) * 100
    pts_b = RNG.normal(size=(25, 3)) * 100
    assert np.isfinite(L.chamfer(pts_a, pts_b).item())
    m = M.icosphere(1)
    assert np.isfinite(L.smoothness_loss(m.vertices * 1e3, m.faces).item())
    scores = ad.parameter(RNG.normal(size=(3, 3, 4)) * 50)
    labels = RNG.integers(0, 4, size=(3, 3))
    with Tape() as tape:
        loss = L.part_ce_loss(scores, labels, np.ones((3, 3), bool))
        grads = tape.backward(loss)
    assert np.isfinite(loss.item()) and np.isfinite(grads[scores.tid]).all()
